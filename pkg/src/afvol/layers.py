"""LSTM cell, attention-free blocks and the gated AF-LSTM forecasting layer.

All forward math runs through the autodiff tape.  The batched entry points
(`bind`, `af_lstm_predict`, `lstm_predict`, `lstm_cell`, `af_steps`) operate
on lists of [batch x features] tensors, one per time step; the convenience
wrappers (`lstm_step`, `af_block`, `af_lstm_forward`, `lstm_forward`) run the
same code with a single sample and plain numpy arrays.

Parameter files are text: a JSON header line (format name, kind, optional
seed and variant, array names and shapes in order), then one line per array
with its row-major float64 values written via repr so they round-trip
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor

PARAMS_FORMAT = "afvol-params-v1"
AF_VARIANTS = ("simple", "position_bias")


class CapacityError(ValueError):
    """Sequence longer than the position-bias table allows."""


def _check_variant(variant: str) -> None:
    if variant not in AF_VARIANTS:
        raise ValueError(f"variant must be one of {AF_VARIANTS}, got {variant!r}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmParams:
    """Gate weights [hidden x (hidden+input)] and biases [hidden]."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        for name in ("W_f", "W_i", "W_c", "W_o", "b_f", "b_i", "b_c", "b_o"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.b_f.shape[0] if self.b_f.ndim == 1 else -1
        for name in ("b_f", "b_i", "b_c", "b_o"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"{name} must have shape ({h},), got {getattr(self, name).shape}")
        cols = self.W_f.shape[1] if self.W_f.ndim == 2 else -1
        if cols <= h:
            raise ShapeError(f"gate matrices need more than {h} columns for [h; z], got {cols}")
        for name in ("W_f", "W_i", "W_c", "W_o"):
            if getattr(self, name).shape != (h, cols):
                raise ShapeError(f"{name} must have shape ({h}, {cols}), got {getattr(self, name).shape}")

    @property
    def hidden_size(self) -> int:
        return self.b_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1] - self.hidden_size


@dataclass
class LstmState:
    """Hidden and cell vectors; h is tanh-bounded so |h| stays below 1."""

    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.h.shape != self.c.shape or self.h.ndim != 1:
            raise ShapeError(f"h and c must be equal-length vectors, got {self.h.shape} and {self.c.shape}")
        if not (np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.c))):
            raise ValueError("state entries must be finite")
        if np.any(np.abs(self.h) > 1.0):
            raise ValueError("|h| entries cannot exceed 1")

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


@dataclass
class AfBlockParams:
    """Input embedding (W_x, b_x), query/key/value maps, optional position biases."""

    W_x: np.ndarray
    b_x: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    w_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("W_x", "b_x", "W_q", "W_k", "W_v"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.W_x.ndim != 2:
            raise ShapeError(f"W_x must be a matrix, got shape {self.W_x.shape}")
        d = self.W_x.shape[0]
        if self.b_x.shape != (d,):
            raise ShapeError(f"b_x must have shape ({d},), got {self.b_x.shape}")
        for name in ("W_q", "W_k", "W_v"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must have shape ({d}, {d}), got {getattr(self, name).shape}")
        if self.w_bias is not None:
            self.w_bias = np.asarray(self.w_bias, dtype=np.float64)
            if self.w_bias.ndim != 2 or self.w_bias.shape[0] != self.w_bias.shape[1]:
                raise ShapeError(f"w_bias must be square, got shape {self.w_bias.shape}")

    @property
    def dim(self) -> int:
        return self.W_x.shape[0]

    @property
    def in_size(self) -> int:
        return self.W_x.shape[1]

    @property
    def t_max(self) -> Optional[int]:
        return None if self.w_bias is None else self.w_bias.shape[0]


@dataclass
class LayerNormParams:
    psi: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.psi.ndim != 1 or self.psi.shape != self.phi.shape:
            raise ShapeError(f"psi and phi must be equal-length vectors, got {self.psi.shape} and {self.phi.shape}")


@dataclass
class AfLstmParams:
    """Two AF channels, their layer norms, the LSTM and the scalar output head."""

    af1: AfBlockParams
    af2: AfBlockParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams
    lstm: LstmParams
    W_y: np.ndarray
    b_y: np.ndarray

    def __post_init__(self):
        self.W_y = np.asarray(self.W_y, dtype=np.float64)
        self.b_y = np.asarray(self.b_y, dtype=np.float64).reshape(1)
        d = self.af1.dim
        if self.af2.dim != d or self.af2.in_size != self.af1.in_size:
            raise ShapeError("af1 and af2 must share input and embedding dimensions")
        for name, ln in (("ln1", self.ln1), ("ln2", self.ln2), ("ln3", self.ln3)):
            if ln.psi.shape != (d,):
                raise ShapeError(f"{name} must normalize dim {d}, got {ln.psi.shape}")
        if self.lstm.input_size != d:
            raise ShapeError(f"lstm input size {self.lstm.input_size} != block dim {d}")
        if self.W_y.shape != (1, self.lstm.hidden_size):
            raise ShapeError(f"W_y must have shape (1, {self.lstm.hidden_size}), got {self.W_y.shape}")

    @property
    def in_size(self) -> int:
        return self.af1.in_size

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size


@dataclass
class LstmModelParams:
    """Plain LSTM with the same scalar output head, used as the benchmark."""

    lstm: LstmParams
    W_y: np.ndarray
    b_y: np.ndarray

    def __post_init__(self):
        self.W_y = np.asarray(self.W_y, dtype=np.float64)
        self.b_y = np.asarray(self.b_y, dtype=np.float64).reshape(1)
        if self.W_y.shape != (1, self.lstm.hidden_size):
            raise ShapeError(f"W_y must have shape (1, {self.lstm.hidden_size}), got {self.W_y.shape}")

    @property
    def in_size(self) -> int:
        return self.lstm.input_size

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size


_LSTM_FIELDS = ("W_f", "W_i", "W_c", "W_o", "b_f", "b_i", "b_c", "b_o")
_AF_FIELDS = ("W_x", "b_x", "W_q", "W_k", "W_v")


def named_arrays(params) -> list[tuple[str, np.ndarray]]:
    """Canonical (name, array) sequence; nested components use dotted prefixes."""
    if isinstance(params, LstmParams):
        return [(f, getattr(params, f)) for f in _LSTM_FIELDS]
    if isinstance(params, AfBlockParams):
        out = [(f, getattr(params, f)) for f in _AF_FIELDS]
        if params.w_bias is not None:
            out.append(("w_bias", params.w_bias))
        return out
    if isinstance(params, LayerNormParams):
        return [("psi", params.psi), ("phi", params.phi)]
    if isinstance(params, (AfLstmParams, LstmModelParams)):
        out = []
        if isinstance(params, AfLstmParams):
            for comp in ("af1", "af2", "ln1", "ln2", "ln3"):
                out.extend((f"{comp}.{n}", a) for n, a in named_arrays(getattr(params, comp)))
        out.extend((f"lstm.{n}", a) for n, a in named_arrays(params.lstm))
        out.append(("W_y", params.W_y))
        out.append(("b_y", params.b_y))
        return out
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def bind(tape: Tape, params, prefix: str = "") -> dict[str, Tensor]:
    """Register every parameter array as a tape leaf.

    Bias vectors become [1 x d] rows so they can be tiled across a batch;
    layer-norm vectors stay one-dimensional to match layer_norm's contract.
    """
    bound = {}
    for name, arr in named_arrays(params):
        leaf = name.rsplit(".", 1)[-1]
        if arr.ndim == 1 and leaf not in ("psi", "phi"):
            arr = arr.reshape(1, -1)
        bound[prefix + name] = tape.tensor(arr)
    return bound


# ---------------------------------------------------------------------------
# tensor-level forward passes (lists of [batch x features] step tensors)


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = ad.matmul(x, ad.transpose(w))
    if b is not None:
        y = ad.add(y, ad.tile_rows(b, x.shape[0]))
    return y


def lstm_cell(p: dict[str, Tensor], pre: str, h: Tensor, c: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on [batch x *] tensors; returns the new (h, c)."""
    cat = ad.concat(h, z, axis=1)
    f = ad.sigmoid(_linear(cat, p[pre + "W_f"], p[pre + "b_f"]))
    i = ad.sigmoid(_linear(cat, p[pre + "W_i"], p[pre + "b_i"]))
    c_tilde = ad.tanh(_linear(cat, p[pre + "W_c"], p[pre + "b_c"]))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, c_tilde))
    o = ad.sigmoid(_linear(cat, p[pre + "W_o"], p[pre + "b_o"]))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def af_steps(p: dict[str, Tensor], pre: str, steps: list[Tensor], variant: str = "simple") -> list[Tensor]:
    """Attention-free block over a step list; returns one [batch x dim] per step.

    simple: a softmax over time of K pools V into one context, gated per step
    by sigmoid(Q).  position_bias: each target step reweights the pool with
    exp(K + w[t, t']) and normalizes.  Max subtraction keeps exp in range; the
    subtracted maxima are constants, which leaves both value and gradient
    unchanged.
    """
    _check_variant(variant)
    if not steps:
        raise ValueError("need at least one time step")
    tape = steps[0].tape
    x = [_linear(z, p[pre + "W_x"], p[pre + "b_x"]) for z in steps]
    q = [_linear(xt, p[pre + "W_q"]) for xt in x]
    k = [_linear(xt, p[pre + "W_k"]) for xt in x]
    v = [_linear(xt, p[pre + "W_v"]) for xt in x]
    t_len = len(steps)

    if variant == "simple":
        m = tape.tensor(np.maximum.reduce([kt.data for kt in k]))
        e = [ad.exp(ad.sub(kt, m)) for kt in k]
        total = e[0]
        for et in e[1:]:
            total = ad.add(total, et)
        context = ad.mul(ad.div(e[0], total), v[0])
        for et, vt in zip(e[1:], v[1:]):
            context = ad.add(context, ad.mul(ad.div(et, total), vt))
        return [ad.mul(ad.sigmoid(qt), context) for qt in q]

    w_name = pre + "w_bias"
    if w_name not in p:
        raise ValueError("position_bias variant requires w_bias parameters")
    w = p[w_name]
    if t_len > w.shape[0]:
        raise CapacityError(f"sequence length {t_len} exceeds the position-bias capacity {w.shape[0]}")
    out = []
    for t in range(t_len):
        shifted = [ad.add(kt, ad.slice_block(w, t, t + 1, j, j + 1)) for j, kt in enumerate(k)]
        m = tape.tensor(np.maximum.reduce([s.data for s in shifted]))
        a = [ad.exp(ad.sub(s, m)) for s in shifted]
        num = ad.mul(a[0], v[0])
        den = a[0]
        for at, vt in zip(a[1:], v[1:]):
            num = ad.add(num, ad.mul(at, vt))
            den = ad.add(den, at)
        out.append(ad.mul(ad.sigmoid(q[t]), ad.div(num, den)))
    return out


def af_lstm_predict(
    p: dict[str, Tensor],
    steps: list[Tensor],
    variant: str = "simple",
    state: Optional[tuple[Tensor, Tensor]] = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Full AF-LSTM pass: gated channels, layer norms, LSTM, linear head.

    Returns the [batch x 1] prediction and the final (h, c) tensors.
    """
    tape = steps[0].tape
    a1 = af_steps(p, "af1.", steps, variant)
    a2 = af_steps(p, "af2.", steps, variant)
    zeta = []
    for t1, t2 in zip(a1, a2):
        left = ad.relu(ad.layer_norm(t1, p["ln1.psi"], p["ln1.phi"]))
        right = ad.layer_norm(t2, p["ln2.psi"], p["ln2.phi"])
        zeta.append(ad.layer_norm(ad.mul(left, right), p["ln3.psi"], p["ln3.phi"]))
    if state is None:
        n, hidden = steps[0].shape[0], p["lstm.W_f"].shape[0]
        state = (tape.tensor(np.zeros((n, hidden))), tape.tensor(np.zeros((n, hidden))))
    h, c = state
    for z in zeta:
        h, c = lstm_cell(p, "lstm.", h, c, z)
    pred = ad.add(ad.matmul(h, ad.transpose(p["W_y"])), p["b_y"])
    return pred, (h, c)


def lstm_predict(
    p: dict[str, Tensor],
    steps: list[Tensor],
    state: Optional[tuple[Tensor, Tensor]] = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Benchmark pass: raw steps into the LSTM, then the linear head."""
    tape = steps[0].tape
    if state is None:
        n, hidden = steps[0].shape[0], p["lstm.W_f"].shape[0]
        state = (tape.tensor(np.zeros((n, hidden))), tape.tensor(np.zeros((n, hidden))))
    h, c = state
    for z in steps:
        h, c = lstm_cell(p, "lstm.", h, c, z)
    pred = ad.add(ad.matmul(h, ad.transpose(p["W_y"])), p["b_y"])
    return pred, (h, c)


# ---------------------------------------------------------------------------
# single-sample numpy wrappers


def lstm_step(params: LstmParams, state: LstmState, z) -> LstmState:
    """Advance one LSTM step on plain vectors."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.input_size,):
        raise ShapeError(f"z must have shape ({params.input_size},), got {z.shape}")
    if state.h.shape != (params.hidden_size,):
        raise ShapeError(f"state must have {params.hidden_size} entries, got {state.h.shape}")
    tape = Tape()
    p = bind(tape, params)
    h, c = lstm_cell(p, "", tape.tensor(state.h.reshape(1, -1)), tape.tensor(state.c.reshape(1, -1)), tape.tensor(z.reshape(1, -1)))
    return LstmState(h.data[0].copy(), c.data[0].copy())


def _as_steps(tape: Tape, Z: np.ndarray) -> list[Tensor]:
    return [tape.tensor(Z[t].reshape(1, -1).copy()) for t in range(Z.shape[0])]


def af_block(params: AfBlockParams, Z, variant: str = "simple"):
    """Apply one attention-free block to a [T x q] sequence.

    Accepts a tape Tensor (returns a Tensor on the same tape, parameters
    entering as constants) or a plain array (returns an array).
    """
    if isinstance(Z, Tensor):
        tape = Z.tape
        if Z.ndim != 2 or Z.shape[1] != params.in_size:
            raise ShapeError(f"Z must be [T x {params.in_size}], got shape {Z.shape}")
        p = bind(tape, params)
        steps = [ad.take_row(Z, t) for t in range(Z.shape[0])]
        outs = af_steps(p, "", steps, variant)
        stacked = outs[0]
        for o in outs[1:]:
            stacked = ad.concat(stacked, o, axis=0)
        return stacked
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.in_size:
        raise ShapeError(f"Z must be [T x {params.in_size}], got shape {Z.shape}")
    tape = Tape()
    p = bind(tape, params)
    outs = af_steps(p, "", _as_steps(tape, Z), variant)
    return np.vstack([o.data for o in outs])


def _forward_scalar(params, Z, state, predict, variant=None) -> tuple[float, LstmState]:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.in_size:
        raise ShapeError(f"Z must be [T x {params.in_size}], got shape {Z.shape}")
    if Z.shape[0] < 1:
        raise ShapeError("need at least one time step")
    tape = Tape()
    p = bind(tape, params)
    steps = _as_steps(tape, Z)
    if state is not None:
        bound_state = (tape.tensor(state.h.reshape(1, -1)), tape.tensor(state.c.reshape(1, -1)))
    else:
        bound_state = None
    kwargs = {} if variant is None else {"variant": variant}
    pred, (h, c) = predict(p, steps, state=bound_state, **kwargs)
    return float(pred.data[0, 0]), LstmState(h.data[0].copy(), c.data[0].copy())


def af_lstm_forward(params: AfLstmParams, Z, state: Optional[LstmState] = None, variant: str = "simple") -> tuple[float, LstmState]:
    """One-shot volatility estimate from a [T x q] window; returns (sigma_hat, state)."""
    return _forward_scalar(params, Z, state, af_lstm_predict, variant)


def lstm_forward(params: LstmModelParams, Z, state: Optional[LstmState] = None) -> tuple[float, LstmState]:
    """Benchmark LSTM estimate from a [T x q] window; returns (sigma_hat, state)."""
    return _forward_scalar(params, Z, state, lstm_predict)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_lstm(rng: np.random.Generator, input_size: int, hidden_size: int) -> LstmParams:
    cols = hidden_size + input_size
    ws = [_uniform(rng, (hidden_size, cols), cols) for _ in range(4)]
    bs = [_uniform(rng, (hidden_size,), cols) for _ in range(4)]
    return LstmParams(*ws, *bs)


def _init_af_block(rng: np.random.Generator, in_size: int, dim: int, t_max: Optional[int]) -> AfBlockParams:
    W_x = _uniform(rng, (dim, in_size), in_size)
    b_x = _uniform(rng, (dim,), in_size)
    wqkv = [_uniform(rng, (dim, dim), dim) for _ in range(3)]
    # Zero biases make position_bias start exactly at the simple variant.
    w_bias = None if t_max is None else np.zeros((t_max, t_max))
    return AfBlockParams(W_x, b_x, *wqkv, w_bias)


def init_params(
    kind: str,
    seed: int,
    *,
    input_size: int,
    hidden_size: Optional[int] = None,
    dim: Optional[int] = None,
    t_max: Optional[int] = None,
):
    """Build freshly initialized parameters; deterministic given the seed.

    Weights are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], layer norms
    start as the identity (psi=1, phi=0).  kind is "lstm" (bare cell),
    "lstm_model" (cell plus scalar head) or "af_lstm".
    """
    if input_size < 1 or (hidden_size is not None and hidden_size < 1):
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    if kind == "lstm":
        if hidden_size is None:
            raise ValueError("hidden_size is required")
        return _init_lstm(rng, input_size, hidden_size)
    if kind == "lstm_model":
        if hidden_size is None:
            raise ValueError("hidden_size is required")
        lstm = _init_lstm(rng, input_size, hidden_size)
        W_y = _uniform(rng, (1, hidden_size), hidden_size)
        b_y = _uniform(rng, (1,), hidden_size)
        return LstmModelParams(lstm, W_y, b_y)
    if kind == "af_lstm":
        if hidden_size is None:
            raise ValueError("hidden_size is required")
        d = input_size if dim is None else dim
        af1 = _init_af_block(rng, input_size, d, t_max)
        af2 = _init_af_block(rng, input_size, d, t_max)
        lns = [LayerNormParams(np.ones(d), np.zeros(d)) for _ in range(3)]
        lstm = _init_lstm(rng, d, hidden_size)
        W_y = _uniform(rng, (1, hidden_size), hidden_size)
        b_y = _uniform(rng, (1,), hidden_size)
        return AfLstmParams(af1, af2, *lns, lstm, W_y, b_y)
    raise ValueError(f"unknown parameter kind {kind!r}")


# ---------------------------------------------------------------------------
# serialization


def _kind_of(params) -> str:
    return {LstmParams: "lstm", LstmModelParams: "lstm_model", AfLstmParams: "af_lstm"}[type(params)]


def save_params(path, params, *, seed: Optional[int] = None, variant: Optional[str] = None) -> None:
    """Write parameters as a JSON header line plus one line of values per array."""
    arrays = named_arrays(params)
    header = {
        "format": PARAMS_FORMAT,
        "kind": _kind_of(params),
        "seed": seed,
        "variant": variant,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for _, a in arrays:
            fh.write(" ".join(repr(float(v)) for v in a.ravel(order="C")) + "\n")


def _group(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    cut = len(prefix)
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix)}


def _build_lstm(arrays: dict[str, np.ndarray]) -> LstmParams:
    return LstmParams(**{f: arrays[f] for f in _LSTM_FIELDS})


def _build_af_block(arrays: dict[str, np.ndarray]) -> AfBlockParams:
    return AfBlockParams(**{f: arrays[f] for f in _AF_FIELDS}, w_bias=arrays.get("w_bias"))


def load_params(path) -> tuple[object, dict]:
    """Read a parameter file; returns (params, header metadata)."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != PARAMS_FORMAT:
            raise ValueError(f"unrecognized parameter file format {header.get('format')!r}")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            line = fh.readline()
            if not line:
                raise ValueError(f"parameter file truncated before array {entry['name']!r}")
            values = np.array([float(v) for v in line.split()], dtype=np.float64)
            arrays[entry["name"]] = values.reshape(entry["shape"])
    kind = header["kind"]
    if kind == "lstm":
        params = _build_lstm(arrays)
    elif kind == "lstm_model":
        params = LstmModelParams(_build_lstm(_group(arrays, "lstm.")), arrays["W_y"], arrays["b_y"])
    elif kind == "af_lstm":
        params = AfLstmParams(
            _build_af_block(_group(arrays, "af1.")),
            _build_af_block(_group(arrays, "af2.")),
            LayerNormParams(**_group(arrays, "ln1.")),
            LayerNormParams(**_group(arrays, "ln2.")),
            LayerNormParams(**_group(arrays, "ln3.")),
            _build_lstm(_group(arrays, "lstm.")),
            arrays["W_y"],
            arrays["b_y"],
        )
    else:
        raise ValueError(f"unknown parameter kind {kind!r}")
    return params, header
