"""GARCH(P,Q) and GJR-GARCH(P,Q): filtering, simulation, Gaussian MLE.

The variance recursion is

    sigma2[t] = omega + sum_p alpha_p * eps[t-p]**2 + sum_q beta_q * sigma2[t-q]

with the GJR variant adding gamma_p * eps[t-p]**2 whenever eps[t-p] < 0.
Estimation is exercised at order (1,1); the types and the filter support
higher orders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

VALID_KINDS = ("garch", "gjr")

_LOG_2PI = float(np.log(2.0 * np.pi))


class GarchConstraintError(ValueError):
    """Parameter vector violates positivity or stationarity constraints."""


class GarchDataError(ValueError):
    """Input series unusable for estimation (too short, constant, ...)."""


class GarchFitError(RuntimeError):
    """Likelihood optimization failed; carries the best parameters seen."""

    def __init__(self, message: str, best_params: "GarchParams", best_loglik: float):
        super().__init__(message)
        self.best_params = best_params
        self.best_loglik = best_loglik


def _check_kind(kind: str) -> None:
    if kind not in VALID_KINDS:
        raise ValueError(f"kind must be one of {VALID_KINDS}, got {kind!r}")


@dataclass(frozen=True)
class GarchParams:
    """omega > 0, alpha_p >= 0, beta_q >= 0; gamma only for the GJR variant."""

    omega: float
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    gamma: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.gamma is not None:
            object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def p_order(self) -> int:
        return len(self.alpha)

    @property
    def q_order(self) -> int:
        return len(self.beta)

    def validate(self, kind: str) -> None:
        _check_kind(kind)
        if self.omega <= 0:
            raise GarchConstraintError(f"omega must be positive, got {self.omega}")
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise GarchConstraintError("alpha and beta entries must be non-negative")
        if kind == "gjr":
            if self.gamma is None or len(self.gamma) != len(self.alpha):
                raise GarchConstraintError("gjr requires gamma with one entry per alpha lag")
            # Keeps sigma2 positive on negative shocks.
            if any(a + g < 0 for a, g in zip(self.alpha, self.gamma)):
                raise GarchConstraintError("gjr requires alpha_p + gamma_p >= 0")
        persistence = self._persistence(kind)
        if persistence >= 1.0:
            raise GarchConstraintError(
                f"non-stationary parameters: persistence {persistence:.6f} >= 1"
            )

    def _persistence(self, kind: str) -> float:
        total = sum(self.alpha) + sum(self.beta)
        if kind == "gjr" and self.gamma is not None:
            total += 0.5 * sum(self.gamma)
        return total


@dataclass(frozen=True)
class VolatilityPath:
    """Conditional variances with the residuals and returns that produced them."""

    sigma2: np.ndarray
    residuals: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        if not (len(self.sigma2) == len(self.residuals) == len(self.returns)):
            raise ValueError("sigma2, residuals and returns must have equal length")
        if np.any(self.sigma2 <= 0):
            raise ValueError("conditional variances must be strictly positive")


def unconditional_variance(params: GarchParams, kind: str = "garch") -> float:
    """Long-run variance omega / (1 - sum(alpha) - sum(gamma)/2 - sum(beta))."""
    _check_kind(kind)
    denom = 1.0 - params._persistence(kind)
    if denom <= 0:
        raise GarchConstraintError(f"unconditional variance undefined: 1 - persistence = {denom:.6f} <= 0")
    return params.omega / denom


def garch_filter(
    params: GarchParams,
    returns,
    kind: str = "garch",
    *,
    mean: Optional[float] = None,
    sigma0_sq: Optional[float] = None,
) -> VolatilityPath:
    """Run the variance recursion over an observed return series.

    mean defaults to the sample mean (residuals are demeaned returns) and
    sigma0_sq to the sample variance; both can be pinned, e.g. to train-window
    statistics, or to reproduce a simulated path exactly.
    """
    params.validate(kind)
    r = np.asarray(returns, dtype=np.float64)
    max_lag = max(params.p_order, params.q_order)
    if r.ndim != 1 or len(r) <= max_lag:
        raise GarchDataError(f"need more than {max_lag} returns, got {len(r)}")
    mu = float(np.mean(r)) if mean is None else float(mean)
    eps = r - mu
    if sigma0_sq is None:
        sigma0_sq = float(np.var(eps))
    if sigma0_sq <= 0:
        raise GarchDataError("returns are constant; variance recursion cannot be seeded")
    sigma2 = _recursion(params, kind, eps, float(sigma0_sq))
    return VolatilityPath(sigma2=sigma2, residuals=eps, returns=r)


def _recursion(params: GarchParams, kind: str, eps: np.ndarray, sigma0_sq: float) -> np.ndarray:
    n = len(eps)
    is_gjr = kind == "gjr"
    if params.p_order == 1 and params.q_order == 1:
        return _recursion_11(params, is_gjr, eps, sigma0_sq, n)
    alpha, beta = params.alpha, params.beta
    gamma = params.gamma if (is_gjr and params.gamma is not None) else (0.0,) * len(alpha)
    sigma2 = np.empty(n)
    sigma2[0] = sigma0_sq
    e2 = eps * eps
    for t in range(1, n):
        s = params.omega
        for p, (a, g) in enumerate(zip(alpha, gamma), start=1):
            if t - p >= 0:
                s += a * e2[t - p]
                if is_gjr and eps[t - p] < 0:
                    s += g * e2[t - p]
            else:
                # Pre-sample lags take their expected contribution.
                s += (a + 0.5 * g) * sigma0_sq
        for q, b in enumerate(beta, start=1):
            s += b * (sigma2[t - q] if t - q >= 0 else sigma0_sq)
        sigma2[t] = s
    return sigma2


def _recursion_11(params: GarchParams, is_gjr: bool, eps: np.ndarray, sigma0_sq: float, n: int) -> np.ndarray:
    omega = params.omega
    alpha = params.alpha[0]
    beta = params.beta[0]
    gamma = params.gamma[0] if (is_gjr and params.gamma is not None) else 0.0
    sigma2 = np.empty(n)
    prev = sigma0_sq
    sigma2[0] = prev
    e = eps.tolist()
    for t in range(1, n):
        e_prev = e[t - 1]
        coef = alpha + gamma if (is_gjr and e_prev < 0) else alpha
        prev = omega + coef * e_prev * e_prev + beta * prev
        sigma2[t] = prev
    return sigma2


def garch_simulate(params: GarchParams, n: int, seed: int, kind: str = "garch") -> VolatilityPath:
    """Simulate r_t = sigma_t * z_t with z_t iid standard normal.

    Deterministic given the seed; draws come from numpy's default_rng (PCG64).
    The recursion starts at the unconditional variance.
    """
    params.validate(kind)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    uv = unconditional_variance(params, kind)
    is_gjr = kind == "gjr"
    alpha, beta = params.alpha, params.beta
    gamma = params.gamma if (is_gjr and params.gamma is not None) else (0.0,) * len(alpha)
    sigma2 = np.empty(n)
    eps = np.empty(n)
    sigma2[0] = uv
    eps[0] = np.sqrt(uv) * z[0]
    for t in range(1, n):
        s = params.omega
        for p, (a, g) in enumerate(zip(alpha, gamma), start=1):
            if t - p >= 0:
                e_lag = eps[t - p]
                coef = a + g if (is_gjr and e_lag < 0) else a
                s += coef * e_lag * e_lag
            else:
                s += (a + 0.5 * g) * uv
        for q, b in enumerate(beta, start=1):
            s += b * (sigma2[t - q] if t - q >= 0 else uv)
        sigma2[t] = s
        eps[t] = np.sqrt(s) * z[t]
    return VolatilityPath(sigma2=sigma2, residuals=eps, returns=eps.copy())


def gaussian_loglik(params: GarchParams, returns, kind: str = "garch", **filter_kwargs) -> float:
    """Gaussian log-likelihood of the filtered path: -0.5*sum(log 2pi + log s2 + e2/s2)."""
    path = garch_filter(params, returns, kind, **filter_kwargs)
    e2 = path.residuals * path.residuals
    return float(-0.5 * np.sum(_LOG_2PI + np.log(path.sigma2) + e2 / path.sigma2))


def forecast_sigma(params: GarchParams, path: VolatilityPath, kind: str = "garch", horizon: int = 1) -> float:
    """One-step-ahead conditional volatility sqrt(sigma2[T+1]) from a filtered path."""
    params.validate(kind)
    if horizon != 1:
        raise ValueError("only horizon=1 forecasts are supported")
    is_gjr = kind == "gjr"
    gamma = params.gamma if (is_gjr and params.gamma is not None) else (0.0,) * len(params.alpha)
    s = params.omega
    n = len(path.residuals)
    for p, (a, g) in enumerate(zip(params.alpha, gamma), start=1):
        e_lag = path.residuals[n - p]
        coef = a + g if (is_gjr and e_lag < 0) else a
        s += coef * e_lag * e_lag
    for q, b in enumerate(params.beta, start=1):
        s += b * path.sigma2[n - q]
    return float(np.sqrt(s))


# ---------------------------------------------------------------------------
# maximum likelihood at order (1,1)


def _theta_to_params(theta: np.ndarray, kind: str) -> GarchParams:
    # omega = exp(a); (alpha, beta, gamma/2) live on the open simplex, so the
    # stationarity constraint holds by construction.
    omega = float(np.exp(theta[0]))
    e = np.exp(theta[1:])
    s = e / (1.0 + e.sum())
    if kind == "gjr":
        return GarchParams(omega, (float(s[0]),), (float(s[1]),), (float(2.0 * s[2]),))
    return GarchParams(omega, (float(s[0]),), (float(s[1]),))


def _params_to_theta(omega: float, alpha: float, beta: float, gamma: Optional[float], kind: str) -> np.ndarray:
    shares = [alpha, beta] + ([gamma / 2.0] if kind == "gjr" else [])
    slack = 1.0 - sum(shares)
    if slack <= 0 or any(s <= 0 for s in shares):
        raise ValueError("starting point must lie strictly inside the stationarity region")
    return np.array([np.log(omega)] + [np.log(s / slack) for s in shares])


def fit_mle(
    returns,
    kind: str = "garch",
    *,
    max_iter: int = 4000,
    start: Optional[GarchParams] = None,
) -> tuple[GarchParams, float]:
    """Fit order-(1,1) parameters by Gaussian maximum likelihood.

    Nelder-Mead over transformed parameters (log omega, simplex logits), so
    every candidate is stationary.  Deterministic given the start and
    optimizer settings.  Returns the fitted parameters and their
    log-likelihood; raises GarchFitError (carrying the best point seen) if
    the optimizer fails to improve on the start.
    """
    _check_kind(kind)
    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 1 or len(r) < 50:
        raise GarchDataError(f"need at least 50 observations to fit, got {len(r)}")
    mu = float(np.mean(r))
    eps = r - mu
    var = float(np.var(eps))
    if var <= 0 or not np.isfinite(var):
        raise GarchDataError("returns are constant or non-finite; nothing to fit")

    if start is None:
        # Common econometric default near the persistent region.
        if kind == "gjr":
            theta0 = _params_to_theta(0.1 * var, 0.1, 0.8, 0.05, kind)
        else:
            theta0 = _params_to_theta(0.1 * var, 0.1, 0.8, None, kind)
    else:
        start.validate(kind)
        gamma0 = start.gamma[0] if start.gamma is not None else None
        theta0 = _params_to_theta(start.omega, start.alpha[0], start.beta[0], gamma0, kind)

    def nll(theta: np.ndarray) -> float:
        try:
            p = _theta_to_params(theta, kind)
        except (OverflowError, FloatingPointError):
            return np.inf
        if not np.isfinite(p.omega) or p.omega <= 0:
            return np.inf
        try:
            value = -gaussian_loglik(p, r, kind, mean=mu, sigma0_sq=var)
        except GarchConstraintError:
            # Extreme logits can round the simplex onto the persistence
            # boundary; treat such candidates as infinitely bad.
            return np.inf
        return value if np.isfinite(value) else np.inf

    options = {"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-10}
    res = minimize(nll, theta0, method="Nelder-Mead", options=options)
    # One restart re-inflates the simplex and polishes shallow convergence.
    res = minimize(nll, res.x, method="Nelder-Mead", options=options)

    start_nll = nll(theta0)
    if not np.isfinite(res.fun) or res.fun > start_nll + 1e-9:
        best = _theta_to_params(theta0 if res.fun > start_nll else res.x, kind)
        raise GarchFitError(
            f"optimizer failed to improve on the start (nll {res.fun:.6f} vs {start_nll:.6f})",
            best_params=best,
            best_loglik=-min(res.fun, start_nll),
        )
    fitted = _theta_to_params(res.x, kind)
    fitted.validate(kind)
    return fitted, float(-res.fun)
