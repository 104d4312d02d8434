"""Synthetic two-class cohorts with sparse signals in every submodel."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .data import Cohort, MarkerSeries, SubjectRecord, ValidationError

LOW_RISK, HIGH_RISK = 0, 1


def toeplitz(rho: float, d: int) -> np.ndarray:
    """Correlation matrix with entries ``rho ** |j - j'|``."""
    idx = np.arange(d)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


@dataclass
class SimConfig:
    """Generator settings; defaults give the reference two-class design.

    Parameters
    ----------
    high_risk_count : `int`
        Number of subjects whose static features are centered at ``-mu``.
    active_set_size : `int`
        Number of markers carrying signal in each class.
    mu1, mu2 : `tuple`
        Means of the low- and high-risk fixed effects (intercept, slope).
    nu : `float`
        Value of the active class-membership coefficients.
    nu1, nu2 : `float`
        Association strengths of the low- and high-risk classes.
    censor_rate : `float`
        Target fraction of censored subjects.
    p_active : `int`
        Number of active class-membership coefficients.
    link : `str`
        ``"logit"`` or ``"probit"``.
    """

    n: int = 500
    L: int = 5
    p: int = 10
    high_risk_count: int = 200
    active_set_size: int = 2
    rho1: float = 0.5
    rho2: float = 0.01
    rho3: float = 0.01
    mu: float = 1.0
    mu1: tuple = (-0.6, 0.1)
    mu2: tuple = (0.05, 0.2)
    sigma_sq: float = 0.25
    kappa1: float = 0.05
    kappa2: float = 0.1
    nu: float = 0.2
    nu1: float = 0.1
    nu2: float = 0.4
    censor_rate: float = 0.3
    p_active: int = 5
    link: str = "logit"
    max_obs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.mu1, self.mu2 = tuple(map(float, self.mu1)), tuple(map(float, self.mu2))
        if self.n < 1 or self.L < 1 or self.p < 0:
            raise ValidationError("n and L must be >= 1 and p >= 0")
        if not 0 <= self.high_risk_count <= self.n:
            raise ValidationError("high_risk_count must lie in [0, n]")
        if not 0 <= self.active_set_size <= self.L:
            raise ValidationError("active_set_size must lie in [0, L]")
        if not 0 <= self.p_active <= self.p:
            raise ValidationError("p_active must lie in [0, p]")
        for name in ("rho1", "rho2", "rho3"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in [0, 1)")
        if self.kappa1 <= 0:
            raise ValidationError("kappa1 must be > 0")
        if not 0 <= self.censor_rate <= 1:
            raise ValidationError("censor_rate must lie in [0, 1]")
        if self.sigma_sq < 0:
            raise ValidationError("sigma_sq must be >= 0")
        if self.link not in ("logit", "probit"):
            raise ValidationError("link must be 'logit' or 'probit'")
        if self.max_obs < 1:
            raise ValidationError("max_obs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu1"], d["mu2"] = list(self.mu1), list(self.mu2)
        return d


@dataclass
class GroundTruth:
    """Generating values of a simulated cohort; classes are 0 (low) and 1 (high risk)."""

    g: np.ndarray
    xi: np.ndarray
    active_sets: list
    beta: np.ndarray
    b: np.ndarray
    T_star: np.ndarray
    C: np.ndarray
    alpha_c: float
    censor_rate: float
    censor_target_reached: bool
    truncated_draws: int
    high_risk_subjects: list = field(default_factory=list)

    @property
    def xi_support(self) -> np.ndarray:
        return np.flatnonzero(self.xi != 0)

    def to_dict(self) -> dict:
        return {
            "g": self.g.tolist(), "xi": self.xi.tolist(),
            "xi_support": self.xi_support.tolist(),
            "active_sets": [list(map(int, s)) for s in self.active_sets],
            "beta": self.beta.tolist(), "b": self.b.tolist(),
            "T_star": self.T_star.tolist(), "C": self.C.tolist(),
            "alpha_c": self.alpha_c, "censor_rate": self.censor_rate,
            "censor_target_reached": self.censor_target_reached,
            "truncated_draws": self.truncated_draws,
            "high_risk_subjects": self.high_risk_subjects,
            "class_labels": {"low_risk": LOW_RISK, "high_risk": HIGH_RISK},
        }


def geometric_from_uniform(v: np.ndarray, alpha: float) -> np.ndarray:
    """Geometric draws on {1, 2, ...} with success probability ``alpha`` by inversion."""
    c = np.ceil(np.log(v) / np.log1p(-alpha))
    return np.maximum(c, 1.0)


def tune_censoring(T_star, target: float, uniforms=None, alpha_range=(1e-6, 1 - 1e-6),
                   tol: float = 0.01, max_iter: int = 50, seed: int = 0):
    """Bisection on the geometric parameter to reach a censoring fraction.

    Censoring times are ``geometric_from_uniform(uniforms, alpha)`` so the
    censored fraction ``mean(C < T_star)`` is non-decreasing in ``alpha``.

    Returns
    -------
    alpha : `float`
    rate : `float`
        Realized censored fraction at ``alpha``.
    reached : `bool`
        False when the target lies outside the range; ``alpha`` is then the
        nearest boundary.
    """
    T_star = np.asarray(T_star, dtype=float)
    if uniforms is None:
        uniforms = np.random.default_rng(seed).random(T_star.size)
    uniforms = np.clip(np.asarray(uniforms, dtype=float), 1e-300, 1.0)

    def rate(a):
        return float(np.mean(geometric_from_uniform(uniforms, a) < T_star))

    lo, hi = alpha_range
    r_lo, r_hi = rate(lo), rate(hi)
    if abs(r_lo - target) < tol or target <= r_lo:
        return lo, r_lo, abs(r_lo - target) < tol
    if abs(r_hi - target) < tol:
        return hi, r_hi, True
    if target > r_hi:
        return hi, r_hi, False
    mid, r_mid = lo, r_lo
    for _ in range(max_iter):
        # bisect on the log scale of the mean censoring time
        mid = math.exp(0.5 * (math.log(lo) + math.log(hi)))
        r_mid = rate(mid)
        if abs(r_mid - target) < tol:
            return mid, r_mid, True
        if r_mid < target:
            lo = mid
        else:
            hi = mid
    return mid, r_mid, abs(r_mid - target) < tol


def gompertz_inverse(u, iota1, iota2, kappa1, kappa2):
    """Event times of hazard ``kappa1 kappa2 exp(iota1 + (iota2 + kappa2) t)`` at uniforms ``u``.

    Entries whose inversion has no solution (finite total hazard) are NaN.
    """
    a = iota2 + kappa2
    c = kappa1 * kappa2 * np.exp(iota1)
    logu = np.log(u)
    out = np.full(np.shape(u), np.nan)
    zero = a == 0
    out[zero] = -logu[zero] / c[zero]
    nz = ~zero
    arg = 1.0 - a[nz] * logu[nz] / c[nz]
    ok = arg > 0
    vals = np.full(arg.shape, np.nan)
    vals[ok] = np.log(arg[ok]) / a[nz][ok]
    out[nz] = vals
    return out


def simulate(config: SimConfig):
    """Draw a cohort and its generating values.

    Returns
    -------
    cohort : `Cohort`
    truth : `GroundTruth`
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, L, p = cfg.n, cfg.L, cfg.p
    in_H = np.zeros(n, dtype=bool)
    in_H[rng.choice(n, cfg.high_risk_count, replace=False)] = True
    mean = np.where(in_H[:, None], -cfg.mu, cfg.mu) * np.ones((n, p))
    X = mean + rng.standard_normal((n, p)) @ np.linalg.cholesky(toeplitz(cfg.rho1, p)).T \
        if p else np.zeros((n, 0))
    xi = np.zeros(p)
    xi[:cfg.p_active] = cfg.nu
    lin = X @ xi
    prob = expit(lin) if cfg.link == "logit" else ndtr(lin)
    # a success of the membership draw is the low-risk profile
    success = rng.random(n) < prob
    g = np.where(success, LOW_RISK, HIGH_RISK)

    active_sets = [np.sort(rng.choice(L, cfg.active_set_size, replace=False)) for _ in range(2)]
    mus = (np.array(cfg.mu1), np.array(cfg.mu2))
    beta = np.stack([mus[k][None, :] + math.sqrt(cfg.rho3) * rng.standard_normal((L, 2))
                     for k in range(2)])
    r = 2 * L
    b = rng.standard_normal((n, r)) @ np.linalg.cholesky(toeplitz(cfg.rho2, r)).T
    b3 = b.reshape(n, L, 2)
    nus = (cfg.nu1, cfg.nu2)
    active = np.zeros((2, L), dtype=bool)
    for k in range(2):
        active[k, active_sets[k]] = True

    act_i = active[g]                                        # (n, L)
    nu_i = np.array(nus)[g]
    bet_i = beta[g]                                          # (n, L, 2)
    iota1 = nu_i * np.sum(act_i * (bet_i[:, :, 0] + 2 * b3[:, :, 0] + b3[:, :, 1]), axis=1)
    iota2 = nu_i * np.sum(act_i * (bet_i[:, :, 1] + b3[:, :, 1]), axis=1)
    U = rng.random(n)
    T_star = gompertz_inverse(U, iota1, iota2, cfg.kappa1, cfg.kappa2)
    bad = ~np.isfinite(T_star)
    truncated = int(bad.sum())
    if truncated:
        # condition on an event: uniforms restricted to (exp(-H_inf), 1)
        a = iota2[bad] + cfg.kappa2
        H_inf = cfg.kappa1 * cfg.kappa2 * np.exp(iota1[bad]) / (-a)
        lo = -np.expm1(-H_inf)
        V = rng.random(truncated)
        U_new = 1.0 - V * lo
        T_star[bad] = gompertz_inverse(U_new, iota1[bad], iota2[bad], cfg.kappa1, cfg.kappa2)
        still = ~np.isfinite(T_star)
        T_star[still] = np.finfo(float).max
    V_c = rng.random(n)
    alpha_c, rate, reached = tune_censoring(T_star, cfg.censor_rate, V_c)
    C = geometric_from_uniform(np.clip(V_c, 1e-300, 1.0), alpha_c)
    delta = T_star <= C
    T = np.where(delta, T_star, C)

    counts = rng.integers(1, cfg.max_obs + 1, size=n)
    subjects = []
    for i in range(n):
        times = np.sort(rng.uniform(0.0, T[i], size=counts[i]))
        times = np.unique(times)
        noise = math.sqrt(cfg.sigma_sq) * rng.standard_normal((L, times.size))
        series = []
        for ell in range(L):
            y = noise[ell].copy()
            if act_i[i, ell]:
                y += (bet_i[i, ell, 0] + b3[i, ell, 0]) + (bet_i[i, ell, 1] + b3[i, ell, 1]) * times
            series.append(MarkerSeries(times, y))
        subjects.append(SubjectRecord(str(i), X[i], tuple(series), float(T[i]), bool(delta[i])))
    cohort = Cohort(tuple(subjects), tuple(f"marker_{l}" for l in range(L)),
                    tuple(f"x_{j}" for j in range(p)))
    truth = GroundTruth(g, xi, [list(s) for s in active_sets], beta, b, T_star, C,
                        float(alpha_c), float(rate), bool(reached), truncated,
                        np.flatnonzero(in_H).tolist())
    return cohort, truth
