"""Penalized generalized EM for the latent-class joint model.

All cohort quantities that do not depend on the parameters (design
sufficient statistics, compressed association features, event indices) are
collected once in a `FitData`. Coefficients inside the loop act on the
scaled features; `FittedModel` keeps both the working and the
original-scale parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Cohort, ModelParams, SolverError, ValidationError
from .features import AssociationSegments, FeatureCatalog, build_segments, screen
from .longitudinal import LongStats, batch_posterior, long_stats
from .penalties import (PenaltySpec, SolverConfig, box_qn_solve, elastic_net_value,
                        ista_solve, prox_sgl, sgl_value)
from .survival import (at_risk_end, cox_fit, event_counts, event_index, grid_sum, safe_exp,
                       segment_mass, static_segments)

MODEL_FORMAT_VERSION = "1"
PHI_FLOOR = 1e-8
EMPTY_CLASS = 1e-6


@dataclass
class FitConfig:
    """Configuration of one penalized EM fit.

    Parameters
    ----------
    K : `int`
        Number of latent classes.
    alpha : `int`
        Degree of the fixed-effect time polynomial.
    max_iter : `int`
        Maximum number of EM iterations.
    tol : `float`
        Stop when the absolute relative change of the objective is below this.
    zeta1, zeta2 : `float` or sequence
        Penalty strengths, scalar or per class.
    eta, eta_tilde : `float`
        Penalty mixing weights.
    catalog : `FeatureCatalog`
    screen_keep : `int`, optional
        When set, `fit` first keeps this many extractors by screening.
    class_conditional_moments : `bool`
        Fixed effects and noise variances are updated with the random-effect
        moments conditional on each class (exact block maximizers). When
        False the class-averaged moments are used instead.
    """

    K: int = 2
    alpha: int = 1
    max_iter: int = 100
    tol: float = 1e-5
    zeta1: object = 0.1
    zeta2: object = 0.1
    eta: float = 0.1
    eta_tilde: float = 0.9
    catalog: FeatureCatalog = field(default_factory=FeatureCatalog.default)
    screen_keep: int = None
    seed: int = 0
    standardize_x: bool = True
    standardize_features: bool = True
    class_conditional_moments: bool = True
    break_symmetry: bool = True
    mlmm_max_iter: int = 100
    mlmm_tol: float = 1e-6
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")
        if self.alpha < 1:
            raise ValidationError("alpha must be >= 1")
        if not isinstance(self.catalog, FeatureCatalog):
            self.catalog = FeatureCatalog(tuple(self.catalog))
        for name in ("zeta1", "zeta2"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim and v.size != self.K:
                raise ValidationError(f"{name} must be a scalar or have K entries")
        self.penalty(self.catalog.M)

    def penalty(self, M: int) -> PenaltySpec:
        return PenaltySpec(self.zeta1, self.zeta2, self.eta, self.eta_tilde, M)

    def with_zeta(self, zeta: float) -> "FitConfig":
        return replace(self, zeta1=float(zeta), zeta2=float(zeta))

    def to_dict(self) -> dict:
        def enc(v):
            v = np.asarray(v, dtype=float)
            return float(v) if v.ndim == 0 else v.tolist()
        return {
            "K": self.K, "alpha": self.alpha, "max_iter": self.max_iter, "tol": self.tol,
            "zeta1": enc(self.zeta1), "zeta2": enc(self.zeta2), "eta": self.eta,
            "eta_tilde": self.eta_tilde, "catalog": list(self.catalog.names),
            "screen_keep": self.screen_keep, "seed": self.seed,
            "standardize_x": self.standardize_x,
            "standardize_features": self.standardize_features,
            "class_conditional_moments": self.class_conditional_moments,
            "break_symmetry": self.break_symmetry,
            "mlmm_max_iter": self.mlmm_max_iter, "mlmm_tol": self.mlmm_tol,
            "solver": dict(vars(self.solver)),
        }

    @staticmethod
    def from_dict(d: dict) -> "FitConfig":
        d = dict(d)
        known = set(FitConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model settings: {sorted(unknown)}")
        if "catalog" in d:
            d["catalog"] = FeatureCatalog(tuple(d["catalog"]))
        if "solver" in d:
            s = dict(d["solver"])
            bad = set(s) - set(SolverConfig.__dataclass_fields__)
            if bad:
                raise ValidationError(f"unknown solver settings: {sorted(bad)}")
            d["solver"] = SolverConfig(**s)
        return FitConfig(**d)


@dataclass
class FitData:
    """Parameter-free quantities of a cohort, precomputed once per fit."""

    X: np.ndarray
    T: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    ev_idx: np.ndarray
    d_counts: np.ndarray
    long: LongStats
    segs: AssociationSegments
    x_scale: np.ndarray
    psi_scale: np.ndarray
    catalog: FeatureCatalog
    alpha: int
    ids: list

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def L(self):
        return self.long.L


def _x_scale(X):
    sd = X.std(axis=0) if X.shape[0] else np.ones(X.shape[1])
    return np.where(sd > 0, sd, 1.0)


def prepare(cohort: Cohort, catalog: FeatureCatalog, alpha: int = 1, failure_times=None,
            x_scale=None, psi_scale=None, standardize_x: bool = True,
            standardize_features: bool = True) -> FitData:
    """Precompute everything the EM loop needs from a cohort.

    Parameters
    ----------
    failure_times : `np.ndarray`, optional
        Grid of the baseline masses; the cohort's own failure times if None.
    x_scale, psi_scale : `np.ndarray`, optional
        Column scales; estimated from the cohort when standardization is on.
        Columns are divided by their scale but never centered, since a
        centering shift would act as a class-specific intercept.
    """
    tau = cohort.failure_times if failure_times is None else np.asarray(failure_times, float)
    X = cohort.X
    if x_scale is None:
        x_scale = _x_scale(X) if standardize_x else np.ones(X.shape[1])
    T, delta = cohort.T, cohort.delta
    segs = build_segments(cohort.subjects, catalog, tau)
    if psi_scale is None:
        psi_scale = segs.column_scale() if standardize_features else np.ones(segs.psi.shape[1])
    segs = segs.scaled(psi_scale)
    ev = event_index(T, delta, tau)
    d_counts = np.bincount(ev[ev >= 0], minlength=tau.size).astype(float)
    return FitData(X / x_scale, T, delta, tau, ev, d_counts, long_stats(cohort.subjects, alpha),
                   segs, np.asarray(x_scale, float), np.asarray(psi_scale, float), catalog,
                   alpha, cohort.ids)


def subset_data(data: FitData, idx) -> FitData:
    """Rows of a `FitData` for the given subjects, keeping grid and scales.

    The baseline grid is unchanged, so only use this where the selected
    subjects' event times remain valid grid points.
    """
    idx = np.asarray(idx, dtype=int)
    pos = -np.ones(data.n, dtype=int)
    pos[idx] = np.arange(idx.size)
    if np.unique(idx).size != idx.size:
        raise ValidationError("subset_data needs distinct indices")
    keep = pos[data.segs.subject] >= 0
    segs = AssociationSegments(pos[data.segs.subject[keep]], data.segs.start[keep],
                               data.segs.stop[keep], data.segs.psi[keep],
                               data.segs.psi_T[idx], idx.size, data.segs.n_grid)
    ev = data.ev_idx[idx]
    d_counts = np.bincount(ev[ev >= 0], minlength=data.tau.size).astype(float)
    return FitData(data.X[idx], data.T[idx], data.delta[idx], data.tau, ev, d_counts,
                   data.long.subset(idx), segs, data.x_scale, data.psi_scale, data.catalog,
                   data.alpha, [data.ids[i] for i in idx])


@dataclass
class PosteriorStats:
    """E-step moments.

    Parameters
    ----------
    Eb : `np.ndarray`, shape=(n, r)
    Ebb : `np.ndarray`, shape=(n, r, r)
    pi_tilde : `np.ndarray`, shape=(n, K)
    O : `np.ndarray`, shape=(n, K, r)
        Class-conditional posterior means.
    W : `np.ndarray`, shape=(n, r, r)
        Posterior covariance shared by all classes.
    """

    Eb: np.ndarray
    Ebb: np.ndarray
    pi_tilde: np.ndarray
    O: np.ndarray = None
    W: np.ndarray = None


@dataclass
class EStepResult:
    stats: PosteriorStats
    log_joint: np.ndarray
    loglik: np.ndarray
    objective: float


def class_prior(x, xi_all) -> np.ndarray:
    """Softmax of ``x' xi_k`` over classes."""
    a = np.atleast_2d(xi_all) @ np.asarray(x, dtype=float)
    a = a - a.max()
    e = np.exp(a)
    return e / e.sum()


def _row_logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def log_class_prior(X, xi) -> np.ndarray:
    a = X @ xi.T
    return a - _row_logsumexp(a)[:, None]


def survival_loglik(data: FitData, params: ModelParams) -> np.ndarray:
    """``log f(T_i, Delta_i | Y_i, g_i = k)`` for all subjects and classes."""
    segs = data.segs
    n, K = data.n, params.K
    mass = segment_mass(segs, params.lambda0)
    eta = segs.psi @ params.gamma.T
    H = np.zeros((n, K))
    for k in range(K):
        H[:, k] = np.bincount(segs.subject, weights=mass * safe_exp(eta[:, k]), minlength=n)
    ev = data.ev_idx >= 0
    out = -H
    if np.any(ev):
        lam = params.lambda0[data.ev_idx[ev]]
        if np.any(lam <= 0):
            raise SolverError("zero baseline mass at an observed event time")
        out[ev] += np.log(lam)[:, None] + segs.psi_T[ev] @ params.gamma.T
    return out


def penalty_value(params: ModelParams, spec: PenaltySpec) -> float:
    return float(sum(spec.z1(k) * elastic_net_value(params.xi[k], spec)
                     + spec.z2(k) * sgl_value(params.gamma[k], spec)
                     for k in range(params.K)))


def e_step(data: FitData, params: ModelParams, spec: PenaltySpec = None) -> EStepResult:
    """Class posteriors and random-effect moments at ``params``.

    ``objective`` is the penalized normalized negative log-likelihood when
    ``spec`` is given, the unpenalized one otherwise.
    """
    bp = batch_posterior(data.long, params.beta, params.D, params.phi)
    log_joint = log_class_prior(data.X, params.xi) + survival_loglik(data, params) + bp.loglik
    loglik = _row_logsumexp(log_joint)
    if not np.all(np.isfinite(loglik)):
        raise SolverError("all class weights vanish for some subject")
    pi = np.exp(log_joint - loglik[:, None])
    pi /= pi.sum(axis=1, keepdims=True)
    Eb = np.einsum("ik,ikr->ir", pi, bp.O)
    Ebb = bp.W + np.einsum("ik,ikr,iks->irs", pi, bp.O, bp.O)
    obj = -float(np.mean(loglik))
    if spec is not None:
        obj += penalty_value(params, spec)
    return EStepResult(PosteriorStats(Eb, Ebb, pi, bp.O, bp.W), log_joint, loglik, obj)


def penalized_objective(data: FitData, params: ModelParams, spec: PenaltySpec) -> float:
    """``-n^-1 sum_i log sum_k f(g=k) f(T, Delta | Y, k) f(Y | k)`` plus penalties."""
    return e_step(data, params, spec).objective


def m_update_D(stats: PosteriorStats) -> np.ndarray:
    D = stats.Ebb.mean(axis=0)
    return 0.5 * (D + D.T)


def xi_block_objective(data: FitData, stats: PosteriorStats, k: int, xi_all: np.ndarray):
    """Value and gradient of the class-``k`` logit loss with other classes fixed."""
    X, pik = data.X, stats.pi_tilde[:, k]
    n = X.shape[0]
    others = np.delete(np.arange(xi_all.shape[0]), k)
    # log-sum-exp of the other classes' logits, fixed within the block
    rest = _row_logsumexp(X @ xi_all[others].T) if others.size else np.full(n, -np.inf)
    cache = {}

    def terms(xk):
        key = xk.tobytes()
        if cache.get("key") != key:
            a = X @ xk
            cache["key"] = key
            cache["v"] = (a, np.logaddexp(a, rest))
        return cache["v"]

    def value(xk):
        a, lse = terms(xk)
        return -float(pik @ a - lse.sum()) / n

    def grad(xk):
        a, lse = terms(xk)
        return -X.T @ (pik - np.exp(a - lse)) / n

    return value, grad


def m_update_xi(data: FitData, stats: PosteriorStats, k: int, xi_all: np.ndarray,
                spec: PenaltySpec, solver: SolverConfig = None, fixed_zero=None):
    """Elastic-net logit update of class ``k`` via the positive/negative split.

    Returns the new coefficients and whether the quasi-Newton solver
    reported convergence. The current value is kept if the solver result
    does not decrease the block objective.
    """
    p = xi_all.shape[1]
    z1, eta = spec.z1(k), spec.eta
    f, g = xi_block_objective(data, stats, k, xi_all)

    def split_value(z):
        x = z[:p] - z[p:]
        return f(x) + z1 * ((1 - eta) * z.sum() + 0.5 * eta * (x @ x))

    def split_grad(z):
        x = z[:p] - z[p:]
        gx = g(x) + z1 * eta * x
        return np.concatenate([gx + z1 * (1 - eta), -gx + z1 * (1 - eta)])

    x0 = xi_all[k].copy()
    if fixed_zero is not None:
        x0[fixed_zero] = 0.0
    res = box_qn_solve(split_value, split_grad, p, x0, solver, fixed_zero=fixed_zero)
    old = f(xi_all[k]) + z1 * elastic_net_value(xi_all[k], spec)
    new = f(res.x) + z1 * elastic_net_value(res.x, spec)
    if new <= old or (fixed_zero is not None and np.any(xi_all[k][fixed_zero])):
        return res.x, res.converged
    return xi_all[k].copy(), res.converged


def m_update_beta(data: FitData, stats: PosteriorStats, k: int,
                  class_conditional: bool = True) -> np.ndarray:
    """Weighted least-squares fixed-effect update of class ``k``."""
    st = data.long
    L, a = st.L, st.a
    w = stats.pi_tilde[:, k]
    Eb = stats.O[:, k] if class_conditional else stats.Eb
    Eb = Eb.reshape(-1, L, 2)
    beta = np.zeros((L, a))
    for ell in range(L):
        A = np.einsum("i,iab->ab", w, st.UtU[:, ell])
        rhs = np.einsum("i,ia->a", w, st.UtY[:, ell] - np.einsum("iab,ib->ia",
                                                                 st.UtV[:, ell], Eb[:, ell]))
        beta[ell] = _spd_solve(A, rhs)
    return beta.reshape(-1)


def _spd_solve(A, b):
    if not np.any(A):
        return np.zeros_like(b)
    try:
        c = np.linalg.cholesky(A)
        return np.linalg.solve(c.T, np.linalg.solve(c, b))
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def gamma_block_objective(data: FitData, stats: PosteriorStats, k: int, lambda0: np.ndarray):
    """Value and gradient of the class-``k`` survival loss in ``gamma``."""
    segs = data.segs
    n = data.n
    w = stats.pi_tilde[:, k]
    lin = segs.psi_T.T @ (w * data.delta)
    c = w[segs.subject] * segment_mass(segs, lambda0)
    keep = c > 0
    Psi, c = segs.psi[keep], c[keep]
    PsiT = np.ascontiguousarray(Psi.T)
    cache = {}

    def weights(g):
        # the line search evaluates a point before its gradient; reuse it
        key = g.tobytes()
        if cache.get("key") != key:
            cache["key"] = key
            cache["w"] = c * safe_exp(Psi @ g)
        return cache["w"]

    def value(g):
        return -float(lin @ g - weights(g).sum()) / n

    def grad(g):
        return -(lin - PsiT @ weights(g)) / n

    return value, grad


def m_update_gamma(data: FitData, stats: PosteriorStats, k: int, params: ModelParams,
                   spec: PenaltySpec, solver: SolverConfig = None, fixed_zero=None):
    """Sparse-group-lasso update of the class-``k`` association coefficients by ISTA."""
    f, g = gamma_block_objective(data, stats, k, params.lambda0)
    z2 = spec.z2(k)
    if fixed_zero is None:
        prox = lambda v, s: prox_sgl(v, s, spec, k)
    else:
        def prox(v, s):
            out = prox_sgl(v, s, spec, k)
            out[fixed_zero] = 0.0
            return out
    x0 = params.gamma[k].copy()
    if fixed_zero is not None:
        x0[fixed_zero] = 0.0
    res = ista_solve(f, g, prox, x0, solver, penalty_value=lambda v: z2 * sgl_value(v, spec))
    old = f(params.gamma[k]) + z2 * sgl_value(params.gamma[k], spec)
    if res.objective <= old or (fixed_zero is not None and np.any(params.gamma[k][fixed_zero])):
        return res.x, res.converged
    return params.gamma[k].copy(), res.converged


def m_update_lambda0(data: FitData, stats: PosteriorStats, gamma: np.ndarray):
    """Breslow-type baseline masses; returns masses and the risk denominators."""
    segs = data.segs
    w = np.sum(stats.pi_tilde[segs.subject] * safe_exp(segs.psi @ gamma.T), axis=1)
    den = grid_sum(segs, w)
    if np.any(den[data.d_counts > 0] <= 0):
        raise SolverError("empty risk set at a failure time")
    lam = np.divide(data.d_counts, den, out=np.zeros_like(den), where=den > 0)
    return lam, den


def m_update_phi(data: FitData, stats: PosteriorStats, params_new: ModelParams, ell: int,
                 class_conditional: bool = True):
    """Noise variance of marker ``ell``, or None if the marker is never observed."""
    st = data.long
    N = st.count[:, ell].sum()
    if N <= 0:
        return None
    K, L, a = params_new.K, st.L, st.a
    B = params_new.beta.reshape(K, L, a)[:, ell]            # (K, a)
    sl = slice(2 * ell, 2 * ell + 2)
    if class_conditional:
        Ob = stats.O[:, :, sl]                              # (n, K, 2)
        Obb = stats.W[:, None, sl, sl] + Ob[..., :, None] * Ob[..., None, :]
    else:
        Ob = np.broadcast_to(stats.Eb[:, None, sl], (st.n, K, 2))
        Obb = np.broadcast_to(stats.Ebb[:, None, sl, sl], (st.n, K, 2, 2))
    rr = (st.YtY[:, ell][:, None] - 2.0 * st.UtY[:, ell] @ B.T
          + np.einsum("ka,iab,kb->ik", B, st.UtU[:, ell], B))
    rv = st.VtY[:, ell][:, None, :] - np.einsum("iab,ka->ikb", st.UtV[:, ell], B)
    cross = np.einsum("ikb,ikb->ik", rv, Ob)
    tr = np.einsum("ibc,ikcb->ik", st.VtV[:, ell], Obb)
    total = np.sum(stats.pi_tilde * (rr - 2.0 * cross + tr))
    return max(float(total / N), PHI_FLOOR)


@dataclass
class MLMMResult:
    beta: np.ndarray
    D: np.ndarray
    phi: np.ndarray
    trace: list
    n_iter: int
    converged: bool


def _lmm_step(st: LongStats, beta, D, phi):
    bp = batch_posterior(st, beta[None], D, phi)
    ll = float(bp.loglik.sum())
    O, W = bp.O[:, 0], bp.W
    stats = PosteriorStats(O, W + O[:, :, None] * O[:, None, :], np.ones((st.n, 1)), bp.O, W)
    return ll, stats


def mlmm_em(st: LongStats, beta0=None, D0=None, phi0=None, max_iter: int = 100,
            tol: float = 1e-6) -> MLMMResult:
    """Single-class multivariate mixed-model EM on sufficient statistics.

    Without starting values, each marker is first fitted alone from an
    ordinary least-squares start, and the joint EM starts from the
    block-diagonal combination of those fits.
    """
    L, a = st.L, st.a
    observed = st.count.sum(axis=0) > 0
    if beta0 is None:
        beta0 = np.zeros(L * a)
        D0 = np.eye(2 * L)
        phi0 = np.ones(L)
        for ell in range(L):
            if not observed[ell]:
                continue
            sub = st.marker(ell)
            b, Dl, pl = _ols_start(sub)
            r = mlmm_em(sub, b, Dl, pl, max_iter=max_iter, tol=tol)
            beta0[ell * a:(ell + 1) * a] = r.beta
            D0[2 * ell:2 * ell + 2, 2 * ell:2 * ell + 2] = r.D
            phi0[ell] = r.phi[0]
    beta, D, phi = np.array(beta0, float), np.array(D0, float), np.array(phi0, float)
    ll, stats = _lmm_step(st, beta, D, phi)
    trace = [ll]
    data = _LongOnly(st)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        D = m_update_D(stats)
        for ell in range(L):
            if not observed[ell]:
                D[2 * ell:2 * ell + 2, :] = 0.0
                D[:, 2 * ell:2 * ell + 2] = 0.0
                D[2 * ell:2 * ell + 2, 2 * ell:2 * ell + 2] = np.eye(2)
        beta = m_update_beta(data, stats, 0)
        new = ModelParams(np.zeros((1, 0)), beta[None], phi, D, np.zeros(0), np.zeros((1, L)))
        for ell in range(L):
            v = m_update_phi(data, stats, new, ell)
            if v is not None:
                phi[ell] = v
        ll_new, stats = _lmm_step(st, beta, D, phi)
        trace.append(ll_new)
        change = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ll = ll_new
        if change < tol:
            converged = True
            break
    return MLMMResult(beta, D, phi, trace, it, converged)


@dataclass
class _LongOnly:
    long: LongStats


def _ols_start(st: LongStats):
    A = st.UtU.sum(axis=(0, 1))
    b = _spd_solve(A, st.UtY.sum(axis=(0, 1)))
    N = st.count.sum()
    rss = st.YtY.sum() - 2 * b @ st.UtY.sum(axis=(0, 1)) + b @ A @ b
    s2 = max(rss / max(N, 1), 1e-6)
    # spread of observation times fixes the scale of the slope variance
    m1 = st.VtV[:, 0, 0, 1].sum() / max(N, 1)
    m2 = st.VtV[:, 0, 1, 1].sum() / max(N, 1)
    vt = max(m2 - m1 * m1, 1e-6)
    return b, 0.5 * s2 * np.diag([1.0, 1.0 / vt]), np.array([0.5 * s2])


def init_params(data: FitData, config: FitConfig):
    """Starting point: zero logits, constant small association coefficients,
    a static Cox baseline and mixed-model estimates shared by all classes.

    Returns the parameters and the static Cox coefficients.
    """
    K, L, M = config.K, data.L, data.catalog.M
    p = data.X.shape[1]
    if data.tau.size == 0:
        raise ValidationError("cohort has no events")
    try:
        cox = cox_fit(static_segments(data.X, data.T, data.tau), data.T, data.delta, data.tau)
    except SolverError as exc:
        raise SolverError(f"initial Cox fit failed: {exc}") from None
    mm = mlmm_em(data.long, max_iter=config.mlmm_max_iter, tol=config.mlmm_tol)
    params = ModelParams(np.zeros((K, p)), np.tile(mm.beta, (K, 1)), mm.phi, mm.D,
                         cox.baseline, np.full((K, L * M), 0.01))
    return params, cox.coef


def break_symmetry(data: FitData, params: ModelParams, score: np.ndarray,
                   max_iter: int = 25, tol: float = 1e-6) -> ModelParams:
    """Class-specific fixed effects from a quantile split of a risk score.

    With identical starting parameters every class receives the same
    posterior weight and EM cannot separate them. Subjects are split into
    ``K`` groups by increasing ``score`` and a mixed model is fitted on each
    group from the pooled estimates for at most ``max_iter`` iterations; its
    fixed effects start class ``k``, so class ``K - 1`` starts as the
    high-score group. The random-effect covariance and noise variances stay
    pooled.
    """
    K = params.K
    if K == 1:
        return params
    order = np.argsort(score, kind="stable")
    groups = np.empty(data.n, dtype=int)
    groups[order] = np.minimum((np.arange(data.n) * K) // max(data.n, 1), K - 1)
    out = params.copy()
    for k in range(K):
        idx = np.flatnonzero(groups == k)
        if idx.size == 0:
            continue
        r = mlmm_em(data.long.subset(idx), params.beta[k], params.D, params.phi,
                    max_iter=max_iter, tol=tol)
        out.beta[k] = r.beta
    return out


def initialize(data: FitData, config: FitConfig) -> ModelParams:
    params, cox_coef = init_params(data, config)
    if config.break_symmetry:
        params = break_symmetry(data, params, data.X @ cox_coef, tol=config.mlmm_tol)
    return params


@dataclass
class RunResult:
    params: ModelParams
    estep: EStepResult
    trace: list
    n_iter: int
    converged: bool
    flags: list
    balance: list


def run_em(data: FitData, params0: ModelParams, config: FitConfig, support=None,
           callback=None) -> RunResult:
    """EM iterations from ``params0``.

    Update order within an iteration: D, logits, fixed effects, association
    coefficients, baseline, noise variances. ``support``, if given, is a pair
    of boolean masks ``(xi_mask, gamma_mask)`` of shapes (K, p), (K, L*M);
    coefficients outside the masks are held at zero.
    """
    spec = config.penalty(data.catalog.M)
    solver = config.solver
    cc = config.class_conditional_moments
    K = params0.K
    params = params0.copy()
    if support is not None:
        xi_mask, gamma_mask = support
        params.xi[~xi_mask] = 0.0
        params.gamma[~gamma_mask] = 0.0
    es = e_step(data, params, spec)
    trace = [es.objective]
    flags = []
    balance = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        stats = es.stats
        new = params.copy()
        new.D = m_update_D(stats)
        for k in range(K):
            fz = None if support is None else ~support[0][k]
            new.xi[k], ok = m_update_xi(data, stats, k, new.xi, spec, solver, fz)
            if not ok:
                flags.append(f"iter {it}: logit solver stopped early for class {k}")
        empty = stats.pi_tilde.max(axis=0) < EMPTY_CLASS
        for k in range(K):
            if empty[k]:
                flags.append(f"iter {it}: class {k} is empty; fixed effects and association frozen")
                continue
            new.beta[k] = m_update_beta(data, stats, k, cc)
        for k in range(K):
            if empty[k]:
                continue
            fz = None if support is None else ~support[1][k]
            new.gamma[k], ok = m_update_gamma(data, stats, k, new, spec, solver, fz)
            if not ok:
                flags.append(f"iter {it}: association solver hit its iteration cap for class {k}")
        new.lambda0, den = m_update_lambda0(data, stats, new.gamma)
        balance.append((float(data.d_counts.sum()), float(new.lambda0 @ den)))
        for ell in range(data.L):
            v = m_update_phi(data, stats, new, ell, cc)
            if v is None:
                if it == 1:
                    flags.append(f"marker {ell} is never observed; noise variance kept")
                continue
            new.phi[ell] = v
        try:
            es_new = e_step(data, new, spec)
        except SolverError as exc:
            raise SolverError(f"iteration {it}: {exc}",
                              state=RunResult(params, es, trace, it - 1, False, flags,
                                              balance)) from None
        trace.append(es_new.objective)
        change = abs(es_new.objective - es.objective) / max(abs(es.objective), 1e-300)
        params, es = new, es_new
        if callback is not None:
            callback(it, params, es)
        if change < config.tol:
            converged = True
            break
    return RunResult(params, es, trace, it, converged, flags, balance)


def high_risk_class(data: FitData, params: ModelParams) -> int:
    """Class with the largest mean association predictor over observed events."""
    ev = data.delta
    if not np.any(ev):
        return params.K - 1
    means = (data.segs.psi_T[ev] @ params.gamma.T).mean(axis=0)
    best = np.flatnonzero(means == means.max())
    return int(best[-1])


def risk_order(data: FitData, params: ModelParams) -> list:
    """Classes sorted from lowest to highest mean association predictor."""
    ev = data.delta
    if not np.any(ev):
        return list(range(params.K))
    means = (data.segs.psi_T[ev] @ params.gamma.T).mean(axis=0)
    return [int(k) for k in np.argsort(means, kind="stable")]


def to_original_scale(params: ModelParams, x_scale, psi_scale) -> ModelParams:
    out = params.copy()
    out.xi = params.xi / x_scale[None, :]
    out.gamma = params.gamma / psi_scale[None, :]
    return out


@dataclass
class FittedModel:
    """Output of `fit`.

    ``params`` are on the original feature scales; ``working_params`` act on
    the scaled features used inside the fit (divide by ``x_scale`` and
    ``psi_scale``).
    """

    params: ModelParams
    working_params: ModelParams
    config: FitConfig
    catalog: FeatureCatalog
    trace: list
    posterior: PosteriorStats
    failure_times: np.ndarray
    x_scale: np.ndarray
    psi_scale: np.ndarray
    marker_names: tuple
    feature_names: tuple
    subject_ids: list
    high_risk: int
    n_iter: int
    converged: bool
    flags: list = field(default_factory=list)

    def xi_support(self, tol: float = 0.0) -> np.ndarray:
        """Feature indices with a nonzero logit coefficient in any class."""
        return np.flatnonzero(np.any(np.abs(self.params.xi) > tol, axis=0))

    def gamma_blocks(self) -> np.ndarray:
        """Euclidean norm of each class's per-marker block, shape (K, L)."""
        L = len(self.marker_names)
        return np.sqrt((self.params.gamma.reshape(self.params.K, L, -1) ** 2).sum(axis=2))

    def to_dict(self) -> dict:
        post = {"pi_tilde": self.posterior.pi_tilde.tolist(),
                "Eb": self.posterior.Eb.tolist()}
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "params": self.params.to_dict(),
            "working_params": self.working_params.to_dict(),
            "config": self.config.to_dict(),
            "catalog": list(self.catalog.names),
            "trace": [float(v) for v in self.trace],
            "posterior": post,
            "failure_times": self.failure_times.tolist(),
            "x_scale": self.x_scale.tolist(),
            "psi_scale": self.psi_scale.tolist(),
            "marker_names": list(self.marker_names),
            "feature_names": list(self.feature_names),
            "subject_ids": list(self.subject_ids),
            "high_risk_class": self.high_risk,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "flags": list(self.flags),
        }

    @staticmethod
    def from_dict(d: dict) -> "FittedModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValidationError(f"unsupported model format {d.get('format_version')!r}")
        post = d["posterior"]
        return FittedModel(
            params=ModelParams.from_dict(d["params"]),
            working_params=ModelParams.from_dict(d["working_params"]),
            config=FitConfig.from_dict(d["config"]),
            catalog=FeatureCatalog(tuple(d["catalog"])),
            trace=list(d["trace"]),
            posterior=PosteriorStats(np.array(post["Eb"], float), None,
                                     np.array(post["pi_tilde"], float)),
            failure_times=np.array(d["failure_times"], float),
            x_scale=np.array(d["x_scale"], float),
            psi_scale=np.array(d["psi_scale"], float),
            marker_names=tuple(d["marker_names"]),
            feature_names=tuple(d["feature_names"]),
            subject_ids=list(d["subject_ids"]),
            high_risk=int(d["high_risk_class"]),
            n_iter=int(d["n_iter"]),
            converged=bool(d["converged"]),
            flags=list(d["flags"]),
        )


def model_from_run(cohort: Cohort, data: FitData, config: FitConfig, run: RunResult) -> FittedModel:
    return FittedModel(
        params=to_original_scale(run.params, data.x_scale, data.psi_scale),
        working_params=run.params,
        config=config,
        catalog=data.catalog,
        trace=run.trace,
        posterior=run.estep.stats,
        failure_times=data.tau,
        x_scale=data.x_scale,
        psi_scale=data.psi_scale,
        marker_names=cohort.marker_names,
        feature_names=cohort.feature_names,
        subject_ids=data.ids,
        high_risk=high_risk_class(data, run.params),
        n_iter=run.n_iter,
        converged=run.converged,
        flags=run.flags,
    )


def fit(cohort: Cohort, config: FitConfig, init: ModelParams = None, support=None) -> FittedModel:
    """Screen (optionally), initialize and run the penalized EM on a cohort."""
    catalog = config.catalog
    if config.screen_keep is not None:
        catalog = screen(cohort, catalog, config.screen_keep)
        config = replace(config, catalog=catalog, screen_keep=None)
    data = prepare(cohort, catalog, config.alpha, standardize_x=config.standardize_x,
                   standardize_features=config.standardize_features)
    params0 = initialize(data, config) if init is None else init
    run = run_em(data, params0, config, support)
    return model_from_run(cohort, data, config, run)
