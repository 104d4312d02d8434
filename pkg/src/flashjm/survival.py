"""Class-specific Cox submodel with time-varying association features.

Hazard ``lambda0(t) exp(psi_i(t)' gamma_k)`` with ``lambda0`` a set of point
masses at the failure times. Per-subject functions take a dense association
matrix whose first ``J`` rows are the failure-time grid; the segment helpers
operate on `AssociationSegments` for whole cohorts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, ModelParams, SolverError, SubjectRecord, ValidationError
from .features import AssociationSegments

CLAMP = 30.0


def safe_exp(eta):
    """``exp`` of linear predictors clamped to [-30, 30]."""
    e = np.minimum(eta, CLAMP)
    np.maximum(e, -CLAMP, out=e)
    return np.exp(e, out=e)


def log_hazard(psi_row, k: int, params: ModelParams, tau_index: int) -> float:
    """``log lambda0(tau_j) + psi' gamma_k``."""
    lam = params.lambda0[tau_index]
    if lam <= 0:
        raise SolverError(f"zero baseline mass at failure time index {tau_index}")
    return float(np.log(lam) + np.asarray(psi_row) @ params.gamma[k])


def log_survival(subject_assoc, k: int, params: ModelParams, t: float, failure_times) -> float:
    """``-sum_{tau_j <= t} lambda0(tau_j) exp(psi(tau_j)' gamma_k)``."""
    tau = np.asarray(failure_times, dtype=float)
    J = tau.size
    A = np.asarray(subject_assoc)[:J]
    at = tau <= t
    if not np.any(at):
        return 0.0
    return float(-np.sum(params.lambda0[at] * safe_exp(A[at] @ params.gamma[k])))


def cond_event_logdensity(subject: SubjectRecord, k: int, params: ModelParams, assoc,
                          failure_times) -> float:
    """Log conditional density of ``(T, Delta)`` given class ``k``.

    ``Delta (log lambda0(T) + psi(T)' gamma_k) - sum_{tau_j <= T} lambda0(tau_j)
    exp(psi(tau_j)' gamma_k)``, up to the censoring factor.
    """
    tau = np.asarray(failure_times, dtype=float)
    value = log_survival(assoc, k, params, subject.event_time, tau)
    if subject.event_indicator:
        j = int(np.searchsorted(tau, subject.event_time))
        if j >= tau.size or tau[j] != subject.event_time:
            raise ValidationError(f"subject {subject.id}: event time is not a failure time")
        value += log_hazard(np.asarray(assoc)[j], k, params, j)
    return value


def at_risk_end(T, failure_times) -> np.ndarray:
    """Number of failure times ``<= T_i`` for each subject."""
    return np.searchsorted(np.asarray(failure_times), np.asarray(T), side="right")


def event_index(T, delta, failure_times) -> np.ndarray:
    """Index of ``T_i`` in the failure-time grid, -1 for censored subjects."""
    tau = np.asarray(failure_times)
    T = np.asarray(T, dtype=float)
    idx = np.searchsorted(tau, T)
    idx = np.where(np.asarray(delta, dtype=bool), idx, -1)
    ev = idx >= 0
    if np.any(idx[ev] >= tau.size) or np.any(tau[np.minimum(idx[ev], tau.size - 1)] != T[ev]):
        raise ValidationError("an event time is not on the failure-time grid")
    return idx


def breslow_update(cohort: Cohort, assoc_all, pi_tilde, gamma_all, failure_times=None) -> np.ndarray:
    """Baseline masses ``d_j / sum_i sum_k pi_ik exp(psi_i(tau_j)' gamma_k) 1{T_i >= tau_j}``.

    Parameters
    ----------
    assoc_all : `np.ndarray`, shape=(n, J, L * M)
        Features of every subject on the failure-time grid.
    pi_tilde : `np.ndarray`, shape=(n, K)
    gamma_all : `np.ndarray`, shape=(K, L * M)
    """
    tau = cohort.failure_times if failure_times is None else np.asarray(failure_times)
    T, delta = cohort.T, cohort.delta
    A = np.asarray(assoc_all)[:, :tau.size]
    pi = np.asarray(pi_tilde)
    risk = T[:, None] >= tau[None, :]
    expo = safe_exp(np.einsum("ijd,kd->ijk", A, np.atleast_2d(gamma_all)))
    den = np.einsum("ik,ijk,ij->j", pi, expo, risk)
    if np.any(den <= 0):
        raise SolverError("empty risk set at a failure time")
    d = np.array([np.sum(delta & (T == t)) for t in tau], dtype=float)
    return d / den


def segment_mass(segs: AssociationSegments, lambda0: np.ndarray) -> np.ndarray:
    """Baseline mass covered by each segment."""
    cum = np.concatenate([[0.0], np.cumsum(lambda0)])
    return cum[segs.stop] - cum[segs.start]


def grid_sum(segs: AssociationSegments, weights: np.ndarray) -> np.ndarray:
    """``out[j] = sum of weights[r]`` over segments covering grid index ``j``.

    ``weights`` may carry trailing dimensions.
    """
    w = np.asarray(weights)
    diff = np.zeros((segs.n_grid + 1,) + w.shape[1:])
    np.add.at(diff, segs.start, w)
    np.subtract.at(diff, segs.stop, w)
    return np.cumsum(diff, axis=0)[:-1]


def event_counts(T, delta, failure_times) -> np.ndarray:
    idx = event_index(T, delta, failure_times)
    return np.bincount(idx[idx >= 0], minlength=len(failure_times)).astype(float)


@dataclass
class CoxFit:
    """Result of a Cox partial-likelihood fit.

    Parameters
    ----------
    coef : `np.ndarray`, shape=(d,)
    baseline : `np.ndarray`, shape=(J,)
        Breslow masses at the failure times.
    loglik : `float`
        Partial log-likelihood at ``coef``.
    """

    coef: np.ndarray
    baseline: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    separated: bool


def _cox_terms(segs, T, delta, ev_idx, beta, need_hess=True):
    eta = segs.psi @ beta
    w = safe_exp(eta)
    S0 = grid_sum(segs, w)
    S1 = grid_sum(segs, w[:, None] * segs.psi)
    ev = np.flatnonzero(ev_idx >= 0)
    j = ev_idx[ev]
    z = segs.psi_T[ev]
    if np.any(S0[j] <= 0):
        raise SolverError("empty risk set at a failure time")
    loglik = float(np.sum(z @ beta) - np.sum(np.log(S0[j])))
    mean = S1[j] / S0[j][:, None]
    grad = (z - mean).sum(axis=0)
    hess = None
    if need_hess:
        S2 = grid_sum(segs, w[:, None, None] * segs.psi[:, :, None] * segs.psi[:, None, :])
        hess = -(S2[j] / S0[j][:, None, None]).sum(axis=0) + mean.T @ mean
    return loglik, grad, hess, S0


def cox_fit(segs: AssociationSegments, T, delta, failure_times, max_iter: int = 100,
            tol: float = 1e-6, cap: float = 50.0) -> CoxFit:
    """Newton-Raphson on the Breslow partial likelihood with time-varying covariates.

    Stops when the largest gradient entry falls below ``tol * max(1, |loglik|)``
    and the Newton step is small.
    Coefficients exceeding ``cap`` in magnitude are clipped and flagged as
    separated; so is a fit whose linear predictors reach the clamp of the
    exponential.
    """
    T = np.asarray(T, dtype=float)
    delta = np.asarray(delta, dtype=bool)
    tau = np.asarray(failure_times, dtype=float)
    if not np.any(delta):
        raise ValidationError("Cox fit needs at least one event")
    ev_idx = event_index(T, delta, tau)
    d = segs.psi.shape[1]
    beta = np.zeros(d)
    loglik, grad, hess, S0 = _cox_terms(segs, T, delta, ev_idx, beta)
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        # under separation the gradient vanishes while Newton steps stay large
        if np.max(np.abs(grad), initial=0.0) <= tol * max(1.0, abs(loglik)) and \
                np.max(np.abs(step), initial=0.0) <= 1e-3 * max(1.0, np.max(np.abs(beta))):
            converged = True
            break
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c, g_c, h_c, S0_c = _cox_terms(segs, T, delta, ev_idx, cand)
            if ll_c >= loglik - 1e-12 * abs(loglik) or t < 1e-10:
                break
            t *= 0.5
        beta, loglik, grad, hess, S0 = cand, ll_c, g_c, h_c, S0_c
        if np.max(np.abs(segs.psi @ beta), initial=0.0) >= CLAMP:
            # predictors saturate the exponential clamp: the likelihood keeps
            # improving only by driving coefficients to infinity
            separated = True
            break
        if np.max(np.abs(beta), initial=0.0) > cap:
            beta = np.clip(beta, -cap, cap)
            loglik, grad, hess, S0 = _cox_terms(segs, T, delta, ev_idx, beta)
            separated = True
            break
    if not converged and not separated:
        raise SolverError(f"Cox fit did not converge in {max_iter} iterations")
    counts = np.bincount(ev_idx[ev_idx >= 0], minlength=tau.size).astype(float)
    baseline = counts / S0
    return CoxFit(beta, baseline, loglik, it, converged, separated)


def static_segments(Z, T, failure_times) -> AssociationSegments:
    """Segments for covariates that do not vary over time."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    end = at_risk_end(T, failure_times)
    keep = np.flatnonzero(end > 0)
    return AssociationSegments(keep, np.zeros(keep.size, dtype=int), end[keep], Z[keep],
                               Z.copy(), Z.shape[0], len(failure_times))


def dense_segments(Z_grid, T, delta, failure_times) -> AssociationSegments:
    """Segments from features given on the failure-time grid, shape (n, J, d)."""
    Z = np.asarray(Z_grid, dtype=float)
    if Z.ndim == 2:
        Z = Z[:, :, None]
    n, J, d = Z.shape
    end = at_risk_end(T, failure_times)
    subj, start = [], []
    for i in range(n):
        subj.extend([i] * int(end[i]))
        start.extend(range(int(end[i])))
    subj = np.array(subj, dtype=int)
    start = np.array(start, dtype=int)
    ev = event_index(T, delta, failure_times)
    psi_T = np.zeros((n, d))
    psi_T[ev >= 0] = Z[np.flatnonzero(ev >= 0), ev[ev >= 0]]
    return AssociationSegments(subj, start, start + 1, Z[subj, start], psi_T, n, J)


def univariate_cox_fit(features_on_grid, cohort: Cohort, **kwargs) -> CoxFit:
    """Cox fit of features given on the cohort's failure-time grid."""
    tau = cohort.failure_times
    segs = dense_segments(features_on_grid, cohort.T, cohort.delta, tau)
    return cox_fit(segs, cohort.T, cohort.delta, tau, **kwargs)
