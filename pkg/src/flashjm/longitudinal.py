"""Gaussian linear mixed submodel: densities and random-effect posteriors.

The per-subject functions follow the dense matrix formulas directly. The
``Batch*`` helpers evaluate the same quantities for a whole cohort from
per-marker sufficient statistics and are what the EM engine uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import ModelParams, SolverError, SubjectRecord, build_designs

JITTER = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PosteriorB:
    """Gaussian posterior of one subject's random effects.

    Parameters
    ----------
    O : `np.ndarray`, shape=(r,)
        Posterior mean given the class.
    W : `np.ndarray`, shape=(r, r)
        Posterior covariance, shared across classes.
    """

    O: np.ndarray
    W: np.ndarray


def jittered(A: np.ndarray) -> np.ndarray:
    """``A + 1e-8 * (trace(A) / dim) * I``."""
    d = A.shape[0]
    if d == 0:
        return A
    return A + JITTER * (np.trace(A) / d) * np.eye(d)


def sigma_diag(subject: SubjectRecord, phi) -> np.ndarray:
    """Diagonal noise covariance with ``phi[l]`` repeated per observation."""
    phi = np.asarray(phi, dtype=float)
    diag = np.concatenate([np.full(len(m), phi[ell]) for ell, m in enumerate(subject.markers)]) \
        if subject.markers else np.zeros(0)
    return np.diag(diag)


def _chol(A, what):
    try:
        return cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise SolverError(f"{what} is not positive definite after jitter") from None


def marginal_loglik_Y(subject: SubjectRecord, k: int, params: ModelParams,
                      alpha: int = 1) -> float:
    """Log-density of the marker observations given class ``k``.

    ``Y | g = k ~ N(U beta_k, V D V' + Sigma)``; 0 for a subject without
    observations.
    """
    des = build_designs(subject, alpha)
    n_i = des.y.size
    if n_i == 0:
        return 0.0
    Dj = jittered(params.D)
    cov = des.V @ Dj @ des.V.T + sigma_diag(subject, params.phi)
    cov = jittered(cov)
    c = _chol(cov, "marginal covariance")
    resid = des.y - des.U @ params.beta[k]
    quad = resid @ cho_solve(c, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (n_i * LOG_2PI + logdet + quad))


def posterior_b(subject: SubjectRecord, k: int, params: ModelParams,
                alpha: int = 1) -> PosteriorB:
    """Posterior of the random effects given the observations and class ``k``."""
    des = build_designs(subject, alpha)
    Dj = jittered(params.D)
    cD = _chol(Dj, "D")
    Dinv = cho_solve(cD, np.eye(Dj.shape[0]))
    if des.y.size == 0:
        return PosteriorB(np.zeros(Dj.shape[0]), Dj.copy())
    sinv = 1.0 / np.diag(sigma_diag(subject, params.phi))
    P = des.V.T @ (sinv[:, None] * des.V) + Dinv
    cP = _chol(P, "posterior precision")
    W = cho_solve(cP, np.eye(P.shape[0]))
    W = 0.5 * (W + W.T)
    O = W @ (des.V.T @ (sinv * (des.y - des.U @ params.beta[k])))
    return PosteriorB(O, W)


@dataclass
class LongStats:
    """Per-subject, per-marker sufficient statistics of the mixed model.

    Shapes use ``n`` subjects, ``L`` markers, ``a = alpha + 1``.
    """

    count: np.ndarray  # (n, L)
    UtU: np.ndarray    # (n, L, a, a)
    UtV: np.ndarray    # (n, L, a, 2)
    VtV: np.ndarray    # (n, L, 2, 2)
    UtY: np.ndarray    # (n, L, a)
    VtY: np.ndarray    # (n, L, 2)
    YtY: np.ndarray    # (n, L)

    @property
    def n(self):
        return self.count.shape[0]

    @property
    def L(self):
        return self.count.shape[1]

    @property
    def a(self):
        return self.UtU.shape[2]

    def subset(self, idx):
        return LongStats(*(getattr(self, f)[idx] for f in
                           ("count", "UtU", "UtV", "VtV", "UtY", "VtY", "YtY")))

    def marker(self, ell):
        """Statistics restricted to one marker (``L = 1``)."""
        sl = slice(ell, ell + 1)
        return LongStats(*(getattr(self, f)[:, sl] for f in
                           ("count", "UtU", "UtV", "VtV", "UtY", "VtY", "YtY")))


def long_stats(subjects, alpha: int = 1) -> LongStats:
    subjects = list(subjects)
    n = len(subjects)
    L = len(subjects[0].markers) if n else 0
    a = alpha + 1
    count = np.zeros((n, L))
    UtU = np.zeros((n, L, a, a))
    UtV = np.zeros((n, L, a, 2))
    VtV = np.zeros((n, L, 2, 2))
    UtY = np.zeros((n, L, a))
    VtY = np.zeros((n, L, 2))
    YtY = np.zeros((n, L))
    powers = np.arange(2 * a - 1)
    for i, s in enumerate(subjects):
        for ell, m in enumerate(s.markers):
            if not len(m):
                continue
            tp = m.times[:, None] ** powers[None, :]  # (n_obs, 2a-1)
            S = tp.sum(axis=0)
            SY = (tp * m.values[:, None]).sum(axis=0)
            idx = np.add.outer(np.arange(a), np.arange(a))
            UtU[i, ell] = S[idx]
            UtV[i, ell] = S[idx[:, :2]]
            VtV[i, ell] = S[idx[:2, :2]]
            UtY[i, ell] = SY[:a]
            VtY[i, ell] = SY[:2]
            YtY[i, ell] = m.values @ m.values
            count[i, ell] = len(m)
    return LongStats(count, UtU, UtV, VtV, UtY, VtY, YtY)


def _inv_from_cholesky(cL: np.ndarray) -> np.ndarray:
    """Inverses of ``cL cL'`` for a stack of lower Cholesky factors."""
    n, r, _ = cL.shape
    if r <= 4:
        return np.linalg.inv(np.matmul(cL, np.swapaxes(cL, 1, 2)))
    X = np.zeros_like(cL)
    eye = np.eye(r)
    for i in range(r):
        # forward substitution for row i of cL^-1
        acc = eye[i] - np.matmul(cL[:, i:i + 1, :i], X[:, :i, :])[:, 0]
        X[:, i, :] = acc / cL[:, i, i, None]
    return np.matmul(np.swapaxes(X, 1, 2), X)


@dataclass
class BatchPosterior:
    """Cohort-wide random-effect posteriors and marginal log-likelihoods.

    Parameters
    ----------
    W : `np.ndarray`, shape=(n, r, r)
    O : `np.ndarray`, shape=(n, K, r)
    loglik : `np.ndarray`, shape=(n, K)
        Marginal log-density of each subject's observations per class.
    """

    W: np.ndarray
    O: np.ndarray
    loglik: np.ndarray


def batch_posterior(st: LongStats, beta: np.ndarray, D: np.ndarray,
                    phi: np.ndarray) -> BatchPosterior:
    """Closed-form posterior and marginal density for every subject and class.

    Uses the determinant lemma and the Woodbury identity so only ``r x r``
    systems are factorized.
    """
    n, L, a = st.n, st.L, st.a
    r = 2 * L
    K = beta.shape[0]
    B = beta.reshape(K, L, a)
    Dj = jittered(D)
    try:
        cD = np.linalg.cholesky(Dj)
    except np.linalg.LinAlgError:
        raise SolverError("D is not positive definite after jitter") from None
    logdetD = 2.0 * np.sum(np.log(np.diag(cD)))
    Dinv = cho_solve((cD, True), np.eye(r))
    P = np.broadcast_to(Dinv, (n, r, r)).copy()
    for ell in range(L):
        P[:, 2 * ell:2 * ell + 2, 2 * ell:2 * ell + 2] += st.VtV[:, ell] / phi[ell]
    try:
        cP = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise SolverError("posterior precision is not positive definite") from None
    logdetP = 2.0 * np.sum(np.log(np.diagonal(cP, axis1=1, axis2=2)), axis=1)
    W = _inv_from_cholesky(cP)
    W = 0.5 * (W + np.swapaxes(W, 1, 2))
    # c[i,k,l] = V_l' Sigma^-1 (Y_l - U_l beta_kl)
    UV = np.swapaxes(st.UtV, 2, 3)[:, None]                       # (n, 1, L, 2, a)
    Bk = B[None, :, :, :, None]                                   # (1, K, L, a, 1)
    c = st.VtY[:, None] - np.matmul(UV, Bk)[..., 0]
    c = (c / phi[None, None, :, None]).reshape(n, K, r)
    O = np.matmul(c, W)
    UB = np.matmul(st.UtU[:, None], Bk)[..., 0]                   # (n, K, L, a)
    eSe = (st.YtY[:, None, :] + ((UB - 2.0 * st.UtY[:, None]) * B[None]).sum(axis=3)) \
        / phi[None, None, :]
    quad = eSe.sum(axis=2) - (c * O).sum(axis=2)
    n_i = st.count.sum(axis=1)
    logdet_cov = st.count @ np.log(phi) + logdetD + logdetP
    loglik = -0.5 * (n_i * LOG_2PI + logdet_cov)[:, None] - 0.5 * quad
    return BatchPosterior(W, O, loglik)
