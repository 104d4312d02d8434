"""Penalties, proximal operators and the two solvers used by the M-step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import SolverError, ValidationError


@dataclass
class PenaltySpec:
    """Strengths and mixing weights of the two penalties.

    Parameters
    ----------
    zeta1 : `float` or `np.ndarray`, shape=(K,)
        Elastic-net strength on the class logits, per class.
    zeta2 : `float` or `np.ndarray`, shape=(K,)
        Sparse-group-lasso strength on the association coefficients, per class.
    eta : `float`
        Elastic-net mixing weight, ``(1 - eta) l1 + (eta / 2) l2^2``.
    eta_tilde : `float`
        Sparse-group-lasso mixing weight, ``(1 - eta_tilde) l1 + eta_tilde group``.
    group_size : `int`
        Size ``M`` of each contiguous group of ``gamma``.
    """

    zeta1: object = 0.0
    zeta2: object = 0.0
    eta: float = 0.1
    eta_tilde: float = 0.9
    group_size: int = 1

    def __post_init__(self):
        for name in ("eta", "eta_tilde"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("zeta1", "zeta2"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValidationError(f"{name} must be finite and non-negative")
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")

    def z1(self, k: int) -> float:
        v = np.asarray(self.zeta1, dtype=float)
        return float(v) if v.ndim == 0 else float(v[k])

    def z2(self, k: int) -> float:
        v = np.asarray(self.zeta2, dtype=float)
        return float(v) if v.ndim == 0 else float(v[k])

    def to_dict(self) -> dict:
        def enc(v):
            v = np.asarray(v, dtype=float)
            return float(v) if v.ndim == 0 else v.tolist()
        return {"zeta1": enc(self.zeta1), "zeta2": enc(self.zeta2), "eta": self.eta,
                "eta_tilde": self.eta_tilde, "group_size": self.group_size}


def elastic_net_value(v, spec: PenaltySpec) -> float:
    """``(1 - eta) ||v||_1 + (eta / 2) ||v||_2^2``."""
    v = np.asarray(v, dtype=float)
    return float((1.0 - spec.eta) * np.abs(v).sum() + 0.5 * spec.eta * (v @ v))


def group_norms(g, group_size: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return np.sqrt((g.reshape(-1, group_size) ** 2).sum(axis=1))


def sgl_value(g, spec: PenaltySpec) -> float:
    """``(1 - eta_tilde) ||g||_1 + eta_tilde sum_l ||g^l||_2``."""
    g = np.asarray(g, dtype=float)
    return float((1.0 - spec.eta_tilde) * np.abs(g).sum()
                 + spec.eta_tilde * group_norms(g, spec.group_size).sum())


def prox_soft(z, t) -> np.ndarray:
    """Componentwise soft-thresholding."""
    z = np.asarray(z, dtype=float)
    return np.copysign(np.maximum(np.abs(z) - t, 0.0), z)


def prox_group(z, t, group_size: int = None) -> np.ndarray:
    """Blockwise group shrinkage; a single block when ``group_size`` is None."""
    z = np.asarray(z, dtype=float)
    gs = z.size if group_size is None else group_size
    blocks = z.reshape(-1, gs)
    norms = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))
    factor = np.zeros_like(norms)
    big = norms > t
    factor[big] = 1.0 - t / norms[big]
    return (blocks * factor[:, None]).reshape(z.shape)


def prox_sgl(z, step: float, spec: PenaltySpec, k: int = 0) -> np.ndarray:
    """Proximal operator of ``step * zeta2_k * Omega_2``.

    Soft-thresholding at ``step * zeta2_k * (1 - eta_tilde)`` followed by
    group shrinkage at ``step * zeta2_k * eta_tilde``.
    """
    zeta = spec.z2(k)
    u = prox_soft(z, step * zeta * (1.0 - spec.eta_tilde))
    return prox_group(u, step * zeta * spec.eta_tilde, spec.group_size)


@dataclass
class SolverConfig:
    """Iteration caps and tolerances of the inner solvers."""

    ista_tol: float = 1e-6
    ista_max_iter: int = 1000
    ista_step: float = 1.0
    ista_shrink: float = 0.5
    ista_grow: float = 2.0
    ista_bb: bool = True
    qn_pgtol: float = 1e-8
    qn_max_iter: int = 500


@dataclass
class SolverResult:
    x: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    trace: list = field(default_factory=list)
    step: float = 1.0
    message: str = ""
    split: np.ndarray = None


def ista_solve(smooth_value, smooth_grad, prox, x0, config: SolverConfig = None,
               penalty_value=None, step0: float = None) -> SolverResult:
    """Proximal gradient descent with backtracking.

    Parameters
    ----------
    smooth_value, smooth_grad : callable
        Value and gradient of the smooth convex part ``f``.
    prox : callable
        ``prox(v, s)`` of ``s`` times the nonsmooth part.
    x0 : `np.ndarray`
        Starting point.
    penalty_value : callable, optional
        Value of the nonsmooth part; used for the stopping rule.
    step0 : `float`, optional
        Initial step, default ``config.ista_step``.

    Returns
    -------
    result : `SolverResult`
        Final iterate, objective trace over accepted steps and the last step.
    """
    cfg = config or SolverConfig()
    pen = penalty_value or (lambda x: 0.0)
    x = np.asarray(x0, dtype=float).copy()
    fx = smooth_value(x)
    obj = fx + pen(x)
    if not np.isfinite(obj):
        raise SolverError("non-finite objective at the starting point")
    trace = [obj]
    s = cfg.ista_step if step0 is None else step0
    converged = False
    it = 0
    g = smooth_grad(x)
    for it in range(1, cfg.ista_max_iter + 1):
        while True:
            x_new = prox(x - s * g, s)
            diff = x_new - x
            f_new = smooth_value(x_new)
            if np.isfinite(f_new) and f_new <= fx + g @ diff + (diff @ diff) / (2.0 * s):
                break
            s *= cfg.ista_shrink
            if s < 1e-20:
                raise SolverError("backtracking failed to find a decreasing step")
        obj_new = f_new + pen(x_new)
        if not np.isfinite(obj_new):
            raise SolverError("non-finite objective")
        change = abs(obj_new - obj) / max(abs(obj), 1e-300)
        x, fx, obj = x_new, f_new, obj_new
        trace.append(obj)
        if change < cfg.ista_tol or not np.any(diff):
            converged = True
            break
        g_new = smooth_grad(x)
        if cfg.ista_bb:
            # next trial step from the curvature along the last move,
            # alternating the two Barzilai-Borwein estimates
            y = g_new - g
            curv = diff @ y
            if curv <= 0:
                s *= cfg.ista_grow
            elif it % 2:
                s = (diff @ diff) / curv
            else:
                s = curv / (y @ y)
        else:
            s = min(s * cfg.ista_grow, cfg.ista_step)
        g = g_new
    return SolverResult(x, obj, it, converged, trace, s)


def box_qn_solve(value, grad, dim: int, x0, config: SolverConfig = None,
                 fixed_zero=None) -> SolverResult:
    """Minimize a smooth function of ``(x_plus, x_minus) >= 0`` by L-BFGS-B.

    Parameters
    ----------
    value, grad : callable
        Objective and gradient in the ``2 * dim`` split variables.
    dim : `int`
    x0 : `np.ndarray`, shape=(dim,)
        Starting point in the original variables.
    fixed_zero : `np.ndarray` of bool, shape=(dim,), optional
        Coordinates held at 0.

    Returns
    -------
    result : `SolverResult`
        ``x = x_plus - x_minus`` at the solution and ``split`` the pair
        ``(x_plus, x_minus)``; ``converged`` is False when the quasi-Newton
        method stopped without meeting the tolerance.
    """
    cfg = config or SolverConfig()
    x0 = np.asarray(x0, dtype=float)
    z0 = np.concatenate([np.maximum(x0, 0.0), np.maximum(-x0, 0.0)])
    bounds = [(0.0, None)] * (2 * dim)
    if fixed_zero is not None:
        for j in np.flatnonzero(fixed_zero):
            bounds[j] = (0.0, 0.0)
            bounds[dim + j] = (0.0, 0.0)
            z0[j] = z0[dim + j] = 0.0
    if fixed_zero is not None and np.all(fixed_zero):
        return SolverResult(np.zeros(dim), float(value(z0)), 0, True, [], 1.0, "all fixed", z0)
    res = minimize(lambda z: (value(z), grad(z)), z0, jac=True, method="L-BFGS-B",
                   bounds=bounds,
                   options={"maxiter": cfg.qn_max_iter, "gtol": cfg.qn_pgtol,
                            "ftol": 1e-15, "maxcor": 10})
    z = res.x
    if not np.all(np.isfinite(z)):
        raise SolverError("quasi-Newton produced a non-finite iterate")
    return SolverResult(z[:dim] - z[dim:], float(res.fun), int(res.get("nit", 0)), bool(res.success),
                        [], 1.0, str(res.message), z)
