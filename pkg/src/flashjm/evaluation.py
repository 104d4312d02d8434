"""Real-time prediction, held-out evaluation, model selection and bootstrap."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .concordance import KaplanMeier, c_index_uno, kaplan_meier
from .data import Cohort, MarkerSeries, SolverError, SubjectRecord, ValidationError
from .em import (FitConfig, FittedModel, e_step, fit, initialize, model_from_run, prepare,
                 risk_order, run_em)
from .features import screen

__all__ = ["KaplanMeier", "kaplan_meier", "c_index_uno", "predictive_marker",
           "predictive_markers", "evaluate", "EvaluationReport", "cross_validate", "CVResult",
           "fit_with_cv", "select_K", "elbow", "bootstrap_se", "DEFAULT_ZETA_GRID"]

DEFAULT_ZETA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


def predictive_markers(model: FittedModel, subjects, s) -> np.ndarray:
    """Class probabilities given survival up to ``s_i`` and the history up to ``s_i``.

    Each subject is treated as censored at ``s_i`` with its observations at
    times ``<= s_i``; baseline masses exist only on the training grid.

    Returns
    -------
    probs : `np.ndarray`, shape=(n, K)
    """
    subjects = list(subjects)
    s = np.broadcast_to(np.asarray(s, dtype=float), (len(subjects),))
    pseudo = [SubjectRecord(sub.id, sub.x, tuple(m.until(si) for m in sub.markers), si, False)
              for sub, si in zip(subjects, s)]
    cohort = Cohort(tuple(pseudo), model.marker_names, model.feature_names)
    data = prepare(cohort, model.catalog, model.config.alpha, failure_times=model.failure_times,
                   x_scale=model.x_scale, psi_scale=model.psi_scale)
    return e_step(data, model.working_params).stats.pi_tilde


def predictive_marker(model: FittedModel, x, history, s: float) -> np.ndarray:
    """Class probabilities of one subject at time ``s``."""
    sub = SubjectRecord("_", np.asarray(x, dtype=float),
                        tuple(m if isinstance(m, MarkerSeries) else MarkerSeries(*m)
                              for m in history), float(s), False)
    return predictive_markers(model, [sub], [s])[0]


@dataclass
class EvaluationReport:
    """Held-out concordance and the per-subject predictions behind it."""

    c_index: float
    t_max: float
    ids: list
    s: np.ndarray
    markers: np.ndarray
    T: np.ndarray
    delta: np.ndarray

    def to_dict(self) -> dict:
        return {"c_index": self.c_index, "t_max": self.t_max, "n": len(self.ids)}

    def rows(self):
        for i, sid in enumerate(self.ids):
            yield sid, float(self.s[i]), float(self.markers[i]), float(self.T[i]), \
                int(self.delta[i])


def landmark_times(cohort: Cohort, seed: int) -> np.ndarray:
    """``s_i = max_l t_last^l x (1 - B_i)`` with ``B_i ~ Beta(2, 5)``, one draw per subject."""
    rng = np.random.default_rng(seed)
    b = rng.beta(2.0, 5.0, size=cohort.n)
    last = np.array([max((m.times[-1] for m in s.markers if len(m)), default=0.0)
                     for s in cohort.subjects])
    return last * (1.0 - b)


def evaluate(model: FittedModel, test_cohort: Cohort, seed: int = 0,
             t_max: float = None) -> EvaluationReport:
    """Concordance of the high-risk class probability at random landmark times."""
    s = landmark_times(test_cohort, seed)
    probs = predictive_markers(model, test_cohort.subjects, s)
    markers = probs[:, model.high_risk]
    T, delta = test_cohort.T, test_cohort.delta
    if t_max is None:
        t_max = float(np.quantile(T, 0.9))
    c = c_index_uno(markers, T, delta, t_max)
    return EvaluationReport(float(c), float(t_max), test_cohort.ids, s, markers, T, delta)


@dataclass
class CVResult:
    best_zeta: float
    grid: list
    scores: np.ndarray  # (len(grid), n_folds), NaN where undefined
    mean_scores: list


def _fold_scores(args):
    cohort, config, grid, train_idx, test_idx, eval_seed = args
    train, test = cohort.subset(train_idx), cohort.subset(test_idx)
    data = prepare(train, config.catalog, config.alpha, standardize_x=config.standardize_x,
                   standardize_features=config.standardize_features)
    try:
        params0 = initialize(data, config)
    except SolverError:
        return [math.nan] * len(grid)
    out = []
    for zeta in grid:
        cfg = config.with_zeta(zeta)
        try:
            run = run_em(data, params0, cfg)
            model = model_from_run(train, data, cfg, run)
            out.append(evaluate(model, test, eval_seed).c_index)
        except (SolverError, ValidationError):
            out.append(math.nan)
    return out


def _map(fn, tasks, threads):
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


def cross_validate(cohort: Cohort, config: FitConfig, grid=DEFAULT_ZETA_GRID, n_folds: int = 10,
                   seed: int = 0, threads: int = 1) -> CVResult:
    """K-fold concordance of each shared penalty strength.

    Both penalty strengths take the grid value. Each fold is initialized once
    and every grid value starts from that point. Ties go to the larger value.
    """
    if config.screen_keep is not None:
        raise ValidationError("screen before cross-validation")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(cohort.n)
    folds = np.array_split(perm, n_folds)
    tasks = []
    for f, test_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([folds[g] for g in range(n_folds) if g != f]))
        tasks.append((cohort, config, list(grid), train_idx, np.sort(test_idx), seed + 1000 + f))
    scores = np.array(_map(_fold_scores, tasks, threads), dtype=float).T
    means = []
    for row in scores:
        ok = row[np.isfinite(row)]
        means.append(float(ok.mean()) if ok.size else -math.inf)
    means_arr = np.array(means)
    best = np.flatnonzero(means_arr == means_arr.max())
    gvals = np.array(grid, dtype=float)
    best_zeta = float(gvals[best].max())
    return CVResult(best_zeta, list(map(float, grid)), scores, means)


def fit_with_cv(cohort: Cohort, config: FitConfig, grid=DEFAULT_ZETA_GRID, n_folds: int = 10,
                seed: int = 0, threads: int = 1):
    """Screen, choose the penalty strength by cross-validation, then refit."""
    if config.screen_keep is not None:
        catalog = screen(cohort, config.catalog, config.screen_keep)
        config = replace(config, catalog=catalog, screen_keep=None)
    cv = cross_validate(cohort, config, grid, n_folds, seed, threads)
    model = fit(cohort, config.with_zeta(cv.best_zeta))
    return model, cv


def elbow(values) -> int:
    """Index of the candidate after the first drop of at least half the largest drop.

    Returns 0 when no consecutive value decreases.
    """
    v = np.asarray(values, dtype=float)
    if v.size <= 1:
        return 0
    drops = v[:-1] - v[1:]
    biggest = drops.max()
    if not biggest > 0:
        return 0
    return int(np.flatnonzero(drops >= 0.5 * biggest)[0] + 1)


def bic(model: FittedModel, n: int) -> float:
    """``2 n L_pen + log(n) K``: minus twice the penalized log-likelihood plus ``log(n) K``."""
    return 2.0 * n * model.trace[-1] + math.log(n) * model.config.K


def _fit_K(args):
    cohort, config = args
    try:
        return fit(cohort, config)
    except (SolverError, ValidationError) as exc:
        return str(exc)


def select_K(cohort: Cohort, config: FitConfig, k_candidates, threads: int = 1):
    """Fit every candidate number of classes and pick one by the BIC elbow.

    Returns
    -------
    K : `int`
    bics : `dict`
        BIC of each candidate that could be fitted.
    flags : `list` of `str`
    """
    cands = sorted(set(int(k) for k in k_candidates))
    if not cands:
        raise ValidationError("no candidate K")
    results = _map(_fit_K, [(cohort, replace(config, K=k)) for k in cands], threads)
    bics, flags = {}, []
    for k, res in zip(cands, results):
        if isinstance(res, str):
            flags.append(f"K={k} excluded: {res}")
        else:
            bics[k] = bic(res, cohort.n)
    if not bics:
        raise SolverError("no candidate K could be fitted")
    ks = sorted(bics)
    return ks[elbow([bics[k] for k in ks])], bics, flags


@dataclass
class BootstrapEntry:
    block: str      # "xi" or "gamma"
    klass: int      # class index in risk order (0 = lowest risk)
    name: str       # feature or marker name
    estimate: float
    se: float


def _coef_table(model: FittedModel, order):
    """Coefficients in report layout, classes in ``order`` (low to high risk).

    The logit block is reported as contrasts against the lowest-risk class;
    association blocks are per-class marker norms.
    """
    xi = model.params.xi
    ref = order[0]
    rows = []
    for c, k in enumerate(order[1:], start=1):
        for j, name in enumerate(model.feature_names):
            rows.append(("xi", c, name, float(xi[k, j] - xi[ref, j])))
    norms = model.gamma_blocks()
    for c, k in enumerate(order):
        for ell, name in enumerate(model.marker_names):
            rows.append(("gamma", c, name, float(norms[k, ell])))
    return rows


def _boot_fit(args):
    cohort, model, config, support, idx = args
    sub = cohort.subset(idx)
    # reuse the full-cohort scales so the warm start acts on the same features
    data = prepare(sub, model.catalog, config.alpha, x_scale=model.x_scale,
                   psi_scale=model.psi_scale)
    init = model.working_params.copy()
    init.lambda0 = init.lambda0[np.searchsorted(model.failure_times, data.tau)]
    run = run_em(data, init, config, support)
    return model_from_run(sub, data, config, run), data


def bootstrap_se(cohort: Cohort, model: FittedModel, B: int = 10, seed: int = 0,
                 resample: bool = True, threads: int = 1):
    """Bootstrap standard errors on the support of a penalized fit.

    Coefficients outside the support are held at zero; the refits drop every
    sparsity-inducing penalty term (lasso and group parts) and keep only the
    ridge part of the logit penalty. Each replicate draws ``n`` subjects with
    replacement (or reuses the cohort when ``resample`` is False), is
    warm-started at the penalized estimate and has its classes ordered by
    risk. Returns a list of `BootstrapEntry`, empty when the support is empty.
    """
    if B < 2:
        raise ValidationError("B must be >= 2")
    xi_mask = np.abs(model.working_params.xi) > 0
    xi_cols = np.any(xi_mask, axis=0)
    xi_mask = np.broadcast_to(xi_cols, xi_mask.shape).copy()
    gamma_mask = np.abs(model.working_params.gamma) > 0
    if not xi_mask.any() and not gamma_mask.any():
        return []
    config = replace(model.config, zeta2=0.0, eta=1.0, screen_keep=None)
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(B):
        idx = rng.integers(0, cohort.n, size=cohort.n) if resample else np.arange(cohort.n)
        tasks.append((cohort, model, config, (xi_mask, gamma_mask), idx))
    fits = _map(_boot_fit, tasks, threads)
    base_data = prepare(cohort, model.catalog, model.config.alpha, x_scale=model.x_scale,
                        psi_scale=model.psi_scale)
    base_order = risk_order(base_data, model.working_params)
    base = _coef_table(model, base_order)
    tables = []
    for m, data in fits:
        tables.append([row[3] for row in _coef_table(m, risk_order(data, m.working_params))])
    tables = np.array(tables)
    se = tables.std(axis=0, ddof=1)
    out = []
    for (block, c, name, est), s_ in zip(base, se):
        if block == "xi" and not xi_cols[model.feature_names.index(name)]:
            continue
        if block == "gamma":
            k = base_order[c]
            ell = model.marker_names.index(name)
            M = model.catalog.M
            if not gamma_mask[k, ell * M:(ell + 1) * M].any():
                continue
        out.append(BootstrapEntry(block, c, name, est, float(s_)))
    return out
