"""History-based association features and the extractor screening phase."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, MarkerSeries, SolverError, SubjectRecord, ValidationError

_ZERO_VAR = 1e-20


def _f_max(t, y):
    return float(np.max(y))


def _f_min(t, y):
    return float(np.min(y))


def _f_mean(t, y):
    return float(np.mean(y))


def _f_sum(t, y):
    return float(np.sum(y))


def _f_last(t, y):
    return float(y[-1])


def _f_std(t, y):
    return float(np.std(y))


def _f_energy(t, y):
    return float(np.sum(y * y))


def _f_slope(t, y):
    if y.size < 2:
        return 0.0
    tc = t - t.mean()
    den = np.sum(tc * tc)
    if not den > 0:
        return 0.0
    return float(np.sum(tc * (y - y.mean())) / den)


def _f_kurtosis(t, y):
    if y.size < 4:
        return 0.0
    d = y - y.mean()
    m2 = np.mean(d ** 2)
    if m2 <= _ZERO_VAR * np.mean(y ** 2):
        return 0.0
    return float(np.mean(d ** 4) / m2 / m2 - 3.0)


def _f_autocorr(t, y):
    if y.size < 2:
        return 0.0
    d = y - y.mean()
    den = np.sum(d * d)
    if den <= _ZERO_VAR * np.sum(y * y):
        return 0.0
    return float(np.sum(d[:-1] * d[1:]) / den)


EXTRACTORS = {
    "max": _f_max,
    "min": _f_min,
    "mean": _f_mean,
    "sum": _f_sum,
    "last_value": _f_last,
    "std_dev": _f_std,
    "absolute_energy": _f_energy,
    "linear_trend_slope": _f_slope,
    "kurtosis": _f_kurtosis,
    "autocorrelation_lag1": _f_autocorr,
}


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered list of extractor names."""

    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValidationError("feature catalog must not be empty")
        if len(set(names)) != len(names):
            raise ValidationError("feature catalog names must be unique")
        unknown = [n for n in names if n not in EXTRACTORS]
        if unknown:
            raise ValidationError(f"unknown extractors: {unknown}")
        object.__setattr__(self, "names", names)

    @property
    def M(self) -> int:
        return len(self.names)

    @staticmethod
    def default() -> "FeatureCatalog":
        return FeatureCatalog(tuple(EXTRACTORS))


def extract(series: MarkerSeries, t: float, extractor: str) -> float:
    """Value of one extractor on the observations strictly before ``t``.

    An empty history yields 0.
    """
    if extractor not in EXTRACTORS:
        raise ValidationError(f"unknown extractor {extractor!r}")
    c = int(np.searchsorted(series.times, t, side="left"))
    if c == 0:
        return 0.0
    return EXTRACTORS[extractor](series.times[:c], series.values[:c])


def _prefix_block(T, Y, n, names):
    """Features of every prefix for a batch of padded series of equal width.

    ``T``, ``Y`` have shape (S, w); ``n`` holds true lengths. Returns an array
    of shape (S, w + 1, M) where row ``c`` uses the first ``c`` observations.
    """
    S, w = Y.shape
    c = np.arange(w + 1)
    # mask[s, c, j]: observation j belongs to prefix c
    mask = (np.arange(w)[None, None, :] < c[None, :, None]) & \
           (np.arange(w)[None, None, :] < n[:, None, None])
    cnt = mask.sum(axis=2).astype(float)
    safe = np.maximum(cnt, 1.0)
    Yb = np.where(mask, Y[:, None, :], 0.0)
    Tb = np.where(mask, T[:, None, :], 0.0)
    s1 = Yb.sum(axis=2)
    sq = (Yb * Yb).sum(axis=2)
    mean = s1 / safe
    d = np.where(mask, Y[:, None, :] - mean[:, :, None], 0.0)
    m2 = (d * d).sum(axis=2) / safe
    tmean = Tb.sum(axis=2) / safe
    tc = np.where(mask, T[:, None, :] - tmean[:, :, None], 0.0)
    out = np.zeros((S, w + 1, len(names)))
    empty = cnt == 0
    for m, name in enumerate(names):
        if name == "max":
            v = np.where(mask, Y[:, None, :], -np.inf).max(axis=2)
        elif name == "min":
            v = np.where(mask, Y[:, None, :], np.inf).min(axis=2)
        elif name == "mean":
            v = mean
        elif name == "sum":
            v = s1
        elif name == "last_value":
            idx = np.clip(cnt.astype(int) - 1, 0, max(w - 1, 0))
            v = np.take_along_axis(Y, idx, axis=1) if w else np.zeros((S, 1))
        elif name == "std_dev":
            v = np.sqrt(m2)
        elif name == "absolute_energy":
            v = sq
        elif name == "linear_trend_slope":
            den = (tc * tc).sum(axis=2)
            num = (tc * d).sum(axis=2)
            v = np.where(cnt >= 2, num / np.where(den > 0, den, 1.0), 0.0)
        elif name == "kurtosis":
            m4 = (d ** 4).sum(axis=2) / safe
            ok = (cnt >= 4) & (m2 > _ZERO_VAR * sq / safe)
            m2s = np.where(ok, m2, 1.0)
            # divide twice: m2 ** 2 can underflow for a tiny positive m2
            v = np.where(ok, m4 / m2s / m2s - 3.0, 0.0)
        elif name == "autocorrelation_lag1":
            den = (d * d).sum(axis=2)
            num = (d[:, :, :-1] * d[:, :, 1:]).sum(axis=2) if w > 1 else np.zeros_like(den)
            ok = (cnt >= 2) & (den > _ZERO_VAR * sq)
            v = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        else:  # pragma: no cover - guarded by FeatureCatalog
            raise ValidationError(name)
        out[:, :, m] = np.where(empty, 0.0, v)
    return out


def prefix_features(series_list, catalog: FeatureCatalog):
    """Feature values of every history prefix of every series.

    Returns
    -------
    table : `np.ndarray`, shape=(sum(n_s + 1), M)
        Row ``offsets[s] + c`` holds the features of the first ``c``
        observations of series ``s``.
    offsets : `np.ndarray`, shape=(S,)
    """
    lengths = np.array([len(s) for s in series_list], dtype=int)
    offsets = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]]).astype(int)
    table = np.zeros((int((lengths + 1).sum()), catalog.M))
    # group by length so padding stays small
    for w in np.unique(lengths):
        idx = np.flatnonzero(lengths == w)
        chunk = max(1, 2_000_000 // ((w + 1) * max(w, 1)))
        for start in range(0, idx.size, chunk):
            sel = idx[start:start + chunk]
            if w == 0:
                continue
            T = np.vstack([series_list[s].times for s in sel])
            Y = np.vstack([series_list[s].values for s in sel])
            block = _prefix_block(T, Y, np.full(sel.size, w), catalog.names)
            rows = offsets[sel][:, None] + np.arange(w + 1)[None, :]
            table[rows.reshape(-1)] = block.reshape(-1, catalog.M)
    return table, offsets


def build_association(subject: SubjectRecord, catalog: FeatureCatalog, grid) -> np.ndarray:
    """Association features at each grid time, marker-major layout.

    Row ``j`` has length ``L * M``; entry ``l * M + m`` is extractor ``m`` on
    marker ``l`` using observations strictly before ``grid[j]``.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size > 1 and np.any(np.diff(grid) < 0):
        raise ValidationError("grid must be sorted")
    table, offsets = prefix_features(subject.markers, catalog)
    L, M = len(subject.markers), catalog.M
    out = np.zeros((grid.size, L * M))
    for ell, series in enumerate(subject.markers):
        counts = np.searchsorted(series.times, grid, side="left")
        out[:, ell * M:(ell + 1) * M] = table[offsets[ell] + counts]
    return out


@dataclass
class AssociationSegments:
    """Piecewise-constant association features of a cohort on a time grid.

    Each row ``r`` is a history state of subject ``subject[r]`` that holds for
    grid indices ``start[r] <= j < stop[r]``; rows only cover grid times at
    which the subject is at risk (``grid[j] <= T_i``).

    Parameters
    ----------
    subject, start, stop : `np.ndarray`, shape=(R,)
    psi : `np.ndarray`, shape=(R, L * M)
    psi_T : `np.ndarray`, shape=(n, L * M)
        Features at each subject's own observed time.
    n : `int`
    n_grid : `int`
    """

    subject: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    psi: np.ndarray
    psi_T: np.ndarray
    n: int
    n_grid: int

    def scaled(self, scale: np.ndarray) -> "AssociationSegments":
        return AssociationSegments(self.subject, self.start, self.stop, self.psi / scale,
                                   self.psi_T / scale, self.n, self.n_grid)

    def column_scale(self) -> np.ndarray:
        """Standard deviation of each column over at-risk (subject, grid) pairs."""
        w = (self.stop - self.start).astype(float)
        if w.sum() <= 0:
            return np.ones(self.psi.shape[1])
        mu = (w[:, None] * self.psi).sum(axis=0) / w.sum()
        var = (w[:, None] * (self.psi - mu) ** 2).sum(axis=0) / w.sum()
        sd = np.sqrt(var)
        return np.where(sd > 1e-12 * (1.0 + np.abs(mu)), sd, 1.0)

    def dense(self) -> np.ndarray:
        """Array of shape (n, n_grid, L * M), zero where not at risk."""
        out = np.zeros((self.n, self.n_grid, self.psi.shape[1]))
        for r in range(self.subject.size):
            out[self.subject[r], self.start[r]:self.stop[r]] = self.psi[r]
        return out


def build_segments(subjects, catalog: FeatureCatalog, grid) -> AssociationSegments:
    """Compressed association features of many subjects on a shared grid."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    subjects = list(subjects)
    n = len(subjects)
    L = len(subjects[0].markers) if n else 0
    M = catalog.M
    all_series = [m for s in subjects for m in s.markers]
    table, offsets = prefix_features(all_series, catalog)
    offsets = offsets.reshape(n, L) if n else np.zeros((0, L), dtype=int)

    seg_subj, seg_start, seg_stop, seg_rows = [], [], [], []
    psi_T_rows = np.zeros((n, L), dtype=int)
    for i, s in enumerate(subjects):
        j_end = int(np.searchsorted(grid, s.event_time, side="right"))
        psi_T_rows[i] = offsets[i] + [np.searchsorted(m.times, s.event_time, side="left")
                                      for m in s.markers]
        if j_end == 0:
            continue
        union = np.unique(np.concatenate([m.times for m in s.markers])) \
            if L else np.zeros(0)
        # state c holds after the c-th distinct observation time
        starts = np.concatenate([[0], np.searchsorted(grid, union, side="right")])
        stops = np.concatenate([starts[1:], [j_end]])
        starts = np.minimum(starts, j_end)
        stops = np.minimum(stops, j_end)
        keep = stops > starts
        if not np.any(keep):
            continue
        cut = np.concatenate([[-np.inf], union])[keep]
        counts = np.stack([np.searchsorted(m.times, cut, side="right") for m in s.markers],
                          axis=1)
        seg_subj.append(np.full(counts.shape[0], i))
        seg_start.append(starts[keep])
        seg_stop.append(stops[keep])
        seg_rows.append(offsets[i][None, :] + counts)
    if seg_subj:
        rows = np.concatenate(seg_rows)
        subject = np.concatenate(seg_subj).astype(int)
        start = np.concatenate(seg_start).astype(int)
        stop = np.concatenate(seg_stop).astype(int)
    else:
        rows = np.zeros((0, L), dtype=int)
        subject = start = stop = np.zeros(0, dtype=int)
    psi = table[rows].reshape(rows.shape[0], L * M)
    psi_T = table[psi_T_rows].reshape(n, L * M)
    return AssociationSegments(subject, start, stop, psi, psi_T, n, grid.size)


def _extractor_segments(segs: AssociationSegments, m: int, M: int) -> AssociationSegments:
    cols = np.arange(m, segs.psi.shape[1], M)
    return AssociationSegments(segs.subject, segs.start, segs.stop, segs.psi[:, cols],
                               segs.psi_T[:, cols], segs.n, segs.n_grid)


def screen(cohort: Cohort, catalog: FeatureCatalog, keep: int = 10, return_scores: bool = False):
    """Rank extractors by the in-sample concordance of a per-extractor Cox fit.

    For each extractor, its ``L`` marker columns enter an unpenalized Cox
    model with time-varying covariates; the fitted risk at each subject's
    observed time is scored with the IPCW concordance index. A constant
    extractor scores 0.5. Returns the ``keep`` best extractors.
    """
    from .concordance import c_index_uno
    from .survival import cox_fit

    if keep < 1:
        raise ValidationError("keep must be >= 1")
    tau = cohort.failure_times
    if tau.size == 0:
        raise ValidationError("screening needs at least one event")
    T, delta = cohort.T, cohort.delta
    segs = build_segments(cohort.subjects, catalog, tau)
    scores = []
    for m, name in enumerate(catalog.names):
        sub = _extractor_segments(segs, m, catalog.M)
        z_all = np.vstack([sub.psi, sub.psi_T])
        if z_all.size == 0 or np.all(z_all == z_all[:1]):
            scores.append(0.5)
            continue
        scale = sub.column_scale()
        sub = sub.scaled(scale)
        try:
            res = cox_fit(sub, T, delta, tau)
            scores.append(float(c_index_uno(sub.psi_T @ res.coef, T, delta)))
        except (ValidationError, SolverError):
            scores.append(0.5)
    scores = np.array(scores)
    # stable: ties keep catalog order
    order = np.argsort(-scores, kind="stable")
    kept = FeatureCatalog(tuple(catalog.names[i] for i in order[:min(keep, catalog.M)]))
    if return_scores:
        return kept, dict(zip(catalog.names, scores.tolist()))
    return kept
