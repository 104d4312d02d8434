"""Kaplan-Meier estimator and the IPCW concordance index."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import ValidationError


@dataclass(frozen=True)
class KaplanMeier:
    """Right-continuous product-limit survival curve.

    Parameters
    ----------
    times : `np.ndarray`, shape=(m,)
        Distinct event times, ascending.
    survival : `np.ndarray`, shape=(m,)
        Survival just after each event time.
    """

    times: np.ndarray
    survival: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[1.0], self.survival])
        return vals[idx]

    def left(self, t):
        """Left limit ``S(t-)``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        vals = np.concatenate([[1.0], self.survival])
        return vals[idx]


def kaplan_meier(times, indicators) -> KaplanMeier:
    """Product-limit estimator of the survival function of ``times``.

    Parameters
    ----------
    times : `np.ndarray`, shape=(n,)
    indicators : `np.ndarray`, shape=(n,)
        1 where the time is an observed event, 0 where it is censored.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    ind = np.asarray(indicators, dtype=bool).reshape(-1)
    if times.shape != ind.shape:
        raise ValidationError("times and indicators must have equal length")
    event_times = np.unique(times[ind])
    if event_times.size == 0:
        return KaplanMeier(np.zeros(0), np.zeros(0))
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, event_times, side="left")
    deaths = np.searchsorted(np.sort(times[ind]), event_times, side="right") - \
        np.searchsorted(np.sort(times[ind]), event_times, side="left")
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KaplanMeier(event_times, surv)


def c_index_uno(markers, T, Delta, t_max=None) -> float:
    """Censoring-adjusted concordance between risk markers and event times.

    Comparable pairs are ``(i, j)`` with ``Delta_i = 1``, ``T_i < T_j`` and
    ``T_i < t_max``; each is weighted by ``G(T_i-)**-2`` where ``G`` is the
    Kaplan-Meier estimate of the censoring survival. A pair is concordant
    when ``markers_i > markers_j``; marker ties count one half. The weighted
    sums are accumulated exactly, so the result is the correctly rounded
    ratio whatever the pair order.

    Parameters
    ----------
    markers : `np.ndarray`, shape=(n,)
        Higher values mean higher predicted risk.
    T : `np.ndarray`, shape=(n,)
    Delta : `np.ndarray`, shape=(n,)
    t_max : `float`, optional
        Truncation time; defaults to no truncation.
    """
    r = np.asarray(markers, dtype=float).reshape(-1)
    T = np.asarray(T, dtype=float).reshape(-1)
    D = np.asarray(Delta, dtype=bool).reshape(-1)
    if not (r.shape == T.shape == D.shape):
        raise ValidationError("markers, T and Delta must have equal length")
    if t_max is None:
        t_max = np.inf
    G = kaplan_meier(T, ~D)
    num = Fraction(0)
    den = Fraction(0)
    for i in np.flatnonzero(D & (T < t_max)):
        later = T > T[i]
        cnt = int(later.sum())
        if cnt == 0:
            continue
        g = G.left(T[i])
        w = 1.0 / (g * g)
        rj = r[later]
        w = Fraction(w)
        num += w * (np.count_nonzero(r[i] > rj) + Fraction(np.count_nonzero(r[i] == rj), 2))
        den += w * cnt
    if den == 0:
        raise ValidationError("no comparable pairs for the concordance index")
    return float(num / den)
