"""Cohort and parameter containers, design matrices, and CSV/JSON I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when input data or configuration violates a contract."""


class SolverError(RuntimeError):
    """Raised when a numerical routine fails to produce a usable iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class MarkerSeries:
    """Irregularly sampled observations of a single marker.

    Parameters
    ----------
    times : `np.ndarray`, shape=(n_obs,)
        Strictly increasing, non-negative observation times.
    values : `np.ndarray`, shape=(n_obs,)
        Observed marker values.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if times.shape != values.shape:
            raise ValidationError("times and values must have equal length")
        if times.size and (np.any(times < 0) or not np.all(np.isfinite(times))):
            raise ValidationError("observation times must be finite and non-negative")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValidationError("observation times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValidationError("marker values must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def until(self, s: float, inclusive: bool = True) -> "MarkerSeries":
        """Return the observations at times ``<= s`` (or ``< s``)."""
        side = "right" if inclusive else "left"
        c = int(np.searchsorted(self.times, s, side=side))
        return MarkerSeries(self.times[:c], self.values[:c])

    @staticmethod
    def empty() -> "MarkerSeries":
        return MarkerSeries(np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: static features, marker histories and follow-up.

    Parameters
    ----------
    id : `str`
        Opaque identifier.
    x : `np.ndarray`, shape=(p,)
        Time-independent features.
    markers : `tuple` of `MarkerSeries`
        One series per marker, possibly empty.
    event_time : `float`
        Observed time, event or censoring.
    event_indicator : `bool`
        True if the event was observed.
    """

    id: str
    x: np.ndarray
    markers: tuple
    event_time: float
    event_indicator: bool

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"subject {self.id}: missing or non-finite features")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "markers", tuple(self.markers))
        T = float(self.event_time)
        if not math.isfinite(T) or T < 0:
            raise ValidationError(f"subject {self.id}: event time must be finite and >= 0")
        object.__setattr__(self, "event_time", T)
        if self.event_indicator not in (0, 1, True, False):
            raise ValidationError(f"subject {self.id}: event indicator must be 0 or 1")
        object.__setattr__(self, "event_indicator", bool(self.event_indicator))
        for series in self.markers:
            if len(series) and series.times[-1] > T:
                raise ValidationError(
                    f"subject {self.id}: observation at time {series.times[-1]!r} "
                    f"after event time {T!r}")

    def n_obs(self) -> np.ndarray:
        return np.array([len(m) for m in self.markers], dtype=int)

    def truncated(self, s: float) -> "SubjectRecord":
        """Pseudo-subject censored at ``s`` with history up to ``s``."""
        return SubjectRecord(self.id, self.x, tuple(m.until(s) for m in self.markers),
                             float(s), False)


def unique_failure_times(T: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Sorted, deduplicated uncensored times."""
    return np.unique(np.asarray(T, dtype=float)[np.asarray(delta, dtype=bool)])


@dataclass(frozen=True)
class Cohort:
    """A validated collection of subjects sharing dimensions.

    Parameters
    ----------
    subjects : `tuple` of `SubjectRecord`
    marker_names : `tuple` of `str`
        Marker order, index ``l`` for the ``l``-th series of each subject.
    feature_names : `tuple` of `str`
        Names of the time-independent features.
    """

    subjects: tuple
    marker_names: tuple
    feature_names: tuple
    failure_times: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "marker_names", tuple(self.marker_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        L, p = len(self.marker_names), len(self.feature_names)
        for s in self.subjects:
            if len(s.markers) != L:
                raise ValidationError(f"subject {s.id}: expected {L} markers")
            if s.x.size != p:
                raise ValidationError(f"subject {s.id}: expected {p} features")
        tau = unique_failure_times(self.T, self.delta) if self.subjects else np.zeros(0)
        tau.setflags(write=False)
        object.__setattr__(self, "failure_times", tau)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def L(self) -> int:
        return len(self.marker_names)

    @property
    def T(self) -> np.ndarray:
        return np.array([s.event_time for s in self.subjects], dtype=float)

    @property
    def delta(self) -> np.ndarray:
        return np.array([s.event_indicator for s in self.subjects], dtype=bool)

    @property
    def X(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.p))
        return np.vstack([s.x for s in self.subjects])

    @property
    def ids(self) -> list:
        return [s.id for s in self.subjects]

    def subset(self, indices: Iterable[int]) -> "Cohort":
        """Cohort of the selected subjects, in the given order (repeats allowed)."""
        return Cohort(tuple(self.subjects[i] for i in indices),
                      self.marker_names, self.feature_names)

    def with_subjects(self, subjects: Sequence[SubjectRecord]) -> "Cohort":
        return Cohort(tuple(subjects), self.marker_names, self.feature_names)


@dataclass
class ModelParams:
    """All estimable parameters of the joint model.

    Parameters
    ----------
    xi : `np.ndarray`, shape=(K, p)
        Class-membership logit coefficients.
    beta : `np.ndarray`, shape=(K, q)
        Fixed effects, marker-major, ``alpha + 1`` per marker.
    phi : `np.ndarray`, shape=(L,)
        Measurement-noise variances.
    D : `np.ndarray`, shape=(r, r)
        Random-effect covariance, ``r = 2 L``.
    lambda0 : `np.ndarray`, shape=(J,)
        Baseline hazard masses at the failure times.
    gamma : `np.ndarray`, shape=(K, L * M)
        Association coefficients, marker-major.
    """

    xi: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    D: np.ndarray
    lambda0: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.phi = np.asarray(self.phi, dtype=float).reshape(-1)
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.lambda0 = np.asarray(self.lambda0, dtype=float).reshape(-1)
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))

    @property
    def K(self) -> int:
        return self.xi.shape[0]

    @property
    def L(self) -> int:
        return self.phi.size

    @property
    def M(self) -> int:
        return self.gamma.shape[1] // max(self.L, 1)

    @property
    def alpha(self) -> int:
        return self.beta.shape[1] // max(self.L, 1) - 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.xi.copy(), self.beta.copy(), self.phi.copy(),
                           self.D.copy(), self.lambda0.copy(), self.gamma.copy())

    def validate(self, tol: float = 0.0) -> None:
        K, L = self.K, self.L
        if L == 0:
            raise ValidationError("phi must have at least one entry")
        if self.beta.shape[0] != K or self.gamma.shape[0] != K:
            raise ValidationError("class dimension mismatch between xi, beta and gamma")
        if self.beta.shape[1] % L or self.gamma.shape[1] % L:
            raise ValidationError("beta and gamma lengths must be multiples of L")
        if self.D.shape != (2 * L, 2 * L):
            raise ValidationError(f"D must be {2 * L}x{2 * L}")
        if not np.allclose(self.D, self.D.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.D).max())):
            raise ValidationError("D must be symmetric")
        if np.linalg.eigvalsh(self.D).min() <= -tol:
            raise ValidationError("D must be positive definite")
        if np.any(self.phi <= 0):
            raise ValidationError("phi must be positive")
        if np.any(self.lambda0 < 0):
            raise ValidationError("lambda0 must be non-negative")

    def permuted(self, order: Sequence[int]) -> "ModelParams":
        """Parameters with classes relabelled so that new class ``c`` is old ``order[c]``."""
        order = list(order)
        return ModelParams(self.xi[order], self.beta[order], self.phi.copy(),
                           self.D.copy(), self.lambda0.copy(), self.gamma[order])

    def to_dict(self) -> dict:
        return {
            "dims": {"K": self.K, "p": self.xi.shape[1], "q": self.beta.shape[1],
                     "r": self.D.shape[0], "J": self.lambda0.size, "L": self.L,
                     "M": self.M},
            "xi": self.xi.tolist(),
            "beta": self.beta.tolist(),
            "phi": self.phi.tolist(),
            "D": self.D.tolist(),
            "lambda0": self.lambda0.tolist(),
            "gamma": self.gamma.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelParams":
        dims = d["dims"]

        def arr(key, shape):
            a = np.asarray(d[key], dtype=float).reshape(shape)
            return a

        return ModelParams(
            xi=arr("xi", (dims["K"], dims["p"])),
            beta=arr("beta", (dims["K"], dims["q"])),
            phi=arr("phi", (dims["L"],)),
            D=arr("D", (dims["r"], dims["r"])),
            lambda0=arr("lambda0", (dims["J"],)),
            gamma=arr("gamma", (dims["K"], dims["L"] * dims["M"])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def from_json(text: str) -> "ModelParams":
        return ModelParams.from_dict(json.loads(text))


@dataclass(frozen=True)
class DesignPair:
    """Block-diagonal fixed- and random-effect designs of one subject.

    Parameters
    ----------
    U : `np.ndarray`, shape=(n_i, L * (alpha + 1))
    V : `np.ndarray`, shape=(n_i, 2 L)
    U_blocks, V_blocks : `tuple` of `np.ndarray`
        Per-marker blocks.
    y : `np.ndarray`, shape=(n_i,)
        Concatenated observations, marker-major.
    """

    U: np.ndarray
    V: np.ndarray
    U_blocks: tuple
    V_blocks: tuple
    y: np.ndarray


def time_monomials(t: np.ndarray, degree: int) -> np.ndarray:
    """Rows ``(1, t, ..., t**degree)``."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    return t ** np.arange(degree + 1)[None, :]


def build_designs(subject: SubjectRecord, alpha: int = 1) -> DesignPair:
    """Fixed-effect design of order ``alpha`` and linear random-effect design."""
    if alpha < 1:
        raise ValidationError("alpha must be >= 1")
    U_blocks = tuple(time_monomials(m.times, alpha) for m in subject.markers)
    V_blocks = tuple(time_monomials(m.times, 1) for m in subject.markers)
    L = len(subject.markers)
    n_i = sum(len(m) for m in subject.markers)
    U = np.zeros((n_i, L * (alpha + 1)))
    V = np.zeros((n_i, 2 * L))
    row = 0
    for ell, (Ub, Vb) in enumerate(zip(U_blocks, V_blocks)):
        n_l = Ub.shape[0]
        U[row:row + n_l, ell * (alpha + 1):(ell + 1) * (alpha + 1)] = Ub
        V[row:row + n_l, 2 * ell:2 * ell + 2] = Vb
        row += n_l
    if n_i:
        y = np.concatenate([m.values for m in subject.markers])
    else:
        y = np.zeros(0)
    return DesignPair(U, V, U_blocks, V_blocks, y)


@dataclass(frozen=True)
class ColumnSpec:
    """Column names of the two input CSV files.

    Parameters
    ----------
    markers : `list` of `str`
        Marker manifest; fixes marker index order.
    features : `list` of `str`, optional
        Feature columns; by default every subjects column except id, T, delta.
    """

    markers: tuple
    features: tuple = None
    id_col: str = "id"
    time_col: str = "T"
    event_col: str = "delta"
    marker_col: str = "marker"
    obs_time_col: str = "time"
    value_col: str = "value"


def _parse_float(text: str, what: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"cannot parse {what}: {text!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"non-finite {what}: {text!r}")
    return v


def load_cohort(subjects_file, longitudinal_file, schema: ColumnSpec) -> Cohort:
    """Read and validate a cohort from the subjects and longitudinal CSV files."""
    subjects_file, longitudinal_file = Path(subjects_file), Path(longitudinal_file)
    for f in (subjects_file, longitudinal_file):
        if not f.is_file():
            raise ValidationError(f"missing file: {f}")
    with open(subjects_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.id_col, schema.time_col, schema.event_col):
            if col not in header:
                raise ValidationError(f"subjects file lacks column {col!r}")
        if schema.features is None:
            reserved = {schema.id_col, schema.time_col, schema.event_col}
            features = tuple(c for c in header if c not in reserved)
        else:
            features = tuple(schema.features)
            for c in features:
                if c not in header:
                    raise ValidationError(f"subjects file lacks feature column {c!r}")
        rows = list(reader)

    markers = tuple(schema.markers)
    if len(set(markers)) != len(markers) or not markers:
        raise ValidationError("marker manifest must be a non-empty list of unique names")
    marker_index = {m: i for i, m in enumerate(markers)}

    base = {}
    order = []
    for row in rows:
        sid = row[schema.id_col]
        if sid in base:
            raise ValidationError(f"duplicate subject id {sid!r}")
        x = [_parse_float(row[c], f"feature {c} of {sid}") for c in features]
        T = _parse_float(row[schema.time_col], f"T of {sid}")
        if T < 0:
            raise ValidationError(f"subject {sid}: T < 0")
        d = row[schema.event_col].strip()
        if d not in ("0", "1"):
            raise ValidationError(f"subject {sid}: delta must be 0 or 1, got {d!r}")
        base[sid] = (x, T, d == "1")
        order.append(sid)

    obs = {sid: [[] for _ in markers] for sid in order}
    with open(longitudinal_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.id_col, schema.marker_col, schema.obs_time_col, schema.value_col):
            if col not in header:
                raise ValidationError(f"longitudinal file lacks column {col!r}")
        for row in reader:
            sid = row[schema.id_col]
            if sid not in obs:
                raise ValidationError(f"unknown subject id {sid!r} in longitudinal file")
            name = row[schema.marker_col]
            if name not in marker_index:
                raise ValidationError(f"marker {name!r} not in manifest")
            t = _parse_float(row[schema.obs_time_col], f"time of {sid}")
            v = _parse_float(row[schema.value_col], f"value of {sid}")
            if t > base[sid][1]:
                raise ValidationError(f"subject {sid}: observation time {t!r} > T")
            obs[sid][marker_index[name]].append((t, v))

    subjects = []
    for sid in order:
        series = []
        for ell, pts in enumerate(obs[sid]):
            pts.sort(key=lambda tv: tv[0])
            times = np.array([tv[0] for tv in pts], dtype=float)
            if times.size > 1 and np.any(np.diff(times) == 0):
                raise ValidationError(
                    f"subject {sid}: duplicate observation times for marker {markers[ell]!r}")
            series.append(MarkerSeries(times, np.array([tv[1] for tv in pts], dtype=float)))
        x, T, d = base[sid]
        subjects.append(SubjectRecord(sid, np.array(x), tuple(series), T, d))
    return Cohort(tuple(subjects), markers, features)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_cohort(cohort: Cohort, subjects_file, longitudinal_file) -> None:
    """Write a cohort as the two CSV files read by `load_cohort`."""
    with open(subjects_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *cohort.feature_names, "T", "delta"])
        for s in cohort.subjects:
            w.writerow([s.id, *map(_fmt, s.x), _fmt(s.event_time), int(s.event_indicator)])
    with open(longitudinal_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "marker", "time", "value"])
        for s in cohort.subjects:
            for name, m in zip(cohort.marker_names, s.markers):
                for t, v in zip(m.times, m.values):
                    w.writerow([s.id, name, _fmt(t), _fmt(v)])


def cohort_to_dict(cohort: Cohort) -> dict:
    return {
        "marker_names": list(cohort.marker_names),
        "feature_names": list(cohort.feature_names),
        "subjects": [
            {"id": s.id, "x": s.x.tolist(), "T": s.event_time, "delta": int(s.event_indicator),
             "markers": [{"times": m.times.tolist(), "values": m.values.tolist()}
                         for m in s.markers]}
            for s in cohort.subjects
        ],
    }


def cohort_from_dict(d: dict) -> Cohort:
    subjects = [
        SubjectRecord(s["id"], np.array(s["x"], dtype=float),
                      tuple(MarkerSeries(np.array(m["times"], dtype=float),
                                         np.array(m["values"], dtype=float))
                            for m in s["markers"]),
                      s["T"], bool(s["delta"]))
        for s in d["subjects"]
    ]
    return Cohort(tuple(subjects), tuple(d["marker_names"]), tuple(d["feature_names"]))
