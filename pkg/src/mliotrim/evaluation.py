"""Experiment protocols: chronological splits, F1 scoring and the study runners.

F1 treats NON_ESSENTIAL as the positive class (the thing to detect and
block); every row also carries the essential-class F1.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import Label
from .features import FeatureTable, NormalizationProfile, fit_normalization, normalize
from .models import ForestConfig, MlpConfig, scores, train_forest, train_mlp

logger = logging.getLogger(__name__)

DAY = 86400


class SplitMode(str, enum.Enum):
    RATIO_TIME = "ratio_time"
    FIRST_DAYS_TRAIN = "first_days_train"
    ALL_VS_ONE = "all_vs_one"


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = SplitMode.RATIO_TIME
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    train_days: Optional[int] = None
    held_out_device: Optional[str] = None

    def __post_init__(self):
        if not math.isclose(sum(self.ratios), 1.0):
            raise ValueError("split ratios must sum to 1")


def day_index(table: FeatureTable, origin: Optional[int] = None) -> np.ndarray:
    """Day number of each row, counted from midnight (UTC) of the earliest window."""
    if origin is None:
        origin = int(table.window_start.min()) // DAY * DAY if len(table) else 0
    return (table.window_start - origin) // DAY


def _ratio_split(table: FeatureTable, ratios) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c1 = Fraction(ratios[0]).limit_denominator(10**6)
    c2 = c1 + Fraction(ratios[1]).limit_denominator(10**6)
    train, val, test = [], [], []
    for dev in table.devices():
        rows = np.flatnonzero(table.device == dev)
        rows = rows[np.argsort(table.window_start[rows], kind="stable")]
        n = len(rows)
        if n < 3:
            logger.warning("device %s has %d samples; all go to train", dev, n)
            train.append(rows)
            continue
        # ceil keeps the boundary sample in the earlier split
        a = math.ceil(c1 * n)
        b = math.ceil(c2 * n)
        train.append(rows[:a])
        val.append(rows[a:b])
        test.append(rows[b:])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return cat(train), cat(val), cat(test)


def split_indices(table: FeatureTable, spec: SplitSpec = SplitSpec()):
    if spec.mode is SplitMode.RATIO_TIME:
        return _ratio_split(table, spec.ratios)
    empty = np.zeros(0, dtype=np.int64)
    if spec.mode is SplitMode.FIRST_DAYS_TRAIN:
        if spec.train_days is None:
            raise ValueError("FIRST_DAYS_TRAIN needs train_days")
        days = day_index(table)
        return np.flatnonzero(days < spec.train_days), empty, np.flatnonzero(days >= spec.train_days)
    if spec.held_out_device not in set(table.device.tolist()):
        raise ExperimentError(f"unknown device {spec.held_out_device!r}")
    held = table.device == spec.held_out_device
    return np.flatnonzero(~held), empty, np.flatnonzero(held)


def split_time_oriented(table: FeatureTable, spec: SplitSpec = SplitSpec()):
    """``(train, val, test)`` feature tables; chronological per device."""
    return tuple(table.subset(idx) for idx in split_indices(table, spec))


# --------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class Confusion:
    """Counts with NON_ESSENTIAL as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_labels(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "Confusion":
        t = np.asarray(y_true) == Label.NON_ESSENTIAL.target
        p = np.asarray(y_pred) == Label.NON_ESSENTIAL.target
        return cls(int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum()))

    def __add__(self, o: "Confusion") -> "Confusion":
        return Confusion(self.tp + o.tp, self.fp + o.fp, self.fn + o.fn, self.tn + o.tn)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n if self.n else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self)

    @property
    def f1_essential(self) -> float:
        return f1_score(Confusion(self.tn, self.fn, self.fp, self.tp))


def f1_score(c: Confusion) -> float:
    p, r = c.precision, c.recall
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ScopeResult:
    scope: str  # "global" | "device"
    confusion: Confusion
    device: str = ""
    chunk: Optional[int] = None

    @property
    def f1(self) -> float:
        return self.confusion.f1


@dataclass
class EvalReport:
    experiment: str
    model_kind: str
    window: int
    rows: list[ScopeResult] = field(default_factory=list)
    chunk: Optional[int] = None
    flags: dict = field(default_factory=dict)

    @property
    def global_result(self) -> ScopeResult:
        return next(r for r in self.rows if r.scope == "global")

    @property
    def f1(self) -> float:
        """Micro F1 over all evaluated rows."""
        return self.global_result.f1

    @property
    def macro_f1(self) -> float:
        per = [r.f1 for r in self.rows if r.scope == "device"]
        return float(np.mean(per)) if per else 0.0

    @property
    def accuracy(self) -> float:
        return self.global_result.confusion.accuracy

    def device_results(self) -> dict[str, ScopeResult]:
        return {r.device: r for r in self.rows if r.scope == "device"}


# --------------------------------------------------------------------------
# training helpers


def fit_profiles(table: FeatureTable) -> dict[str, NormalizationProfile]:
    return {d: fit_normalization(table.X[table.device == d], d) for d in table.devices()}


def normalized_matrix(table: FeatureTable, profiles: dict[str, NormalizationProfile]) -> np.ndarray:
    out = np.empty_like(table.X)
    for d in table.devices():
        m = table.device == d
        if d not in profiles:
            raise ExperimentError(f"no normalization profile for device {d}")
        out[m] = normalize(table.X[m], profiles[d])
    return out


def train_model(
    train: FeatureTable,
    model_kind: str = "rf",
    seed: int = 0,
    val: Optional[FeatureTable] = None,
    forest_config: Optional[ForestConfig] = None,
    mlp_config: Optional[MlpConfig] = None,
    profiles: Optional[dict[str, NormalizationProfile]] = None,
):
    """Fit per-device profiles on ``train`` and train the requested model.

    The fitted profiles travel with the model (``model.profiles``).
    """
    profiles = fit_profiles(train) if profiles is None else profiles
    X = normalized_matrix(train, profiles)
    y = train.label
    if model_kind in ("rf", "forest"):
        cfg = forest_config or ForestConfig(seed=seed)
        model = train_forest(X, y, cfg)
    elif model_kind in ("ann", "mlp"):
        cfg = mlp_config or MlpConfig(seed=seed)
        Xv = yv = None
        if val is not None and len(val):
            Xv, yv = normalized_matrix(val, {**fit_profiles(val), **profiles}), val.label
        model = train_mlp(X, y, cfg, Xv, yv)
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    model.profiles = dict(profiles)
    return model


def predict_table(model, table: FeatureTable, profiles=None) -> np.ndarray:
    """Hard labels (1 essential) for every row."""
    if not len(table):
        return np.zeros(0, dtype=np.int8)
    X = normalized_matrix(table, model.profiles if profiles is None else profiles)
    return (scores(model, X) > 0.5).astype(np.int8)


def _report(experiment, kind, window, table, pred, chunk=None) -> EvalReport:
    rep = EvalReport(experiment, kind, window, chunk=chunk)
    total = Confusion()
    for d in table.devices():
        m = table.device == d
        c = Confusion.from_labels(table.label[m], pred[m])
        rep.rows.append(ScopeResult("device", c, d, chunk))
        total = total + c
    rep.rows.insert(0, ScopeResult("global", total, "", chunk))
    return rep


def _kind_name(model_kind: str) -> str:
    return "rf" if model_kind in ("rf", "forest") else "ann"


def _check_dataset(table: FeatureTable, window: Optional[int] = None) -> FeatureTable:
    if not table.labeled:
        raise ExperimentError("evaluation needs a fully labeled feature table")
    if window is not None:
        table = table.subset(table.window_len == window)
        if not len(table):
            raise ExperimentError(f"no rows with window length {window}")
    return table


# --------------------------------------------------------------------------
# experiments


def run_global_experiment(
    table: FeatureTable, w: int = 60, model_kind: str = "rf", seed: int = 0, **train_kwargs
) -> EvalReport:
    """70/15/15 chronological split per device; report on the test split."""
    table = _check_dataset(table, w)
    train, val, test = split_time_oriented(table, SplitSpec())
    model = train_model(train, model_kind, seed, val=val, **train_kwargs)
    rep = _report("global", _kind_name(model_kind), w, test, predict_table(model, test))
    rep.flags.update(train_rows=len(train), val_rows=len(val), test_rows=len(test))
    return rep


def run_temporal_experiment(
    table: FeatureTable,
    train_days: int = 30,
    chunk_days: int = 5,
    model_kind: str = "rf",
    seed: int = 0,
    **train_kwargs,
) -> list[EvalReport]:
    """Train on the first ``train_days``; one report per later ``chunk_days`` block."""
    table = _check_dataset(table)
    days = day_index(table)
    total_days = int(days.max()) + 1
    if total_days <= train_days:
        raise ExperimentError(f"dataset spans {total_days} days, need more than {train_days}")
    train = table.subset(days < train_days)
    model = train_model(train, model_kind, seed, **train_kwargs)
    window = int(table.window_len[0])
    reports = []
    n_chunks = math.ceil((total_days - train_days) / chunk_days)
    for c in range(n_chunks):
        lo = train_days + c * chunk_days
        sel = table.subset((days >= lo) & (days < lo + chunk_days))
        rep = _report("temporal", _kind_name(model_kind), window, sel, predict_table(model, sel), chunk=c)
        rep.flags.update(first_day=lo, last_day=min(lo + chunk_days, total_days) - 1)
        reports.append(rep)
    return reports


def run_unseen_destination_experiment(
    table: FeatureTable, train_days: int = 15, model_kind: str = "rf", seed: int = 0, **train_kwargs
) -> EvalReport:
    """Evaluate only on (device, destination) pairs absent from the training days."""
    table = _check_dataset(table)
    days = day_index(table)
    train = table.subset(days < train_days)
    seen = set(zip(train.device.tolist(), train.destination.tolist()))
    later = days >= train_days
    fresh = np.array([(d, k) not in seen for d, k in zip(table.device, table.destination)], dtype=bool)
    evaluation = table.subset(later & fresh)
    if not len(evaluation):
        raise ExperimentError("experiment vacuous: every evaluation destination appears in training")
    model = train_model(train, model_kind, seed, **train_kwargs)
    window = int(table.window_len[0])
    rep = _report("unseen", _kind_name(model_kind), window, evaluation, predict_table(model, evaluation))
    eval_keys = sorted(set(zip(evaluation.device.tolist(), evaluation.destination.tolist())))
    rep.flags.update(
        train_keys=sorted(seen),
        eval_keys=eval_keys,
        shared_keys=len(seen & set(eval_keys)),
        unseen_destinations=len(eval_keys),
    )
    return rep


def run_all_vs_one(
    table: FeatureTable, held_out_device: str, model_kind: str = "rf", seed: int = 0, **train_kwargs
) -> EvalReport:
    """Train on every other device, test on ``held_out_device``.

    The held-out device has no training data, so its normalization profile
    is fitted on its own evaluation rows (flagged in the report).
    """
    table = _check_dataset(table)
    train, _, test = split_time_oriented(table, SplitSpec(SplitMode.ALL_VS_ONE, held_out_device=held_out_device))
    if not len(train):
        raise ExperimentError("all-vs-one needs at least two devices")
    model = train_model(train, model_kind, seed, **train_kwargs)
    profiles = {**model.profiles, held_out_device: fit_normalization(test.X, held_out_device)}
    window = int(table.window_len[0])
    rep = _report("all-vs-one", _kind_name(model_kind), window, test, predict_table(model, test, profiles))
    rep.flags.update(held_out=held_out_device, held_out_profile="fitted on evaluation data")
    return rep


# --------------------------------------------------------------------------
# output

REPORT_COLUMNS = (
    "experiment",
    "model",
    "window",
    "scope",
    "device",
    "chunk",
    "n",
    "tp",
    "fp",
    "fn",
    "tn",
    "precision",
    "recall",
    "f1",
    "f1_essential",
    "accuracy",
    "macro_f1",
)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_reports_csv(path: str | os.PathLike, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for r in rep.rows:
                c = r.confusion
                w.writerow(
                    [
                        rep.experiment,
                        rep.model_kind,
                        rep.window,
                        r.scope,
                        r.device,
                        "" if r.chunk is None else r.chunk,
                        c.n,
                        c.tp,
                        c.fp,
                        c.fn,
                        c.tn,
                        _fmt(c.precision),
                        _fmt(c.recall),
                        _fmt(c.f1),
                        _fmt(c.f1_essential),
                        _fmt(c.accuracy),
                        _fmt(rep.macro_f1) if r.scope == "global" else "",
                    ]
                )


def write_plot_series(path: str | os.PathLike, reports: Sequence[EvalReport]) -> None:
    """``series,index,f1`` rows: one series per device (and ``global``)."""
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["series", "index", "f1"])
        for i, rep in enumerate(reports):
            idx = rep.chunk if rep.chunk is not None else i
            for r in rep.rows:
                w.writerow([r.device or "global", idx, _fmt(r.f1)])


def summary_text(reports: Sequence[EvalReport]) -> str:
    lines = []
    for rep in reports:
        head = f"{rep.experiment} model={rep.model_kind} w={rep.window}s"
        if rep.chunk is not None:
            head += f" chunk={rep.chunk}"
        g = rep.global_result.confusion
        lines.append(
            f"{head}: F1(non-essential)={g.f1:.4f} macro={rep.macro_f1:.4f} "
            f"F1(essential)={g.f1_essential:.4f} acc={g.accuracy:.4f} n={g.n}"
        )
        for r in rep.rows:
            if r.scope == "device":
                lines.append(f"  {r.device:<12} F1={r.f1:.4f} n={r.confusion.n}")
    return "\n".join(lines) + "\n"
