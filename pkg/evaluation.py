"""
Detection metrics and robustness reports.

Sections
--------
Counts and rates      : ConfusionCounts, confusion, tnr, tpr, f1
Drift                 : aut, f1_by_round
Tuning objective      : objective_j
Model similarity      : pearson_logits
Reports               : RobustnessReport, assemble_report, render_table
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import pearsonr

from features import LabeledDataset
from utils import J_BUDGETS, REPORT_VERSION, DataError

logger = logging.getLogger(__name__)


class UndefinedRateWarning(UserWarning):
    """A rate whose denominator is zero; the rate is reported as 0."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predicted: Sequence[int], true: Sequence[int]) -> ConfusionCounts:
    """Counts with malware (1) as the positive class."""
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if predicted.shape != true.shape:
        raise DataError(f"length mismatch: {predicted.shape[0]} predictions, {true.shape[0]} labels")
    for name, values in (("predicted", predicted), ("true", true)):
        if values.size and not np.isin(values, (0, 1)).all():
            raise DataError(f"{name} labels must be binary")
    return ConfusionCounts(
        tp=int(np.sum((predicted == 1) & (true == 1))),
        fp=int(np.sum((predicted == 1) & (true == 0))),
        tn=int(np.sum((predicted == 0) & (true == 0))),
        fn=int(np.sum((predicted == 0) & (true == 1))),
    )


def _rate(numerator: int, denominator: int, name: str) -> float:
    if denominator == 0:
        logger.warning("%s undefined (zero denominator), reporting 0", name)
        warnings.warn(f"{name} has a zero denominator; reported as 0", UndefinedRateWarning, stacklevel=3)
        return 0.0
    return numerator / denominator


def tnr(counts: ConfusionCounts) -> float:
    return _rate(counts.tn, counts.tn + counts.fp, "TNR")


def tpr(counts: ConfusionCounts) -> float:
    return _rate(counts.tp, counts.tp + counts.fn, "TPR")


def f1(counts: ConfusionCounts) -> float:
    return _rate(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, "F1")


# ── Drift ───────────────────────────────────────────────────────────────────

def aut(scores: Sequence[float]) -> float:
    """Trapezoidal area-under-time of per-round scores, normalised to [0, 1]."""
    values = np.asarray(scores, dtype=np.float64)
    if values.shape[0] < 2:
        raise DataError("AUT needs at least 2 rounds")
    return float(np.sum((values[:-1] + values[1:]) / 2.0) / (values.shape[0] - 1))


def f1_by_round(system, dataset: LabeledDataset) -> List[float]:
    """F1 of *system* on each round of a round-tagged dataset, in round order."""
    if dataset.rounds is None:
        raise DataError("dataset carries no round tags")
    hard = dataset.hard_labels()
    by_round: Dict[int, List[int]] = {}
    for position, tag in enumerate(dataset.rounds):
        if tag is not None:
            by_round.setdefault(tag, []).append(position)
    scores = []
    for tag in sorted(by_round):
        rows = by_round[tag]
        predicted = [int(system.label(dataset.samples[i])) for i in rows]
        scores.append(f1(confusion(predicted, hard[rows])))
    return scores


# ── Objective ───────────────────────────────────────────────────────────────

def objective_j(tnr_value: float, tpr_clean: float, tpr_25: float, tpr_50: float, tpr_100: float) -> float:
    """
    max(0, (TNR - 0.95) / 0.05) times the geometric mean of the four TPRs.
    Any zero TPR zeroes the objective.
    """
    rates = (tnr_value, tpr_clean, tpr_25, tpr_50, tpr_100)
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise DataError(f"rates must lie in [0, 1], got {rates}")
    # (1 - 0.95) / 0.05 rounds above 1 in binary floating point
    hinge = min(1.0, max(0.0, (tnr_value - 0.95) / 0.05))
    if hinge == 0.0:
        return 0.0
    product = tpr_clean * tpr_25 * tpr_50 * tpr_100
    if product == 0.0:
        return 0.0
    return hinge * product ** 0.25


# ── Similarity ──────────────────────────────────────────────────────────────

def pearson_logits(model_a, model_b, dataset) -> float:
    """Pearson correlation of the two models' logits over the same samples."""
    samples = dataset.samples if isinstance(dataset, LabeledDataset) else list(dataset)
    if len(samples) < 2:
        raise DataError("logit correlation needs at least 2 samples")
    logits_a = np.asarray(model_a.logits(samples), dtype=np.float64)
    logits_b = np.asarray(model_b.logits(samples), dtype=np.float64)
    if np.ptp(logits_a) == 0.0 or np.ptp(logits_b) == 0.0:
        raise DataError("logit correlation is undefined for a constant logit sequence")
    result = pearsonr(logits_a, logits_b)
    return float(result[0])


# ── Reports ─────────────────────────────────────────────────────────────────

class RobustnessReport(BaseModel):
    """Machine-readable experiment summary; ``None`` marks an absent field."""

    version: int = REPORT_VERSION
    tnr: float = Field(ge=0.0, le=1.0)
    tpr_clean: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    tpr_fsa: Dict[int, Optional[float]] = Field(default_factory=dict)
    j: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    rho: Dict[str, float] = Field(default_factory=dict)
    aut: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    anomaly_polarity: Optional[str] = None
    warnings: List[str] = Field(default_factory=list)


def assemble_report(system, test_set: LabeledDataset, attack_summary=None,
                    rho: Optional[Mapping[str, float]] = None,
                    anomaly_polarity: Optional[str] = None,
                    budgets: Iterable[int] = J_BUDGETS) -> RobustnessReport:
    """
    Evaluate *system* on the clean test set and fold in attack results.

    ``attack_summary`` needs a ``tpr`` mapping budget -> TPR under attack.
    Budgets with no attack result are reported as null; J is only computed
    when every budget it needs is present.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedRateWarning)
        predicted = [int(system.label(x)) for x in test_set.samples]
        counts = confusion(predicted, test_set.hard_labels())
        tnr_value, tpr_value, f1_value = tnr(counts), tpr(counts), f1(counts)

        attacked: Mapping[int, float] = {} if attack_summary is None else attack_summary.tpr
        wanted = sorted(set(budgets) | {b for b in attacked if b > 0})
        tpr_fsa = {b: (float(attacked[b]) if b in attacked else None) for b in wanted}

        j_value = None
        if all(tpr_fsa.get(b) is not None for b in J_BUDGETS):
            j_value = objective_j(tnr_value, tpr_value, *(tpr_fsa[b] for b in J_BUDGETS))

        aut_value = None
        if test_set.rounds is not None and len({r for r in test_set.rounds if r is not None}) >= 2:
            aut_value = aut(f1_by_round(system, test_set))

    notes = sorted({str(w.message) for w in caught if issubclass(w.category, UndefinedRateWarning)})
    report = RobustnessReport(
        tnr=tnr_value,
        tpr_clean=tpr_value,
        f1=f1_value,
        tpr_fsa=tpr_fsa,
        j=j_value,
        rho=dict(rho or {}),
        aut=aut_value,
        anomaly_polarity=anomaly_polarity,
        warnings=notes,
    )
    logger.info("Report: tnr=%.4f tpr=%.4f f1=%.4f j=%s", report.tnr, report.tpr_clean, report.f1, report.j)
    return report


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.4f}"


def render_table(report: RobustnessReport) -> str:
    """Aligned two-column plain-text rendering of *report*."""
    rows = [("TNR", _fmt(report.tnr)), ("TPR clean", _fmt(report.tpr_clean)), ("F1", _fmt(report.f1))]
    rows += [(f"TPR {budget}-FSA", _fmt(value)) for budget, value in sorted(report.tpr_fsa.items())]
    rows.append(("J", _fmt(report.j)))
    rows += [(f"rho {name}", _fmt(value)) for name, value in sorted(report.rho.items())]
    rows.append(("AUT", _fmt(report.aut)))
    if report.anomaly_polarity:
        rows.append(("a(x) polarity", report.anomaly_polarity))
    width = max(len(name) for name, _ in rows)
    lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  ------"]
    lines += [f"{name.ljust(width)}  {value}" for name, value in rows]
    return "\n".join(lines) + "\n"
