"""Frame-level verdicts, head-to-head pairing of two methods, and P/R/AP metrics.

A frame holds at most one ground-truth box. Its verdict comes from the single
highest-confidence detection: above ``conf_thr`` it is a TP when it overlaps
the ground truth by more than ``iou_thr`` and an FP otherwise; with nothing
above ``conf_thr`` the frame is an FN if it has a ground truth, else a TN.
Both thresholds are strict.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hardmine.errors import DataError, DomainError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class Verdict(str, enum.Enum):
    TP = "TP"
    FP = "FP"
    TN = "TN"
    FN = "FN"


V = Verdict

# Row order of the published head-to-head tables: gains, losses, shared failures, shared successes.
TABLE_CATEGORIES = (
    (V.FN, V.TP),
    (V.FP, V.TN),
    (V.TP, V.FN),
    (V.TN, V.FP),
    (V.FP, V.FP),
    (V.FN, V.FN),
    (V.TP, V.TP),
)
GAINS = ((V.FN, V.TP), (V.FP, V.TN))
LOSSES = ((V.TP, V.FN), (V.TN, V.FP))


@dataclass(frozen=True)
class Detection:
    frame_id: int
    box: Tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise DomainError(f"detection box must have x1 < x2 and y1 < y2, got {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class FrameOutcome:
    frame_id: int
    verdict: Verdict


@dataclass(frozen=True)
class OutcomePair:
    frame_id: int
    m1: Verdict
    m2: Verdict

    @property
    def category(self) -> Tuple[Verdict, Verdict]:
        return (self.m1, self.m2)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if not (ax2 > ax1 and ay2 > ay1 and bx2 > bx1 and by2 > by1):
        raise DomainError(f"zero-area box in iou({a}, {b})")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def classify_frame(dets: Sequence[Detection], gt=None, conf_thr: float = 0.5, iou_thr: float = 0.5) -> FrameOutcome:
    frame_ids = {d.frame_id for d in dets}
    if len(frame_ids) > 1:
        raise DataError(f"detections from several frames: {sorted(frame_ids)}")
    frame_id = next(iter(frame_ids)) if frame_ids else -1
    best = max(dets, key=lambda d: d.confidence, default=None)
    if best is not None and best.confidence > conf_thr:
        if gt is not None and iou(best.box, gt) > iou_thr:
            return FrameOutcome(frame_id, V.TP)
        return FrameOutcome(frame_id, V.FP)
    return FrameOutcome(frame_id, V.FN if gt is not None else V.TN)


def group_by_frame(dets: Iterable[Detection]) -> Dict[int, List[Detection]]:
    out: Dict[int, List[Detection]] = {}
    for d in dets:
        out.setdefault(d.frame_id, []).append(d)
    return out


def classify_frames(dets: Iterable[Detection], gts: Mapping[int, Optional[tuple]], conf_thr=0.5, iou_thr=0.5) -> List[FrameOutcome]:
    """One verdict for every ground-truth frame id, in ascending id order."""
    by_frame = group_by_frame(dets)
    stray = set(by_frame) - set(gts)
    if stray:
        raise DataError(f"detections reference frames without ground truth: {sorted(stray)[:10]}")
    return [
        FrameOutcome(fid, classify_frame(by_frame.get(fid, []), gts[fid], conf_thr, iou_thr).verdict)
        for fid in sorted(gts)
    ]


def pair_outcomes(outcomes_m1: Sequence[FrameOutcome], outcomes_m2: Sequence[FrameOutcome]) -> List[OutcomePair]:
    a = {o.frame_id: o.verdict for o in outcomes_m1}
    b = {o.frame_id: o.verdict for o in outcomes_m2}
    if a.keys() != b.keys():
        only_a = sorted(a.keys() - b.keys())
        only_b = sorted(b.keys() - a.keys())
        raise DataError(f"frame sets differ: only in M1 {only_a[:10]}, only in M2 {only_b[:10]}")
    return [OutcomePair(fid, a[fid], b[fid]) for fid in sorted(a)]


def percent(count: int, total: int) -> float:
    """100 * count / total rounded half-up to two decimals."""
    q = (Decimal(100 * count) / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(q)


def _label(cat) -> str:
    return f"{cat[0].value}-{cat[1].value}"


@dataclass
class PairwiseReport:
    counts: Dict[Tuple[Verdict, Verdict], int]
    total: int
    m1_name: str = "M1"
    m2_name: str = "M2"

    def count(self, m1, m2) -> int:
        return self.counts.get((Verdict(m1), Verdict(m2)), 0)

    def percentage(self, m1, m2) -> float:
        return percent(self.count(m1, m2), self.total)

    @property
    def other(self) -> Dict[Tuple[Verdict, Verdict], int]:
        """Categories outside the seven published rows (TN-TN and residual pairs)."""
        return {k: v for k, v in sorted(self.counts.items(), key=lambda kv: _label(kv[0])) if k not in TABLE_CATEGORIES and v}

    @property
    def other_count(self) -> int:
        return sum(self.other.values())

    @property
    def gained(self) -> int:
        return sum(self.count(*c) for c in GAINS)

    @property
    def lost(self) -> int:
        return sum(self.count(*c) for c in LOSSES)

    @property
    def net_delta(self) -> int:
        """(FN->TP + FP->TN) - (TP->FN + TN->FP); positive favours M2."""
        return self.gained - self.lost

    @property
    def net_delta_percent(self) -> float:
        return float(
            (Decimal(100 * self.net_delta) / Decimal(self.total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
        )

    def rows(self) -> List[Tuple[str, str, int, float]]:
        rows = [(a.value, b.value, self.count(a, b), self.percentage(a, b)) for a, b in TABLE_CATEGORIES]
        if self.other_count:
            rows.append(("other", "", self.other_count, percent(self.other_count, self.total)))
        return rows

    def to_text(self) -> str:
        header = f"M1: {self.m1_name}, M2: {self.m2_name}"
        lines = [header, f"{'M1':<6}{'M2':<6}{'# Fr.':>8}{'Fr. %':>9}"]
        for a, b, n, pct in self.rows():
            lines.append(f"{a:<6}{b:<6}{n:>8d}{pct:>9.2f}")
        for cat, n in self.other.items():
            lines.append(f"  other {_label(cat)}: {n}")
        lines.append(f"total pairs: {self.total}")
        lines.append(f"net hard-example delta: {self.net_delta:+d} ({self.net_delta_percent:+.2f}%)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["m1", "m2", "count", "percent"])
        for a, b, n, pct in self.rows()[: len(TABLE_CATEGORIES)]:
            writer.writerow([a, b, n, f"{pct:.2f}"])
        for cat, n in self.other.items():
            writer.writerow([cat[0].value, cat[1].value, n, f"{percent(n, self.total):.2f}"])
        writer.writerow(["total", "", self.total, "100.00"])
        writer.writerow(["net_delta", "", self.net_delta, f"{self.net_delta_percent:.2f}"])
        return buf.getvalue()


def pairwise_report(pairs: Sequence[OutcomePair], m1_name: str = "M1", m2_name: str = "M2") -> PairwiseReport:
    if not pairs:
        raise DataError("pairwise_report needs at least one pair")
    counts = Counter(p.category for p in pairs)
    return PairwiseReport(dict(counts), len(pairs), m1_name, m2_name)


def report_from_counts(counts: Mapping[Tuple[str, str], int], m1_name="M1", m2_name="M2") -> PairwiseReport:
    """Rebuild a report from (m1, m2) -> count, e.g. a published table."""
    pairs = []
    fid = 0
    for (a, b), n in counts.items():
        for _ in range(int(n)):
            pairs.append(OutcomePair(fid, Verdict(a), Verdict(b)))
            fid += 1
    return pairwise_report(pairs, m1_name, m2_name)


def precision_recall(outcomes: Iterable[FrameOutcome]) -> Tuple[Optional[float], Optional[float]]:
    """Frame-level precision and recall; ``None`` where the denominator is zero."""
    c = Counter(o.verdict for o in outcomes)
    tp, fp, fn = c[V.TP], c[V.FP], c[V.FN]
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def rank_detections(dets: Iterable[Detection]) -> List[Detection]:
    """Descending confidence; ties keep input order."""
    return sorted(dets, key=lambda d: -d.confidence)


def average_precision(dets: Iterable[Detection], gts: Mapping[int, Optional[tuple]], iou_thr: float = 0.5) -> Optional[float]:
    """All-points interpolated AP for a single class; ``None`` without ground truth.

    A detection is a true positive when it is the first in rank order to reach
    ``iou >= iou_thr`` against its frame's (unmatched) ground-truth box.
    """
    n_gt = sum(1 for b in gts.values() if b is not None)
    if n_gt == 0:
        return None
    ranked = rank_detections(dets)
    if not ranked:
        return 0.0
    matched = set()
    hits = np.zeros(len(ranked))
    for i, d in enumerate(ranked):
        gt = gts.get(d.frame_id)
        if gt is None or d.frame_id in matched:
            continue
        if iou(d.box, gt) >= iou_thr:
            matched.add(d.frame_id)
            hits[i] = 1.0
    tp = np.cumsum(hits)
    recall = tp / n_gt
    precision = tp / np.arange(1, len(ranked) + 1)
    # precision envelope, then area under the step curve
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(dets, gts, thresholds: Sequence[float] = IOU_THRESHOLDS) -> Optional[float]:
    dets = list(dets)
    aps = [average_precision(dets, gts, t) for t in thresholds]
    if any(a is None for a in aps):
        return None
    return float(np.mean(aps))


@dataclass
class MetricsReport:
    """Precision, recall and AP values as fractions in [0, 1]; ``None`` if undefined."""

    precision: Optional[float]
    recall: Optional[float]
    map50: Optional[float]
    map50_95: Optional[float]
    name: str = ""
    counts: Dict[str, int] = field(default_factory=dict)

    def as_percent(self) -> Dict[str, Optional[float]]:
        f = lambda v: None if v is None else round(100.0 * v, 2)  # noqa: E731
        return {
            "precision": f(self.precision),
            "recall": f(self.recall),
            "map50": f(self.map50),
            "map50_95": f(self.map50_95),
        }

    def to_dict(self) -> dict:
        return {"name": self.name, **self.as_percent(), "counts": dict(self.counts)}


def evaluate_detections(dets, gts, conf_thr=0.5, iou_thr=0.5, name="") -> MetricsReport:
    dets = list(dets)
    outcomes = classify_frames(dets, gts, conf_thr, iou_thr)
    precision, recall = precision_recall(outcomes)
    c = Counter(o.verdict.value for o in outcomes)
    return MetricsReport(
        precision,
        recall,
        average_precision(dets, gts, 0.5),
        mean_ap(dets, gts),
        name=name,
        counts={k: c.get(k, 0) for k in ("TP", "FP", "TN", "FN")},
    )


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def metrics_table(reports: Sequence[MetricsReport]) -> str:
    width = max([len("Method")] + [len(r.name) for r in reports])
    lines = [f"{'Method':<{width}}  {'Prec.':>6}  {'Rec.':>6}  {'mAP.5':>6}  {'mAP.5:.95':>9}"]
    for r in reports:
        pct = r.as_percent()
        lines.append(
            f"{r.name:<{width}}  {_fmt(pct['precision']):>6}  {_fmt(pct['recall']):>6}  "
            f"{_fmt(pct['map50']):>6}  {_fmt(pct['map50_95']):>9}"
        )
    return "\n".join(lines)


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "precision", "recall", "map50", "map50_95", "tp", "fp", "tn", "fn"])
    for r in reports:
        pct = r.as_percent()
        writer.writerow(
            [r.name]
            + ["" if pct[k] is None else f"{pct[k]:.2f}" for k in ("precision", "recall", "map50", "map50_95")]
            + [r.counts.get(k, 0) for k in ("TP", "FP", "TN", "FN")]
        )
    return buf.getvalue()


# -- detection files ---------------------------------------------------------


def detection_to_json(d: Detection) -> dict:
    return {
        "frame_id": d.frame_id,
        "box": [round(float(v), 4) for v in d.box],
        "confidence": round(float(d.confidence), 6),
    }


def load_detections(path) -> List[Detection]:
    from hardmine.data import parse_box, read_jsonl

    out = []
    for i, rec in enumerate(read_jsonl(path), 1):
        try:
            fid = int(rec["frame_id"])
            conf = float(rec["confidence"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}: record {i} needs frame_id and confidence") from None
        box = parse_box(rec.get("box"), f"{path}: record {i}: ")
        if box is None:
            raise DataError(f"{path}: record {i} has no box")
        if not (math.isfinite(conf) and 0.0 <= conf <= 1.0):
            raise DataError(f"{path}: record {i} confidence {conf} outside [0, 1]")
        out.append(Detection(fid, box, conf))
    return out
