"""Overlap (Dice / IoU) and boundary (HD95) metrics, plus per-dataset aggregation.

All scores are percentages; distances are in millimetres given a pixel spacing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

BOTH_EMPTY = "both_empty"
PRED_EMPTY = "pred_empty"
GT_EMPTY = "gt_empty"
_PAIR_BLOCK = 1 << 22  # pairwise distances evaluated in blocks of this many entries


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def empty_flag(pred_any: bool, gt_any: bool) -> str | None:
    if pred_any and gt_any:
        return None
    if not pred_any and not gt_any:
        return BOTH_EMPTY
    return PRED_EMPTY if not pred_any else GT_EMPTY


def overlap_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict[int, dict]:
    """Dice and IoU (percent) for every foreground class 1..num_classes-1.

    Returns {class_id: {"dice", "iou", "support", "flag"}} where flag is None,
    "both_empty" (scores 100) or "pred_empty"/"gt_empty" (scores 0).
    """
    pred, gt = _check_pair(pred, gt)
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} has class ids outside [0, {num_classes})")
    out = {}
    for c in range(1, num_classes):
        a = pred == c
        b = gt == c
        na, nb = int(a.sum()), int(b.sum())
        inter = int(np.logical_and(a, b).sum())
        flag = empty_flag(na > 0, nb > 0)
        if flag == BOTH_EMPTY:
            dice = iou = 100.0
        else:
            dice = 100.0 * 2 * inter / (na + nb)
            iou = 100.0 * inter / (na + nb - inter)
        out[c] = {"dice": dice, "iou": iou, "support": nb, "flag": flag}
    return out


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """(K, 2) row/col coordinates of foreground pixels with a background (or
    out-of-image) 4-neighbour, in row-major order."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"extract_boundary expects a 2-D mask, got {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return np.argwhere(m & ~interior)


def image_diagonal_mm(shape, spacing=(1.0, 1.0)) -> float:
    return float(np.hypot(shape[0] * spacing[0], shape[1] * spacing[1]))


def nearest_rank(sorted_values: np.ndarray, q: float = 95.0) -> float:
    """Nearest-rank percentile: 1-based index ceil(q/100 * n)."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of an empty set")
    q100 = int(round(q * 100))  # exact integer arithmetic for ceil
    k = max(1, (q100 * n + 9999) // 10000)
    return float(sorted_values[k - 1])


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0)) -> np.ndarray:
    """For every point in src, the Euclidean distance (mm) to its nearest point in dst."""
    s = np.asarray(src, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    d = np.asarray(dst, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    out = np.empty(len(s))
    step = max(1, _PAIR_BLOCK // max(1, len(d)))
    for i in range(0, len(s), step):
        blk = s[i:i + step]
        d2 = (blk[:, None, 0] - d[None, :, 0]) ** 2 + (blk[:, None, 1] - d[None, :, 1]) ** 2
        out[i:i + step] = np.sqrt(d2.min(axis=1))
    return out


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0),
         penalty: float | None = None) -> tuple[float, str | None]:
    """95th-percentile symmetric boundary distance between two binary masks.

    Returns (distance_mm, flag). Both empty -> (0, "both_empty"); exactly one
    empty -> (penalty, flag) with the image diagonal as the default penalty.
    """
    pred, gt = _check_pair(pred, gt)
    if min(spacing) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    pred, gt = pred.astype(bool), gt.astype(bool)
    flag = empty_flag(bool(pred.any()), bool(gt.any()))
    if flag == BOTH_EMPTY:
        return 0.0, flag
    if flag is not None:
        return (image_diagonal_mm(pred.shape, spacing) if penalty is None else float(penalty)), flag
    ba, bb = extract_boundary(pred), extract_boundary(gt)
    d_ab = np.sort(directed_distances(ba, bb, spacing))
    d_ba = np.sort(directed_distances(bb, ba, spacing))
    return max(nearest_rank(d_ab), nearest_rank(d_ba)), None


def case_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                 spacing=(1.0, 1.0)) -> dict[int, dict]:
    """Overlap metrics plus hd95 for every foreground class of one case."""
    res = overlap_metrics(pred, gt, num_classes)
    for c, r in res.items():
        r["hd95"], _ = hd95(pred == c, gt == c, spacing)
    return res


@dataclass
class MetricsReport:
    """Per-class scores averaged over cases, then means over foreground classes."""
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    cases: list[dict] = field(default_factory=list)  # {"id", "per_class": case_metrics()}

    def add_case(self, case_id: str, per_class: dict[int, dict]) -> None:
        self.cases.append({"id": case_id, "per_class": per_class})

    def _name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else f"class_{c}"

    def per_class(self) -> list[dict]:
        rows = []
        for c in range(1, self.num_classes):
            recs = [case["per_class"][c] for case in self.cases]
            flags: dict[str, int] = {}
            for r in recs:
                if r["flag"] is not None:
                    flags[r["flag"]] = flags.get(r["flag"], 0) + 1
            n = len(recs)
            rows.append({
                "id": c,
                "name": self._name(c),
                "dice": float(sum(r["dice"] for r in recs) / n) if n else None,
                "hd95": float(sum(r["hd95"] for r in recs) / n) if n else None,
                "iou": float(sum(r["iou"] for r in recs) / n) if n else None,
                "support": int(sum(r["support"] for r in recs)),
                "flags": flags,
            })
        return rows

    def to_dict(self) -> dict:
        rows = self.per_class()
        mean = {}
        for key in ("dice", "hd95", "iou"):
            vals = [r[key] for r in rows if r[key] is not None]
            mean[key] = float(sum(vals) / len(vals)) if vals else None
        return {"per_class": rows, "mean": mean, "n_cases": len(self.cases)}

    @property
    def mean_dice(self) -> float | None:
        return self.to_dict()["mean"]["dice"]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def case_rows(self) -> list[list]:
        """Flat rows (case, class id, dice, iou, hd95, support, flag) for CSV export."""
        rows = []
        for case in self.cases:
            for c in range(1, self.num_classes):
                r = case["per_class"][c]
                rows.append([case["id"], c, r["dice"], r["iou"], r["hd95"], r["support"],
                             r["flag"] or ""])
        return rows
