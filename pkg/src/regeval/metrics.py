"""Overlap metrics and score-distribution trimming.

Dice is reported per label and as an unweighted macro mean. Labels absent
from both volumes are excluded from the mean rather than scored 1, so sparse
parcellations do not inflate results; a label present in exactly one volume
scores 0 and does count. A voxel-count-weighted mean is available by flag.

Trimming removes the lowest ceil(p/100 * n) scores. The count is computed
on a rounded product so that exact-percentage inputs (5% of 100) are not
bumped up by binary floating-point representation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError
from .volume import LabelVolume


@dataclass
class DiceRecord:
    """Per-label Dice scores for one registered pair."""

    pair_id: str
    per_label: dict = field(default_factory=dict)
    macro_mean: float = 0.0
    label_group: str = "all"


def dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    """Dice of two boolean masks; empty-vs-empty scores 1."""
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


def dice(a: LabelVolume, b: LabelVolume, label_group=None,
         group_name: str = "all", pair_id: str = "",
         volume_weighted: bool = False) -> DiceRecord:
    """Per-label and macro Dice between two labelmaps on the same grid.

    ``label_group`` restricts scoring to a subset of label codes;
    ``group_name`` is the tag recorded on the result. With
    ``volume_weighted`` the macro mean weights each label by its combined
    voxel count instead of uniformly.
    """
    if not a.header.same_grid(b.header):
        raise GridMismatchError(
            f"dice needs identical grids: {a.header.dims} vs {b.header.dims} "
            "or differing affines")
    present = set(a.label_set) | set(b.label_set)
    if label_group is not None:
        present &= {int(c) for c in label_group}

    per_label = {}
    weights = {}
    for code in sorted(present):
        ma = a.labels == code
        mb = b.labels == code
        per_label[int(code)] = dice_binary(ma, mb)
        weights[int(code)] = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))

    if not per_label:
        macro = float("nan")
    elif volume_weighted:
        total = sum(weights.values())
        macro = (sum(per_label[c] * weights[c] for c in per_label) / total
                 if total else float("nan"))
    else:
        macro = sum(per_label.values()) / len(per_label)
    return DiceRecord(pair_id=pair_id, per_label=per_label,
                      macro_mean=macro, label_group=group_name)


def trim_count(n: int, p: float) -> int:
    """Number of scores removed when trimming the bottom p percent of n."""
    # round before ceil: 5% of 100 must remove exactly 5, not 6
    return math.ceil(round(p * n / 100.0, 9))


def trim_lower_percentile(scores, p: float):
    """Drop the lowest ceil(p/100 * n) scores, keeping survivor order.

    Ties at the cut are resolved by removing the earliest-indexed
    duplicates first (stable sort), so the result is deterministic.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("cannot trim an empty score list")
    if not 0.0 <= p < 100.0:
        raise ValueError(f"trim percent must be in [0, 100), got {p}")
    k = trim_count(len(scores), p)
    if k == 0:
        return scores
    drop = set(np.argsort(scores, kind="stable")[:k].tolist())
    return [s for i, s in enumerate(scores) if i not in drop]
