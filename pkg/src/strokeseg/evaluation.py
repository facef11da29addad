"""Dice scoring on reassembled volumes, cross-validation aggregation and the results table."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import CORE, PENUMBRA, Case, extract_slices
from .errors import ShapeError, ShapeMismatch

TABLE_TAGS = ("BL1", "BL2", "BL3", "BL4", "BL5", "BL6", "BL7", "PROPOSED")
_COLUMN_NAMES = {"PROPOSED": "Proposed"}
MISSING = "—"


def dice(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch({"pred": pred.shape, "gt": gt.shape})
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


@dataclass
class DiceScores:
    case_id: str
    penumbra: float
    core: float

    @property
    def mean(self):
        return 0.5 * (self.penumbra + self.core)


@torch.no_grad()
def predict_case(segmenter, case: Case, pad_to_multiple: int = 32, batch_size: int = 4) -> np.ndarray:
    """Per-slice argmax label volume with padding cropped, shaped like the case.

    ``segmenter`` is a network, or any callable mapping a Case to a label volume.
    """
    if not isinstance(segmenter, torch.nn.Module):
        out = np.asarray(segmenter(case))
        if out.shape != case.shape:
            raise ShapeError(f"predictor returned {out.shape}, case is {case.shape}")
        return out.astype(np.uint8)
    was_training = segmenter.training
    segmenter.eval()
    samples = extract_slices(case, pad_to_multiple)
    device = next(segmenter.parameters()).device
    out = np.zeros(case.shape, dtype=np.uint8)
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = torch.from_numpy(np.stack([s.input for s in chunk])).to(device)
            pred = segmenter(x).argmax(dim=1).cpu().numpy()
            for s, p in zip(chunk, pred):
                out[s.slice_index] = s.crop(p)
    finally:
        segmenter.train(was_training)
    return out


def score_case(pred: np.ndarray, case: Case, inclusive_penumbra: bool = False) -> DiceScores:
    labels = case.labels()
    if pred.shape != labels.shape:
        raise ShapeMismatch({"pred": pred.shape, "labels": labels.shape})
    if inclusive_penumbra:
        pen = dice(pred >= PENUMBRA, case.penumbra_mask.data > 0.5)
    else:
        pen = dice(pred == PENUMBRA, labels == PENUMBRA)
    return DiceScores(case.case_id, pen, dice(pred == CORE, labels == CORE))


def evaluate_fold(segmenter, held_out_cases, inclusive_penumbra: bool = False,
                  pad_to_multiple: int = 32) -> list:
    return [score_case(predict_case(segmenter, c, pad_to_multiple), c, inclusive_penumbra)
            for c in held_out_cases]


def mean_scores(scores, label="mean") -> DiceScores:
    if not scores:
        raise ValueError("no scores to average")
    return DiceScores(label, float(np.mean([s.penumbra for s in scores])),
                      float(np.mean([s.core for s in scores])))


@dataclass
class CvReport:
    ablation: str
    fold_means: list
    grand_mean: DiceScores
    per_case: list = field(default_factory=list)

    @classmethod
    def from_folds(cls, ablation, fold_scores):
        """``fold_scores``: one list of per-case DiceScores per fold."""
        fold_means = [mean_scores(s, f"fold{i}") for i, s in enumerate(fold_scores)]
        grand = DiceScores("grand_mean",
                           float(np.mean([f.penumbra for f in fold_means])),
                           float(np.mean([f.core for f in fold_means])))
        return cls(ablation, fold_means, grand, [s for f in fold_scores for s in f])

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(
            ablation=obj["ablation"],
            fold_means=[DiceScores(**f) for f in obj["fold_means"]],
            grand_mean=DiceScores(**obj["grand_mean"]),
            per_case=[DiceScores(**c) for c in obj.get("per_case", [])],
        )


def dump_reports(reports, path):
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2)
        fh.write("\n")


def load_reports(path):
    with open(path) as fh:
        obj = json.load(fh)
    if isinstance(obj, dict):
        obj = [obj]
    return [CvReport.from_json(o) for o in obj]


def render_table(reports) -> str:
    """Markdown grid with one column per ablation tag and Penumbra/Core rows."""
    if not reports:
        raise ValueError("render_table needs at least one report")
    by_tag = {r.ablation.upper(): r for r in reports}
    header = "|          | " + " | ".join(_COLUMN_NAMES.get(t, t) for t in TABLE_TAGS) + " |"
    rule = "|" + "|".join(["---"] * (len(TABLE_TAGS) + 1)) + "|"
    rows = [header, rule]
    for name, attr in (("Penumbra", "penumbra"), ("Core", "core")):
        cells = []
        for tag in TABLE_TAGS:
            r = by_tag.get(tag)
            cells.append(MISSING if r is None else f"{getattr(r.grand_mean, attr):.3f}")
        rows.append(f"| {name:<8} | " + " | ".join(cells) + " |")
    return "\n".join(rows) + "\n"
