"""Dice evaluation of segmentations and registrations."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from atlasaug.exceptions import EvaluationError, ShapeMismatchError
from atlasaug.networks import RegistrationNet, SegmentationNet, register, segment
from atlasaug.volume import Atlas, LabelMap
from atlasaug.volume_io import read_volume
from atlasaug.warping import warp_labels, warp_volume

LOG = logging.getLogger(__name__)

LabelsLike = Union[LabelMap, torch.Tensor, np.ndarray]
# (image (1, 1, *spatial), labels (1, *spatial)) pairs
LabeledSubjects = Sequence[Tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class DiceResult:
    per_class: Dict[int, float]
    mean: float


@dataclass(frozen=True)
class SubjectRow:
    subject: str
    mean: float
    per_class: Dict[int, float]


@dataclass(frozen=True)
class EvalReport:
    """Dice over subjects: per-class means, and mean/std/min/max of the subject means."""

    per_class_dice: Dict[int, float]
    mean: float
    std: float
    min: float
    max: float
    per_subject: List[SubjectRow] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[SubjectRow]) -> "EvalReport":
        if not rows:
            return cls(per_class_dice={}, mean=0.0, std=0.0, min=0.0, max=0.0, per_subject=[])
        means = np.array([row.mean for row in rows], dtype=np.float64)
        classes = sorted({label for row in rows for label in row.per_class})
        per_class = {
            label: float(np.mean([row.per_class[label] for row in rows if label in row.per_class]))
            for label in classes
        }
        return cls(
            per_class_dice=per_class,
            mean=float(means.mean()),
            std=float(means.std()),
            min=float(means.min()),
            max=float(means.max()),
            per_subject=list(rows),
        )

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "per_class_dice": {str(label): value for label, value in self.per_class_dice.items()},
            "per_subject": [
                {
                    "subject": row.subject,
                    "mean": row.mean,
                    "per_class": {str(label): value for label, value in row.per_class.items()},
                }
                for row in self.per_subject
            ],
        }

    @classmethod
    def from_dict(cls, document: dict) -> "EvalReport":
        rows = [
            SubjectRow(
                subject=row["subject"],
                mean=row["mean"],
                per_class={int(label): value for label, value in row["per_class"].items()},
            )
            for row in document["per_subject"]
        ]
        return cls(
            per_class_dice={int(label): value for label, value in document["per_class_dice"].items()},
            mean=document["mean"],
            std=document["std"],
            min=document["min"],
            max=document["max"],
            per_subject=rows,
        )


def dice_score(pred: LabelsLike, gt: LabelsLike, num_classes: Optional[int] = None) -> DiceResult:
    """Dice ``2|A∩B| / (|A| + |B|)`` per foreground class and its mean.

    A class absent from both maps scores 1.
    """
    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap) and pred.num_classes != gt.num_classes:
        raise ShapeMismatchError(f"class counts differ: {pred.num_classes} and {gt.num_classes}")
    for labels in (pred, gt):
        if isinstance(labels, LabelMap):
            num_classes = labels.num_classes if num_classes is None else num_classes
    pred_array, gt_array = _array(pred), _array(gt)
    if pred_array.shape != gt_array.shape:
        raise ShapeMismatchError(f"shapes {pred_array.shape} and {gt_array.shape} differ")
    if num_classes is None:
        num_classes = int(max(pred_array.max(initial=0), gt_array.max(initial=0))) + 1
    per_class = {}
    for label in range(1, num_classes):
        in_pred, in_gt = pred_array == label, gt_array == label
        total = int(in_pred.sum()) + int(in_gt.sum())
        if total == 0:
            per_class[label] = 1.0
        else:
            per_class[label] = 2.0 * int(np.logical_and(in_pred, in_gt).sum()) / total
    mean = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return DiceResult(per_class=per_class, mean=mean)


def evaluate_pairs(
    pairs: Iterable[Tuple[str, LabelsLike, LabelsLike]], num_classes: Optional[int] = None
) -> EvalReport:
    """Build a report from ``(subject, prediction, ground truth)`` triples."""
    rows = []
    for subject, pred, gt in pairs:
        result = dice_score(pred, gt, num_classes)
        rows.append(SubjectRow(subject=subject, mean=result.mean, per_class=result.per_class))
    return EvalReport.from_rows(rows)


def predict_labels(S: SegmentationNet, image: torch.Tensor) -> torch.Tensor:
    device = next(S.parameters()).device
    with torch.no_grad():
        return segment(S, image.to(device)).argmax().cpu()


def evaluate_segmenter(S: SegmentationNet, subjects: LabeledSubjects) -> EvalReport:
    pairs = (
        (f"{index:04d}", predict_labels(S, image), labels.cpu())
        for index, (image, labels) in enumerate(subjects)
    )
    return evaluate_pairs(pairs, S.num_classes)


def evaluate_directories(pred_dir: Union[str, Path], gt_dir: Union[str, Path]) -> EvalReport:
    """Pair label volumes by file name and evaluate them.

    The class count is one plus the largest label found in either directory.
    """
    predictions = {path.name: path for path in sorted(Path(pred_dir).glob("*.avl"))}
    truths = {path.name: path for path in sorted(Path(gt_dir).glob("*.avl"))}
    if not truths:
        raise EvaluationError(f"no volumes found in '{gt_dir}'")
    unpaired = sorted(set(predictions) ^ set(truths))
    if unpaired:
        raise EvaluationError(f"volumes without a counterpart: {unpaired}")
    pairs = [
        (Path(name).stem, _read_labels(predictions[name]), _read_labels(truths[name])) for name in truths
    ]
    num_classes = 1 + max(int(max(pred.max(), gt.max())) for _, pred, gt in pairs)
    return evaluate_pairs(pairs, num_classes)


def _read_labels(path: Path) -> np.ndarray:
    labels = read_volume(path)
    if not isinstance(labels, LabelMap):
        raise EvaluationError(f"'{path}' holds an intensity volume, expected labels")
    return labels.numpy()


def registration_report(R: RegistrationNet, atlas: Atlas, subjects: LabeledSubjects) -> Dict[str, float]:
    """Warped-label Dice of atlas-to-subject registration and the inverse-consistency residual.

    The residual is the mean of ``|(x ∘ phi_A2U) ∘ phi_U2A - x|`` over the atlas
    and, symmetrically, over each subject.
    """
    device = next(R.parameters()).device
    x_atlas = atlas.image.data.to(device)
    dice, residual = [], []
    with torch.no_grad():
        for image, labels in subjects:
            image = image.to(device)
            phi_a2u = register(R, x_atlas, image)
            phi_u2a = register(R, image, x_atlas)
            warped = warp_labels(atlas.labels.data.to(device), phi_a2u, atlas.num_classes)
            dice.append(dice_score(warped.cpu(), labels.cpu(), atlas.num_classes).mean)
            atlas_back = warp_volume(warp_volume(x_atlas, phi_a2u), phi_u2a)
            subject_back = warp_volume(warp_volume(image, phi_u2a), phi_a2u)
            residual.append(
                0.5 * float((atlas_back - x_atlas).abs().mean() + (subject_back - image).abs().mean())
            )
    return {
        "warped_label_dice": float(np.mean(dice)) if dice else 0.0,
        "inverse_consistency_residual": float(np.mean(residual)) if residual else 0.0,
    }


def _array(labels: LabelsLike) -> np.ndarray:
    if isinstance(labels, LabelMap):
        labels = labels.data
    if isinstance(labels, torch.Tensor):
        labels = labels.detach().cpu().numpy()
    return np.asarray(labels)
