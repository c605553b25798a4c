"""Training objectives: registration consistency, adversarial similarity,
structure and rectification losses.

Reductions are means over voxels (and classes where applicable) so that the
weights do not depend on the grid resolution.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from atlasaug.exceptions import ConfigError, NumericError, ShapeMismatchError
from atlasaug.volume import DisplacementField, LabelMap, Volume
from atlasaug.warping import warp_volume

DICE_EPSILON = 1e-5
PROBABILITY_FLOOR = 1e-7
LOG_PROBABILITY_FLOOR = math.log(PROBABILITY_FLOOR)

VolumeLike = Union[Volume, torch.Tensor]
FieldLike = Union[DisplacementField, torch.Tensor]
LabelsLike = Union[LabelMap, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda_smooth: float = 15.0
    lambda_dice: float = 10.0
    lambda_kl: float = 1e-4
    lambda_rec: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")


@dataclass(frozen=True)
class Prediction:
    """Per-voxel class distribution ``(N, C, *spatial)``.

    Logits are kept when available so that log-probabilities come from
    ``log_softmax`` rather than from the rounded probabilities.
    """

    probs: torch.Tensor
    logits: Optional[torch.Tensor] = None

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "Prediction":
        return cls(probs=torch.softmax(logits, dim=1), logits=logits)

    @classmethod
    def from_probs(cls, probs: torch.Tensor) -> "Prediction":
        return cls(probs=probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def log_probs(self) -> torch.Tensor:
        if self.logits is not None:
            return F.log_softmax(self.logits, dim=1).clamp(min=LOG_PROBABILITY_FLOOR)
        return torch.log(self.probs.clamp(min=PROBABILITY_FLOOR))

    def argmax(self) -> torch.Tensor:
        return self.probs.argmax(dim=1)

    def is_valid(self, tolerance: float = 1e-5) -> bool:
        """True if every voxel holds a probability simplex."""
        in_range = bool(((self.probs >= 0) & (self.probs <= 1)).all())
        sums = self.probs.sum(dim=1)
        return in_range and bool((sums - 1).abs().max() <= tolerance)

    def detach(self) -> "Prediction":
        logits = None if self.logits is None else self.logits.detach()
        return Prediction(probs=self.probs.detach(), logits=logits)


class SegmentationQuadruple(NamedTuple):
    """Predictions of S on the reconstructed and original atlas and unlabeled images."""

    reconstructed_atlas: Prediction
    atlas: Prediction
    reconstructed_unlabeled: Prediction
    unlabeled: Prediction


def l2_similarity(a: VolumeLike, b: VolumeLike) -> torch.Tensor:
    a, b = _matched(_tensor(a), _tensor(b))
    return ((a - b) ** 2).mean()


def l1_similarity(a: VolumeLike, b: VolumeLike) -> torch.Tensor:
    a, b = _matched(_tensor(a), _tensor(b))
    return (a - b).abs().mean()


def bending_energy(field: FieldLike) -> torch.Tensor:
    """Mean over interior voxels of the summed squared second derivatives.

    Central differences; mixed derivatives are counted twice. Vanishes on
    affine fields.
    """
    tensor = _tensor(field)
    spatial = tensor.shape[2:]
    if any(size < 3 for size in spatial):
        raise ShapeMismatchError(f"bending energy needs every spatial size >= 3, got {tuple(spatial)}")
    rank = len(spatial)

    def shifted(moves: dict) -> torch.Tensor:
        """Interior block moved by ``moves[axis]`` voxels along each listed axis."""
        index = [slice(None), slice(None)]
        for axis, size in enumerate(spatial):
            offset = moves.get(axis, 0)
            index.append(slice(1 + offset, size - 1 + offset))
        return tensor[tuple(index)]

    centre = shifted({})
    energy = torch.zeros_like(centre)
    for i in range(rank):
        d_ii = shifted({i: 1}) - 2 * centre + shifted({i: -1})
        energy = energy + d_ii**2
        for j in range(i + 1, rank):
            d_ij = (
                shifted({i: 1, j: 1})
                - shifted({i: 1, j: -1})
                - shifted({i: -1, j: 1})
                + shifted({i: -1, j: -1})
            ) / 4
            energy = energy + 2 * d_ij**2
    return energy.sum(dim=1).mean()


def dice_loss(p: Prediction, y: LabelsLike, epsilon: float = DICE_EPSILON) -> torch.Tensor:
    """``1 - mean_c soft Dice`` with ``epsilon`` smoothing in numerator and denominator."""
    labels = _labels(y, p)
    target = F.one_hot(labels, p.num_classes).movedim(-1, 1).to(p.probs.dtype)
    dims = (0,) + tuple(range(2, p.probs.dim()))
    intersection = (p.probs * target).sum(dims)
    denominator = p.probs.sum(dims) + target.sum(dims)
    dice = (2 * intersection + epsilon) / (denominator + epsilon)
    return 1 - dice.mean()


def ce_loss(p: Prediction, y: LabelsLike, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over voxels of ``weight * -log p[y]``."""
    labels = _labels(y, p)
    nll = -p.log_probs().gather(1, labels.unsqueeze(1)).squeeze(1)
    if weight is not None:
        if weight.shape[1:] != labels.shape[1:]:
            raise ShapeMismatchError(
                f"weight {tuple(weight.shape)} does not match labels {tuple(labels.shape)}"
            )
        nll = nll * weight
    return nll.mean()


def kl_map(p: Prediction, q: Prediction) -> torch.Tensor:
    """Per-voxel ``sum_c p_c log(p_c / q_c)``, shape ``(N, *spatial)``."""
    _check_predictions(p, q)
    kl = (p.probs * (p.log_probs() - q.log_probs())).sum(dim=1)
    return kl.clamp(min=0)


def adversarial_similarity(y_g: Prediction, y_ag: Prediction) -> torch.Tensor:
    """Cosine similarity of the flattened probability maps, averaged over the batch."""
    _check_predictions(y_g, y_ag)
    a = y_g.probs.reshape(y_g.probs.shape[0], -1)
    b = y_ag.probs.reshape(y_ag.probs.shape[0], -1)
    norm_a, norm_b = a.norm(dim=1), b.norm(dim=1)
    if bool((norm_a == 0).any()) or bool((norm_b == 0).any()):
        raise NumericError("cosine similarity is undefined for a zero-norm prediction")
    return ((a * b).sum(dim=1) / (norm_a * norm_b)).mean()


def adversarial_difference(y_g: Prediction, y_ag: Prediction) -> torch.Tensor:
    """``1 - adversarial_similarity``: ascended by G, descended by S."""
    return 1 - adversarial_similarity(y_g, y_ag)


def structure_loss(y_warped_atlas: Prediction, y_g: LabelsLike) -> torch.Tensor:
    return dice_loss(y_warped_atlas, y_g) + ce_loss(y_warped_atlas, y_g)


def rectification_loss(
    y_hat_g: Prediction,
    y_warped_atlas: Prediction,
    y_g: LabelsLike,
    lambda_kl: float,
    detach_weight: bool = True,
) -> torch.Tensor:
    """Cross-entropy weighted by ``exp(-KL)`` plus ``lambda_kl * mean(KL)``.

    With ``detach_weight`` the weight map is a constant for the gradient of the
    weighted term; the KL gradient comes from the regularizer only.
    """
    kl = kl_map(y_hat_g, y_warped_atlas)
    weight = torch.exp(-kl)
    if detach_weight:
        weight = weight.detach()
    return ce_loss(y_hat_g, y_g, weight) + lambda_kl * kl.mean()


def bi_consistency_loss(
    x_atlas: VolumeLike,
    x_unlabeled: VolumeLike,
    phi_a2u: FieldLike,
    phi_u2a: FieldLike,
    lambda_smooth: float,
) -> torch.Tensor:
    """Similarity of both registration directions plus their bending energy."""
    x_atlas, x_unlabeled = _tensor(x_atlas), _tensor(x_unlabeled)
    phi_a2u, phi_u2a = _tensor(phi_a2u), _tensor(phi_u2a)
    similarity = l2_similarity(warp_volume(x_atlas, phi_a2u), x_unlabeled) + l2_similarity(
        warp_volume(x_unlabeled, phi_u2a), x_atlas
    )
    return similarity + lambda_smooth * (bending_energy(phi_a2u) + bending_energy(phi_u2a))


def fb_consistency_loss(
    x_atlas_reconstructed: VolumeLike,
    x_unlabeled_reconstructed: VolumeLike,
    x_atlas: VolumeLike,
    x_unlabeled: VolumeLike,
    seg: SegmentationQuadruple,
    lambda_dice: float,
) -> torch.Tensor:
    """L1 reconstruction of both images plus semantic Dice agreement of their predictions.

    The Dice target is the detached argmax of the prediction on the original image.
    """
    image_term = l1_similarity(x_atlas_reconstructed, x_atlas) + l1_similarity(
        x_unlabeled_reconstructed, x_unlabeled
    )
    semantic_term = dice_loss(seg.reconstructed_atlas, seg.atlas.argmax().detach()) + dice_loss(
        seg.reconstructed_unlabeled, seg.unlabeled.argmax().detach()
    )
    return image_term + lambda_dice * semantic_term


def _tensor(value) -> torch.Tensor:
    if isinstance(value, (Volume, DisplacementField, LabelMap)):
        return value.data
    return value


def _matched(a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Check that shapes agree, broadcasting a batch of one."""
    if a.shape[1:] != b.shape[1:] or (a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0])):
        raise ShapeMismatchError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return torch.broadcast_tensors(a, b)


def _labels(y: LabelsLike, p: Prediction) -> torch.Tensor:
    if isinstance(y, LabelMap):
        if y.num_classes != p.num_classes:
            raise ShapeMismatchError(
                f"label map has {y.num_classes} classes, prediction has {p.num_classes}"
            )
        y = y.data
    y = y.long()
    if y.shape[1:] != p.probs.shape[2:] or y.shape[0] not in (p.probs.shape[0], 1):
        raise ShapeMismatchError(
            f"labels {tuple(y.shape)} do not match prediction {tuple(p.probs.shape)}"
        )
    if y.numel() and int(y.max()) >= p.num_classes:
        raise ShapeMismatchError(f"label value {int(y.max())} outside {p.num_classes} classes")
    if y.shape[0] != p.probs.shape[0]:
        y = y.expand(p.probs.shape[0], *y.shape[1:])
    return y


def _check_predictions(p: Prediction, q: Prediction):
    if p.probs.shape != q.probs.shape:
        raise ShapeMismatchError(f"predictions {tuple(p.probs.shape)} and {tuple(q.probs.shape)} differ")
