"""Alternating optimization of registration, augmenter and segmenter.

Every iteration runs up to three steps in a fixed order. Each step updates a
single network while the other two are frozen:

* registration: bidirectional and forward-backward consistency, updates R.
* augmenter: ascends the atlas-space prediction difference, updates G.
* segmenter: supervised (optionally rectified) loss on the augmented
  samples plus the prediction difference, updates S.
"""
import contextlib
import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch

from atlasaug.augmentation import (
    AugmentedSample,
    adversarial_augment,
    extract_transforms,
    vanilla_augment,
)
from atlasaug.checkpoints import load_checkpoint, save_checkpoint
from atlasaug.config import TrainConfig, config_from_dict
from atlasaug.evaluation import EvalReport, LabeledSubjects, evaluate_segmenter
from atlasaug.exceptions import CheckpointError, DataExhaustedError, NonFiniteLossError, ShapeMismatchError
from atlasaug.freezing import frozen
from atlasaug.losses import (
    Prediction,
    SegmentationQuadruple,
    adversarial_difference,
    bi_consistency_loss,
    fb_consistency_loss,
    rectification_loss,
    structure_loss,
)
from atlasaug.networks import NetworkSet, SegmentationNet, build_networks, register, segment
from atlasaug.sampling_strategies import (
    AdversarialSamplingStrategy,
    BaseSamplingStrategy,
    BetaSamplingStrategy,
)
from atlasaug.schedules import gaussian_ramp, lr_schedule
from atlasaug.utils.typing import OptionalFloat
from atlasaug.utils.warnings import ignored_option_warning
from atlasaug.volume import Atlas, LabelMap, Volume
from atlasaug.warping import invert_field, warp_volume

LOG = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.pt"
BEST_CHECKPOINT = "best.pt"
# The network each phase optimizes.
PHASE_NETWORKS = {"registration": "registration", "augmenter": "adversarial", "segmenter": "segmentation"}
# Halvings tried before a segmenter step that raises the prediction difference is undone.
STEP_HALVINGS = 10

ImagesLike = Union[torch.Tensor, Sequence[Union[Volume, torch.Tensor]]]
SubjectsLike = Sequence[Tuple[Union[Volume, torch.Tensor], Union[LabelMap, torch.Tensor]]]


@dataclass(frozen=True)
class LossReport:
    iteration: int
    phase: str
    losses: Dict[str, float]

    @property
    def total(self) -> float:
        return self.losses["total"]


@dataclass
class TrainState:
    iteration: int = 0
    history: List[LossReport] = field(default_factory=list)
    # (iteration, mean validation Dice) per evaluation
    validation: List[Tuple[int, float]] = field(default_factory=list)
    best_dice: OptionalFloat = None
    evaluations_since_improvement: int = 0
    stopped_early: bool = False


class MetricsLog:
    """Append one JSON document per line; a missing path disables logging."""

    def __init__(self, path: Optional[Path]):
        self._path = path
        self._file = None

    def __enter__(self) -> "MetricsLog":
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self._path.open("a", encoding="utf-8")
        return self

    def __exit__(self, *exc_info):
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: dict):
        if self._file is not None:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
            self._file.flush()


class Trainer:
    def __init__(self, config: TrainConfig, atlas: Atlas, networks: Optional[NetworkSet] = None):
        self.config = config
        self.device = torch.device(config.device)
        self.atlas = Atlas(
            image=Volume(atlas.image.data.to(self.device), spacing=atlas.image.spacing),
            labels=LabelMap(atlas.labels.data.to(self.device), atlas.num_classes),
        )
        if networks is None:
            networks = build_networks(
                atlas.num_classes,
                spatial_rank=len(atlas.spatial_shape),
                levels=config.levels,
                base_channels=config.base_channels,
                seed=config.seed,
            )
        self.set_networks(networks)
        self.state = TrainState()
        self._generator = torch.Generator().manual_seed(config.seed)
        self._epoch_length = 1
        self.set_sampling_strategy(self._default_sampling_strategy())
        if config.mixed_precision and self.device.type != "cuda":
            ignored_option_warning("mixed_precision has no effect on CPU")

    def get_networks(self) -> NetworkSet:
        return self._networks

    def set_networks(self, networks: NetworkSet):
        if not isinstance(networks, NetworkSet):
            raise RuntimeError("provided networks must be an instance of NetworkSet.")
        self._networks = networks.to(self.device)
        self._optimizers = {
            name: torch.optim.SGD(
                network.parameters(),
                lr=self.config.lr_initial,
                momentum=self.config.momentum,
                weight_decay=self.config.weight_decay,
                # G ascends the prediction difference.
                maximize=name == "adversarial",
            )
            for name, network in networks.items()
        }

    def get_sampling_strategy(self) -> Optional[BaseSamplingStrategy]:
        return self._sampling_strategy

    def set_sampling_strategy(self, sampling_strategy: Optional[BaseSamplingStrategy]):
        if sampling_strategy is not None and not isinstance(sampling_strategy, BaseSamplingStrategy):
            raise RuntimeError("provided sampling_strategy must be an instance of BaseSamplingStrategy.")
        self._sampling_strategy = sampling_strategy

    def _default_sampling_strategy(self) -> Optional[BaseSamplingStrategy]:
        if self.config.sampling == "adversarial":
            return AdversarialSamplingStrategy(self._networks.adversarial)
        if self.config.sampling == "beta":
            return BetaSamplingStrategy(self.config.beta_shape, seed=self.config.seed)
        return None

    def ramp(self, iteration: Optional[int] = None) -> float:
        iteration = self.state.iteration if iteration is None else iteration
        return gaussian_ramp(iteration, self.config.effective_ramp_length)

    def current_lr(self) -> float:
        return lr_schedule(self.state.iteration, self.config, self._epoch_length)

    def registration_frozen(self, iteration: Optional[int] = None) -> bool:
        iteration = self.state.iteration if iteration is None else iteration
        return self.config.freeze_reg_after is not None and iteration >= self.config.freeze_reg_after

    def registration_step(self, x_unlabeled: torch.Tensor) -> LossReport:
        nets, weights = self._networks, self.config.weights
        x_unlabeled = x_unlabeled.to(self.device)
        x_atlas = self._atlas_batch(x_unlabeled.shape[0])
        with frozen(nets.segmentation, nets.adversarial), self._autocast():
            phi_a2u = register(nets.registration, x_atlas, x_unlabeled)
            phi_u2a = register(nets.registration, x_unlabeled, x_atlas)
            bi = bi_consistency_loss(x_atlas, x_unlabeled, phi_a2u, phi_u2a, weights.lambda_smooth)
            losses = {"bi": bi}
            if self.config.fb_consistency:
                atlas_reconstructed = warp_volume(warp_volume(x_atlas, phi_a2u), phi_u2a)
                unlabeled_reconstructed = warp_volume(warp_volume(x_unlabeled, phi_u2a), phi_a2u)
                seg = SegmentationQuadruple(
                    reconstructed_atlas=segment(nets.segmentation, atlas_reconstructed),
                    atlas=segment(nets.segmentation, x_atlas),
                    reconstructed_unlabeled=segment(nets.segmentation, unlabeled_reconstructed),
                    unlabeled=segment(nets.segmentation, x_unlabeled),
                )
                losses["fb"] = fb_consistency_loss(
                    atlas_reconstructed,
                    unlabeled_reconstructed,
                    x_atlas,
                    x_unlabeled,
                    seg,
                    weights.lambda_dice * self.ramp(),
                )
        return self._optimize("registration", losses)

    def augmenter_step(self, x_spatial: torch.Tensor, x_appearance: torch.Tensor) -> LossReport:
        strategy = self.get_sampling_strategy()
        if strategy is None or not strategy.trainable:
            raise RuntimeError("augmenter_step requires a trainable sampling strategy.")
        nets = self._networks
        with frozen(nets.registration, nets.segmentation), self._autocast():
            vanilla, transforms = self._vanilla_sample(x_spatial, x_appearance)
            adversarial = adversarial_augment(strategy, self.atlas, transforms, vanilla.image)
            losses = {"adv_diff": self._atlas_space_difference(vanilla, adversarial)}
        return self._optimize("augmenter", losses)

    def segmenter_step(self, x_spatial: torch.Tensor, x_appearance: torch.Tensor) -> LossReport:
        nets = self._networks
        strategy = self.get_sampling_strategy()
        recompute = None
        with frozen(nets.registration, nets.adversarial), self._autocast():
            vanilla, transforms = self._vanilla_sample(x_spatial, x_appearance)
            losses = {"seg": self._supervised_loss(vanilla)}
            if strategy is not None:
                # Fresh sampling layers, drawn after the augmenter update.
                with torch.no_grad():
                    adversarial = adversarial_augment(strategy, self.atlas, transforms, vanilla.image)
                losses["seg_adv"] = self._supervised_loss(adversarial)
                if strategy.trainable:
                    losses["adv_diff"] = self._atlas_space_difference(vanilla, adversarial)
                    recompute = functools.partial(self._atlas_space_difference, vanilla, adversarial)
        return self._optimize("segmenter", losses, recompute)

    def adversarial_difference(
        self,
        x_spatial: torch.Tensor,
        x_appearance: torch.Tensor,
        strategy: Optional[BaseSamplingStrategy] = None,
    ) -> float:
        """Evaluate the atlas-space prediction difference without touching any parameter."""
        strategy = strategy or self.get_sampling_strategy()
        if strategy is None:
            raise RuntimeError("adversarial_difference requires a sampling strategy.")
        with torch.no_grad():
            vanilla, transforms = self._vanilla_sample(x_spatial, x_appearance)
            adversarial = adversarial_augment(strategy, self.atlas, transforms, vanilla.image)
            return float(self._atlas_space_difference(vanilla, adversarial))

    def sample_references(self, count: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Indices of the spatial and appearance references, each drawn without replacement."""
        batch = self.config.batch_size
        if count < batch:
            raise DataExhaustedError(
                f"cannot draw {batch} references from {count} unlabeled images",
                iteration=self.state.iteration,
            )
        spatial = torch.randperm(count, generator=self._generator)[:batch]
        appearance = torch.randperm(count, generator=self._generator)[:batch]
        return spatial, appearance

    def train_iteration(self, images: torch.Tensor) -> List[LossReport]:
        spatial, appearance = self.sample_references(images.shape[0])
        x_spatial, x_appearance = images[spatial], images[appearance]
        reports = []
        if not self.registration_frozen():
            reports.append(self.registration_step(x_spatial))
        strategy = self.get_sampling_strategy()
        if strategy is not None and strategy.trainable:
            reports.append(self.augmenter_step(x_spatial, x_appearance))
        reports.append(self.segmenter_step(x_spatial, x_appearance))
        self.state.history.extend(reports)
        return reports

    def train(
        self,
        unlabeled: ImagesLike,
        validation: Optional[SubjectsLike] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ) -> TrainState:
        images = self._stack(unlabeled)
        config = self.config
        self._epoch_length = images.shape[0]
        if config.freeze_reg_after is not None and config.freeze_reg_after > config.n_iterations:
            ignored_option_warning(
                f"freeze_reg_after={config.freeze_reg_after} is beyond n_iterations={config.n_iterations}"
            )
        output_dir = Path(output_dir) if output_dir is not None else None
        LOG.info(
            "training %d iterations on %d unlabeled images (config %s)",
            config.n_iterations,
            images.shape[0],
            config.config_hash(),
        )
        metrics_path = output_dir / METRICS_FILE if output_dir is not None else None
        with MetricsLog(metrics_path) as metrics:
            while self.state.iteration < config.n_iterations:
                iteration, lr, ramp = self.state.iteration, self.current_lr(), self.ramp()
                reports = self.train_iteration(images)
                record = {"iteration": iteration, "lr": lr, "ramp": ramp}
                record.update({report.phase: report.losses for report in reports})
                metrics.write(record)
                self.state.iteration += 1
                if output_dir is not None and self.state.iteration % config.checkpoint_every == 0:
                    self._checkpoint(output_dir / f"checkpoint_{self.state.iteration:06d}.pt")
                if validation and self.state.iteration % config.eval_every == 0:
                    dice = self.validate(validation).mean
                    metrics.write({"iteration": self.state.iteration, "validation_dice": dice})
                    if self._record_validation(dice, output_dir):
                        self.state.stopped_early = True
                        LOG.info(
                            "early stop at iteration %d: no improvement in %d evaluations",
                            self.state.iteration,
                            self.state.evaluations_since_improvement,
                        )
                        break
        if output_dir is not None:
            self._checkpoint(output_dir / FINAL_CHECKPOINT)
        return self.state

    def train_registration(self, unlabeled: ImagesLike) -> TrainState:
        """Run only the registration step for the configured number of iterations."""
        images = self._stack(unlabeled)
        self._epoch_length = images.shape[0]
        while self.state.iteration < self.config.n_iterations:
            spatial, _ = self.sample_references(images.shape[0])
            self.state.history.append(self.registration_step(images[spatial]))
            self.state.iteration += 1
        return self.state

    def validate(self, validation: SubjectsLike) -> EvalReport:
        return evaluate_segmenter(self._networks.segmentation, self._subjects(validation))

    def checkpoint_payload(self) -> dict:
        strategy = self.get_sampling_strategy()
        return {
            "format": CHECKPOINT_FORMAT,
            "iteration": self.state.iteration,
            "num_classes": self.atlas.num_classes,
            "spatial_rank": len(self.atlas.spatial_shape),
            "config": self.config.to_dict(),
            "networks": {name: network.state_dict() for name, network in self._networks.items()},
            "optimizers": {name: optimizer.state_dict() for name, optimizer in self._optimizers.items()},
            "generator": self._generator.get_state(),
            "sampling_state": strategy.get_state() if isinstance(strategy, BetaSamplingStrategy) else None,
            "best_dice": self.state.best_dice,
            "evaluations_since_improvement": self.state.evaluations_since_improvement,
            "validation": [[iteration, dice] for iteration, dice in self.state.validation],
        }

    def save_checkpoint(self, path: Union[str, Path]):
        save_checkpoint(self.checkpoint_payload(), path)

    def load_state(self, payload: dict):
        if payload.get("num_classes") != self.atlas.num_classes:
            raise CheckpointError(
                f"checkpoint has {payload.get('num_classes')} classes, atlas has {self.atlas.num_classes}"
            )
        try:
            for name, network in self._networks.items():
                network.load_state_dict(payload["networks"][name])
            for name, optimizer in self._optimizers.items():
                optimizer.load_state_dict(payload["optimizers"][name])
        except (KeyError, RuntimeError, ValueError) as error:
            raise CheckpointError("checkpoint does not match the network layout", info=str(error)) from error
        self._generator.set_state(payload["generator"])
        strategy = self.get_sampling_strategy()
        if isinstance(strategy, BetaSamplingStrategy) and payload.get("sampling_state"):
            strategy.set_state(payload["sampling_state"])
        self.state = TrainState(
            iteration=payload["iteration"],
            validation=[(iteration, dice) for iteration, dice in payload.get("validation", [])],
            best_dice=payload.get("best_dice"),
            evaluations_since_improvement=payload.get("evaluations_since_improvement", 0),
        )

    @classmethod
    def from_checkpoint(
        cls, path: Union[str, Path], atlas: Atlas, device: Optional[str] = None
    ) -> "Trainer":
        payload = load_checkpoint(path)
        values = dict(payload["config"])
        if device is not None:
            values["device"] = device
        trainer = cls(config_from_dict(values), atlas)
        trainer.load_state(payload)
        LOG.info("resumed from %s at iteration %d", path, trainer.state.iteration)
        return trainer

    def _optimize(
        self,
        phase: str,
        losses: Dict[str, torch.Tensor],
        recompute_difference: Optional[Callable[[], torch.Tensor]] = None,
    ) -> LossReport:
        total = sum(losses.values())
        values = {name: float(value) for name, value in losses.items()}
        values["total"] = float(total)
        if not torch.isfinite(total):
            raise NonFiniteLossError(
                f"{phase} loss is not finite",
                iteration=self.state.iteration,
                phase=phase,
                info=json.dumps(values),
            )
        optimizer = self._optimizers[PHASE_NETWORKS[phase]]
        lr = self.current_lr()
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        if recompute_difference is None:
            total.backward()
            optimizer.step()
        else:
            self._descending_step(optimizer, losses, recompute_difference)
        LOG.debug("iteration %d %s %s", self.state.iteration, phase, values)
        return LossReport(iteration=self.state.iteration, phase=phase, losses=values)

    def _descending_step(
        self,
        optimizer: torch.optim.Optimizer,
        losses: Dict[str, torch.Tensor],
        recompute_difference: Callable[[], torch.Tensor],
    ):
        """Step the segmenter without raising ``adv_diff`` on the current minibatch.

        The supervised gradient loses its component opposing the descent of
        ``adv_diff``. If the re-evaluated difference still exceeds its value
        before the step, the update is halved up to `STEP_HALVINGS` times and
        undone when that does not suffice.
        """
        params = [p for group in optimizer.param_groups for p in group["params"] if p.requires_grad]
        rest = sum(value for name, value in losses.items() if name != "adv_diff")
        g_rest = _gradients(rest, params, retain_graph=True)
        g_adv = _gradients(losses["adv_diff"], params)
        dot = sum(torch.sum(a * b) for a, b in zip(g_rest, g_adv))
        norm = sum(torch.sum(b * b) for b in g_adv)
        if dot < 0 and norm > 0:
            g_rest = [a - dot / norm * b for a, b in zip(g_rest, g_adv)]
        for param, a, b in zip(params, g_rest, g_adv):
            param.grad = a + b

        def difference() -> float:
            with torch.no_grad(), self._autocast():
                return float(recompute_difference())

        reference = difference()
        with torch.no_grad():
            start = [param.detach().clone() for param in params]
        optimizer.step()
        halvings = 0
        with torch.no_grad():
            while difference() > reference:
                if halvings == STEP_HALVINGS:
                    for param, value in zip(params, start):
                        param.copy_(value)
                    LOG.debug("iteration %d: segmenter step undone", self.state.iteration)
                    break
                for param, value in zip(params, start):
                    param.mul_(0.5).add_(value, alpha=0.5)
                halvings += 1

    def _vanilla_sample(self, x_spatial: torch.Tensor, x_appearance: torch.Tensor):
        with torch.no_grad():
            transforms = extract_transforms(
                self._networks.registration,
                self.atlas,
                x_spatial.to(self.device),
                x_appearance.to(self.device),
            )
            return vanilla_augment(self.atlas, transforms), transforms

    def _atlas_space_difference(
        self, vanilla: AugmentedSample, adversarial: AugmentedSample
    ) -> torch.Tensor:
        """``1 - cosine`` of both predictions after mapping them back onto the atlas grid."""
        S = self._networks.segmentation
        iterations = self.config.inversion_iters
        inverse = invert_field(vanilla.spatial_used.detach(), iterations)
        inverse_adversarial = invert_field(adversarial.spatial_used.detach(), iterations)
        y_g = warp_volume(segment(S, vanilla.image).probs, inverse)
        y_ag = warp_volume(segment(S, adversarial.image).probs, inverse_adversarial)
        return adversarial_difference(Prediction.from_probs(y_g), Prediction.from_probs(y_ag))

    def _supervised_loss(self, sample: AugmentedSample) -> torch.Tensor:
        S, weights = self._networks.segmentation, self.config.weights
        y_hat = segment(S, sample.image)
        if not self.config.rectification:
            return structure_loss(y_hat, sample.labels)
        ramp = self.ramp()
        y_warped_atlas = segment(S, sample.warped_atlas)
        rectification = rectification_loss(y_hat, y_warped_atlas, sample.labels, weights.lambda_kl)
        return structure_loss(y_warped_atlas, sample.labels) + weights.lambda_rec * ramp * rectification

    def _record_validation(self, dice: float, output_dir: Optional[Path]) -> bool:
        """Record a validation result and return True when training should stop."""
        state = self.state
        state.validation.append((state.iteration, dice))
        LOG.info("iteration %d validation dice %.4f", state.iteration, dice)
        if state.best_dice is None or dice > state.best_dice + self.config.min_improvement:
            state.best_dice = dice
            state.evaluations_since_improvement = 0
            if output_dir is not None:
                self._checkpoint(output_dir / BEST_CHECKPOINT)
            return False
        state.evaluations_since_improvement += 1
        return state.evaluations_since_improvement >= self.config.early_stop_patience

    def _checkpoint(self, path: Path):
        try:
            self.save_checkpoint(path)
        except CheckpointError as error:
            error.iteration = self.state.iteration
            raise

    def _autocast(self):
        if not self.config.mixed_precision or self.device.type != "cuda":
            return contextlib.nullcontext()
        return torch.autocast(device_type="cuda", dtype=torch.bfloat16)

    def _atlas_batch(self, batch: int) -> torch.Tensor:
        image = self.atlas.image.data
        return image.expand(batch, *image.shape[1:])

    def _stack(self, images: ImagesLike) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            stacked = images
        else:
            tensors = [image.data if isinstance(image, Volume) else image for image in images]
            if not tensors:
                raise DataExhaustedError("the unlabeled set is empty", iteration=self.state.iteration)
            stacked = torch.cat(tensors)
        if stacked.shape[0] == 0:
            raise DataExhaustedError("the unlabeled set is empty", iteration=self.state.iteration)
        if tuple(stacked.shape[2:]) != self.atlas.spatial_shape:
            raise ShapeMismatchError(
                f"unlabeled images {tuple(stacked.shape)} do not match the atlas {self.atlas.spatial_shape}"
            )
        return stacked.to(self.device)

    def _subjects(self, subjects: SubjectsLike) -> LabeledSubjects:
        prepared = []
        for image, labels in subjects:
            image = image.data if isinstance(image, Volume) else image
            labels = labels.data if isinstance(labels, LabelMap) else labels
            prepared.append((image, labels))
        return prepared


def load_segmenter(path: Union[str, Path], device: str = "cpu") -> SegmentationNet:
    """Rebuild the segmentation network stored in a training checkpoint."""
    payload = load_checkpoint(path, map_location=device)
    config = payload.get("config", {})
    try:
        network = SegmentationNet(
            payload["num_classes"],
            spatial_rank=payload["spatial_rank"],
            levels=config.get("levels", 4),
            base_channels=config.get("base_channels", 16),
        )
        network.load_state_dict(payload["networks"]["segmentation"])
    except (KeyError, RuntimeError) as error:
        raise CheckpointError(
            f"checkpoint '{path}' has no usable segmentation network", info=str(error)
        ) from error
    return network.to(device).eval()


def _gradients(
    loss: torch.Tensor, params: List[torch.Tensor], retain_graph: bool = False
) -> List[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(param) if grad is None else grad for param, grad in zip(params, grads)]
