"""Ablation and data-scarcity runs over a phantom cohort.

Every variant trains from the same seed and cohort and is evaluated on the
heldout subjects. Variants differ only in config toggles, so each result
carries the hash of the config it was trained with.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from atlasaug.config import TrainConfig
from atlasaug.evaluation import EvalReport, evaluate_segmenter, registration_report
from atlasaug.exceptions import AblationError, ConfigError, TrainingError
from atlasaug.phantom import Cohort
from atlasaug.trainer import Trainer

LOG = logging.getLogger(__name__)

# variant -> (sampling, rectification)
VARIANTS = {
    "vanilla": ("none", False),
    "beta": ("beta", False),
    "adv": ("adversarial", False),
    "ler": ("none", True),
    "beta+ler": ("beta", True),
    "adv+ler": ("adversarial", True),
}
# variant -> forward-backward consistency
REGISTRATION_VARIANTS = {"reg-bi": False, "reg-bi+fb": True}
SCARCITY_VARIANTS = ("vanilla", "adv")
# At phantom scale only this ordering of mean Dice is expected to hold.
EXPECTED_ORDER = ("vanilla", "adv+ler")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class AblationResult:
    variant: str
    report: EvalReport
    config_hash: str

    def to_dict(self) -> dict:
        return {"variant": self.variant, "config_hash": self.config_hash, "report": self.report.to_dict()}


def parse_variants(text: str, known: Iterable[str] = VARIANTS) -> List[str]:
    """Split a comma separated variant list, rejecting unknown and repeated ids."""
    known = list(known)
    variants = [variant.strip() for variant in text.split(",") if variant.strip()]
    if not variants:
        raise ConfigError("no variants requested")
    unknown = [variant for variant in variants if variant not in known]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}, expected some of {known}")
    if len(set(variants)) != len(variants):
        raise ConfigError(f"variants must be unique, got {variants}")
    return variants


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    try:
        sampling, rectification = VARIANTS[variant]
    except KeyError as error:
        raise ConfigError(f"unknown variant '{variant}'") from error
    return base.replace(sampling=sampling, rectification=rectification)


def train_variant(
    cohort: Cohort, variant: str, base: TrainConfig, output_dir: Optional[PathLike] = None
) -> AblationResult:
    config = variant_config(base, variant)
    LOG.info("training variant %s (config %s)", variant, config.config_hash())
    trainer = Trainer(config, cohort.atlas)
    try:
        trainer.train(cohort.unlabeled, output_dir=Path(output_dir) / variant if output_dir else None)
    except TrainingError as error:
        raise AblationError(error.message, variant, iteration=error.iteration, phase=error.phase) from error
    report = evaluate_segmenter(trainer.get_networks().segmentation, _heldout(cohort))
    LOG.info("variant %s: mean dice %.4f", variant, report.mean)
    return AblationResult(variant=variant, report=report, config_hash=config.config_hash())


def run_ablation(
    cohort: Cohort, variants: Sequence[str], base: TrainConfig, output_dir: Optional[PathLike] = None
) -> List[AblationResult]:
    """Train and evaluate each variant, in request order."""
    variants = parse_variants(",".join(variants))
    return [train_variant(cohort, variant, base, output_dir) for variant in variants]


def rank_results(results: Sequence[AblationResult]) -> List[AblationResult]:
    return sorted(results, key=lambda result: result.report.mean, reverse=True)


def expected_ordering_holds(results: Sequence[AblationResult]) -> Optional[bool]:
    """Whether vanilla scores below the full method; None when either was not run."""
    means = {result.variant: result.report.mean for result in results}
    low, high = EXPECTED_ORDER
    if low not in means or high not in means:
        return None
    return means[low] < means[high]


def ablation_document(results: Sequence[AblationResult]) -> dict:
    ordering = expected_ordering_holds(results)
    if ordering is False:
        LOG.warning("expected %s < %s in mean dice, got the opposite", *EXPECTED_ORDER)
    return {"results": [result.to_dict() for result in rank_results(results)], "ordering_holds": ordering}


def run_registration_ablation(
    cohort: Cohort, base: TrainConfig, variants: Sequence[str] = tuple(REGISTRATION_VARIANTS)
) -> dict:
    """Train registration alone with and without forward-backward consistency."""
    results = []
    for variant in variants:
        if variant not in REGISTRATION_VARIANTS:
            raise ConfigError(f"unknown registration variant '{variant}'")
        config = base.replace(sampling="none", fb_consistency=REGISTRATION_VARIANTS[variant])
        trainer = Trainer(config, cohort.atlas)
        try:
            trainer.train_registration(cohort.unlabeled)
        except TrainingError as error:
            raise AblationError(
                error.message, variant, iteration=error.iteration, phase=error.phase
            ) from error
        report = registration_report(trainer.get_networks().registration, trainer.atlas, _heldout(cohort))
        results.append({"variant": variant, "config_hash": config.config_hash(), **report})
    return {"results": results}


def run_scarcity(
    cohort: Cohort,
    counts: Sequence[int],
    base: TrainConfig,
    variants: Sequence[str] = SCARCITY_VARIANTS,
    output_dir: Optional[PathLike] = None,
) -> dict:
    """Train each variant on the first ``count`` unlabeled images for every count.

    The drop of a variant is its mean Dice at the largest count minus the one
    at the smallest count.
    """
    counts = sorted(set(counts))
    if not counts or counts[0] < 1 or counts[-1] > len(cohort.unlabeled):
        raise ConfigError(f"counts must lie in [1, {len(cohort.unlabeled)}], got {counts}")
    series = []
    dice: Dict[str, Dict[int, float]] = {variant: {} for variant in variants}
    for count in counts:
        subset = cohort.truncated(count)
        run_dir = Path(output_dir) / f"count_{count:04d}" if output_dir else None
        for variant in variants:
            result = train_variant(subset, variant, base, run_dir)
            dice[variant][count] = result.report.mean
            series.append(
                {
                    "count": count,
                    "variant": variant,
                    "mean_dice": result.report.mean,
                    "config_hash": result.config_hash,
                }
            )
    drop = {variant: values[counts[-1]] - values[counts[0]] for variant, values in dice.items()}
    return {"series": series, "drop": drop}


def _heldout(cohort: Cohort):
    return [(image.data, labels.data) for image, labels in cohort.heldout]
