"""Command line entry point.

Exit status is 0 on success, 1 when the pipeline reports an error and 2 on
usage errors.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from atlasaug.ablation import (
    REGISTRATION_VARIANTS,
    SCARCITY_VARIANTS,
    VARIANTS,
    ablation_document,
    parse_variants,
    run_ablation,
    run_registration_ablation,
    run_scarcity,
)
from atlasaug.config import TrainConfig, load_config, save_config
from atlasaug.evaluation import evaluate_directories, predict_labels
from atlasaug.exceptions import AtlasAugError, ConfigError, EvaluationError
from atlasaug.phantom import PhantomSpec, load_cohort, make_cohort, save_cohort
from atlasaug.report_formatters import (
    AblationTableFormatter,
    EvaluationTableFormatter,
    RegistrationTableFormatter,
    ScarcityTableFormatter,
    write_reports,
)
from atlasaug.trainer import Trainer, load_segmenter
from atlasaug.utils.warnings import ignored_option_warning
from atlasaug.volume import LabelMap, Volume
from atlasaug.volume_io import read_volume, write_volume

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def gen_phantoms(args: argparse.Namespace) -> int:
    spec = PhantomSpec(
        spatial_rank=args.rank,
        size=args.size,
        num_structures=args.classes,
        lesion_rate=args.lesion_rate,
        seed=args.seed,
    )
    cohort = make_cohort(spec, args.count_unlabeled, args.count_heldout, workers=args.workers)
    save_cohort(cohort, args.out)
    print(f"wrote {len(cohort)} volumes to {args.out}")
    return EXIT_OK


def train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    cohort = load_cohort(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, cohort.atlas, device=config.device)
        stored, requested = trainer.config.to_dict(), config.to_dict()
        ignored = sorted(key for key in requested if requested[key] != stored[key])
        if ignored:
            ignored_option_warning(f"resuming with the checkpoint config; ignoring {', '.join(ignored)}")
    else:
        trainer = Trainer(config, cohort.atlas)
    save_config(trainer.config, out / "config.txt")
    state = trainer.train(cohort.unlabeled, validation=cohort.heldout, output_dir=out)
    summary = f"trained {state.iteration} iterations"
    if state.best_dice is not None:
        summary += f", best validation dice {state.best_dice:.4f}"
    if state.stopped_early:
        summary += " (stopped early)"
    print(summary)
    return EXIT_OK


def segment(args: argparse.Namespace) -> int:
    network = load_segmenter(args.checkpoint, device=args.device)
    image = read_volume(getattr(args, "in"))
    if not isinstance(image, Volume):
        raise EvaluationError(f"'{getattr(args, 'in')}' holds labels, expected an intensity volume")
    labels = predict_labels(network, image.data)
    write_volume(args.out, LabelMap(labels, network.num_classes))
    return EXIT_OK


def evaluate(args: argparse.Namespace) -> int:
    report = evaluate_directories(args.pred, args.gt)
    write_reports(args.report, report.to_dict(), EvaluationTableFormatter)
    print(EvaluationTableFormatter.format(report.to_dict()), end="")
    return EXIT_OK


def ablation(args: argparse.Namespace) -> int:
    cohort = load_cohort(args.data)
    base = _base_config(args.config)
    out = Path(args.out)
    if args.registration:
        requested = args.variants or ",".join(REGISTRATION_VARIANTS)
        variants = parse_variants(requested, known=REGISTRATION_VARIANTS)
        document = run_registration_ablation(cohort, base, variants)
        write_reports(out / "registration.json", document, RegistrationTableFormatter)
        print(RegistrationTableFormatter.format(document), end="")
        return EXIT_OK
    variants = parse_variants(args.variants or ",".join(VARIANTS))
    results = run_ablation(cohort, variants, base, output_dir=out)
    document = ablation_document(results)
    write_reports(out / "ablation.json", document, AblationTableFormatter)
    print(AblationTableFormatter.format(document), end="")
    return EXIT_OK


def scarcity(args: argparse.Namespace) -> int:
    cohort = load_cohort(args.data)
    try:
        counts = [int(count) for count in args.counts.split(",") if count.strip()]
    except ValueError as error:
        raise ConfigError(f"counts must be comma separated integers, got '{args.counts}'") from error
    variants = parse_variants(args.variants)
    document = run_scarcity(cohort, counts, _base_config(args.config), variants, output_dir=Path(args.out))
    write_reports(Path(args.out) / "scarcity.json", document, ScarcityTableFormatter)
    print(ScarcityTableFormatter.format(document), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasaug", description="One-shot atlas segmentation with learned augmentation."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("gen-phantoms", help="generate a phantom cohort")
    command.add_argument("--out", required=True)
    command.add_argument("--size", type=int, default=32)
    command.add_argument("--count-unlabeled", type=int, required=True)
    command.add_argument("--count-heldout", type=int, required=True)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--rank", type=int, choices=(2, 3), default=3)
    command.add_argument("--classes", type=int, default=9, help="number of classes, background included")
    command.add_argument("--lesion-rate", type=float, default=0.2)
    command.add_argument("--workers", type=int, default=1)
    command.set_defaults(handler=gen_phantoms)

    command = commands.add_parser("train", help="train on a cohort directory")
    command.add_argument("--config", required=True)
    command.add_argument("--data", required=True)
    command.add_argument("--out", required=True)
    command.add_argument("--resume", help="checkpoint to resume from")
    command.set_defaults(handler=train)

    command = commands.add_parser("segment", help="segment one volume")
    command.add_argument("--checkpoint", required=True)
    command.add_argument("--in", required=True)
    command.add_argument("--out", required=True)
    command.add_argument("--device", default="cpu")
    command.set_defaults(handler=segment)

    command = commands.add_parser("evaluate", help="Dice of predicted against ground truth label volumes")
    command.add_argument("--pred", required=True)
    command.add_argument("--gt", required=True)
    command.add_argument("--report", required=True)
    command.set_defaults(handler=evaluate)

    command = commands.add_parser("ablation", help="train and compare variants")
    command.add_argument("--data", required=True)
    command.add_argument("--variants", help="comma separated variant ids, all by default")
    command.add_argument("--out", required=True)
    command.add_argument("--config", help="base training config")
    command.add_argument(
        "--registration",
        action="store_true",
        help=f"registration variants: {', '.join(REGISTRATION_VARIANTS)}",
    )
    command.set_defaults(handler=ablation)

    command = commands.add_parser("scarcity", help="mean Dice against the number of unlabeled images")
    command.add_argument("--data", required=True)
    command.add_argument("--counts", required=True)
    command.add_argument("--out", required=True)
    command.add_argument("--variants", default=",".join(SCARCITY_VARIANTS))
    command.add_argument("--config", help="base training config")
    command.set_defaults(handler=scarcity)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return EXIT_USAGE if error.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except (AtlasAugError, OSError) as error:
        LOG.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {error}", file=sys.stderr)
        return EXIT_ERROR


def _base_config(path: Optional[str]) -> TrainConfig:
    return load_config(path) if path else TrainConfig()
