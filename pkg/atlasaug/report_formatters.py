import json
from pathlib import Path
from typing import Type, Union

from atlasaug.retrying import retry_io
from atlasaug.utils.typing import JsonType

# Dice is reported in points, i.e. percent.
DICE_POINTS = 100.0


class BaseReportFormatter:
    """Render a report document as text and name the file extension it belongs in."""

    extension = None

    @classmethod
    def format(cls, document: JsonType) -> str:
        raise NotImplementedError


class JsonReportFormatter(BaseReportFormatter):
    """The machine-readable document."""

    extension = ".json"

    @classmethod
    def format(cls, document: JsonType) -> str:
        return json.dumps(document, indent=2, sort_keys=True) + "\n"


class EvaluationTableFormatter(BaseReportFormatter):
    """Summary line and per-class rows of an evaluation report."""

    extension = ".txt"

    @classmethod
    def format(cls, document: JsonType) -> str:
        lines = [
            f"{'Mean ± Std':>16} {'Min':>7} {'Max':>7} {'Subjects':>9}",
            f"{_points(document['mean']):>7} ± {_points(document['std']):<6} "
            f"{_points(document['min']):>7} {_points(document['max']):>7} {len(document['per_subject']):>9}",
            "",
            f"{'Class':>5} {'Dice':>7}",
        ]
        for label, dice in sorted(document["per_class_dice"].items(), key=lambda item: int(item[0])):
            lines.append(f"{label:>5} {_points(dice):>7}")
        return "\n".join(lines) + "\n"


class AblationTableFormatter(BaseReportFormatter):
    """One row per variant, best mean Dice first."""

    extension = ".txt"

    @classmethod
    def format(cls, document: JsonType) -> str:
        lines = [f"{'Rank':>4} {'Variant':<10} {'Mean ± Std':>16} {'Min':>7} {'Max':>7}  Config"]
        for rank, result in enumerate(document["results"], start=1):
            report = result["report"]
            lines.append(
                f"{rank:>4} {result['variant']:<10} "
                f"{_points(report['mean']):>7} ± {_points(report['std']):<6} "
                f"{_points(report['min']):>7} {_points(report['max']):>7}  {result['config_hash']}"
            )
        return "\n".join(lines) + "\n"


class RegistrationTableFormatter(BaseReportFormatter):
    extension = ".txt"

    @classmethod
    def format(cls, document: JsonType) -> str:
        lines = [f"{'Variant':<10} {'Dice':>7} {'Residual':>10}"]
        for result in document["results"]:
            lines.append(
                f"{result['variant']:<10} {_points(result['warped_label_dice']):>7} "
                f"{result['inverse_consistency_residual']:>10.5f}"
            )
        return "\n".join(lines) + "\n"


class ScarcityTableFormatter(BaseReportFormatter):
    """The (count, variant, mean Dice) series and the drop of each variant."""

    extension = ".txt"

    @classmethod
    def format(cls, document: JsonType) -> str:
        lines = [f"{'Count':>5} {'Variant':<10} {'Dice':>7}"]
        for point in document["series"]:
            lines.append(f"{point['count']:>5} {point['variant']:<10} {_points(point['mean_dice']):>7}")
        lines.append("")
        lines.append(f"{'Variant':<10} {'Drop':>7}")
        for variant, drop in sorted(document["drop"].items()):
            lines.append(f"{variant:<10} {_points(drop):>7}")
        return "\n".join(lines) + "\n"


def write_report(path: Union[str, Path], document: JsonType, formatter: Type[BaseReportFormatter]):
    if not (formatter and issubclass(formatter, BaseReportFormatter)):
        raise RuntimeError("provided formatter must be a subclass of BaseReportFormatter.")
    _write_text(Path(path), formatter.format(document))


def write_reports(path: Union[str, Path], document: JsonType, table_formatter: Type[BaseReportFormatter]):
    """Write the JSON document at ``path`` and the human table next to it.

    A ``path`` with the table's extension receives the table, and the
    document goes next to it with a ``.json`` extension.
    """
    path = Path(path)
    table_path = path.with_suffix(table_formatter.extension)
    json_path = path.with_suffix(JsonReportFormatter.extension) if path == table_path else path
    write_report(json_path, document, JsonReportFormatter)
    write_report(table_path, document, table_formatter)


@retry_io
def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _points(dice: float) -> str:
    return f"{dice * DICE_POINTS:.1f}"
