import logging
import os
from pathlib import Path
from typing import Union

import torch

from atlasaug.exceptions import CheckpointError
from atlasaug.retrying import retry_io

LOG = logging.getLogger(__name__)

PathLike = Union[str, Path]


@retry_io
def _write(payload: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    # `path` only ever holds a complete payload: it is replaced by rename.
    partial = path.with_name(path.name + ".partial")
    torch.save(payload, partial)
    os.replace(partial, path)


def save_checkpoint(payload: dict, path: PathLike):
    """Save a checkpoint payload (state dicts, counters, plain config values)."""
    path = Path(path)
    try:
        _write(payload, path)
    except OSError as error:
        raise CheckpointError(f"unable to write checkpoint '{path}'", info=str(error)) from error
    LOG.info("saved checkpoint %s", path)


def load_checkpoint(path: PathLike, map_location="cpu") -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except OSError as error:
        raise CheckpointError(f"unable to read checkpoint '{path}'", info=str(error)) from error
    except Exception as error:
        raise CheckpointError(f"checkpoint '{path}' is not a valid checkpoint", info=str(error)) from error
    if not isinstance(payload, dict) or "networks" not in payload:
        raise CheckpointError(f"checkpoint '{path}' does not contain network parameters")
    return payload
