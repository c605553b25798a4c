"""Procedural phantom cohorts: a labeled template and deformed, shaded subjects.

The template is a nested pair of ellipsoids (an outer shell around an inner
body) holding small ellipsoidal cavities and two-lobed blobs, one class each.
Subjects are the template under a band-limited random displacement followed by
image-only effects: per-class intensity jitter, a smooth multiplicative bias
field, additive noise and, occasionally, a lesion that leaves labels alone.

Every random stream is derived from ``numpy.random.SeedSequence`` so a cohort
is a pure function of its spec and counts.
"""
import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from atlasaug.exceptions import ConfigError, PhantomGenerationError, ShapeMismatchError
from atlasaug.retrying import generation_attempts
from atlasaug.utils.typing import SeedList
from atlasaug.volume import Atlas, LabelMap, Volume
from atlasaug.volume_io import read_volume, write_volume
from atlasaug.warping import warp_labels, warp_volume

LOG = logging.getLogger(__name__)

MANIFEST_FORMAT = 1
MAX_STRUCTURES = 28
MAX_PLACEMENT_ATTEMPTS = 500
# Radii of the outer and inner ellipsoids as a fraction of the half-extent.
OUTER_RADIUS = 0.8
INNER_RADIUS = 0.6
# Structures must keep at least this many voxels.
MIN_STRUCTURE_VOXELS = 4
MIN_RADIUS_VOXELS = 1.5
# Fraction of the inner body covered by the bounding balls of the small structures.
PACKING_DENSITY = 0.2
# Second lobe of a blob: scale of the first lobe, and reach of both from the centre.
LOBE_SCALE = 0.8
LOBE_EXTENT = 1.4
LESION_CONTRAST = 0.5
LESION_RADIUS = 0.08
# Independent streams of one subject.
_STREAMS = ("deformation", "jitter", "bias", "noise", "lesion")
_TEMPLATE_STREAM = 2**31 - 1


@dataclass(frozen=True)
class PhantomSpec:
    spatial_rank: int = 3
    size: int = 32
    # Number of classes, background included.
    num_structures: int = 9
    deform_amplitude: float = 2.0
    deform_smoothness: float = 4.0
    bias_amplitude: float = 0.1
    noise_sigma: float = 0.02
    intensity_jitter: float = 0.05
    lesion_rate: float = 0.2
    seed: int = 0
    # Network depth the size must suit.
    levels: int = 4

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        divisor = 2 ** (self.levels - 1)
        if self.size < 2 * divisor or self.size % divisor:
            raise ShapeMismatchError(
                f"size {self.size} must be a multiple of {divisor} no smaller than {2 * divisor}"
            )
        if not 2 <= self.num_structures <= MAX_STRUCTURES:
            raise ConfigError(f"num_structures must lie in [2, {MAX_STRUCTURES}], got {self.num_structures}")
        for name in ("deform_amplitude", "bias_amplitude", "noise_sigma", "intensity_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.deform_smoothness <= 0:
            raise ConfigError(f"deform_smoothness must be positive, got {self.deform_smoothness}")
        if not 0 <= self.lesion_rate <= 1:
            raise ConfigError(f"lesion_rate must lie in [0, 1], got {self.lesion_rate}")

    @classmethod
    def fast_2d(cls, **changes) -> "PhantomSpec":
        """64x64 slices, the quick CPU mode."""
        return cls(**{"spatial_rank": 2, "size": 64, **changes})

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.size,) * self.spatial_rank

    def replace(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "PhantomSpec":
        names = {spec_field.name for spec_field in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class SimulatedSubject:
    """A subject with the quantities that produced it."""

    image: Volume
    labels: LabelMap
    displacement: torch.Tensor
    amplitude: float
    lesion: Optional[np.ndarray] = None


@dataclass(frozen=True)
class CohortManifest:
    spec: PhantomSpec
    n_unlabeled: int
    n_heldout: int
    unlabeled_seeds: SeedList
    heldout_seeds: SeedList

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "spec": self.spec.to_dict(),
            "n_unlabeled": self.n_unlabeled,
            "n_heldout": self.n_heldout,
            "unlabeled_seeds": list(self.unlabeled_seeds),
            "heldout_seeds": list(self.heldout_seeds),
        }

    @classmethod
    def from_dict(cls, document: dict) -> "CohortManifest":
        if document.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"unsupported manifest format {document.get('format')}")
        try:
            manifest = cls(
                spec=PhantomSpec.from_dict(document["spec"]),
                n_unlabeled=document["n_unlabeled"],
                n_heldout=document["n_heldout"],
                unlabeled_seeds=list(document["unlabeled_seeds"]),
                heldout_seeds=list(document["heldout_seeds"]),
            )
        except KeyError as error:
            raise ConfigError(f"manifest is missing {error}") from error
        counts = (len(manifest.unlabeled_seeds), len(manifest.heldout_seeds))
        if counts != (manifest.n_unlabeled, manifest.n_heldout):
            raise ConfigError("manifest seed lists do not match the subject counts")
        return manifest


@dataclass
class Cohort:
    atlas: Atlas
    unlabeled: List[Volume]
    heldout: List[Tuple[Volume, LabelMap]]
    manifest: CohortManifest
    # Ground truth of the unlabeled images, for evaluation only.
    unlabeled_truth: List[LabelMap] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return 1 + len(self.unlabeled) + len(self.heldout)

    def truncated(self, n_unlabeled: int) -> "Cohort":
        """The same cohort restricted to its first ``n_unlabeled`` unlabeled images."""
        if not 1 <= n_unlabeled <= len(self.unlabeled):
            raise ConfigError(f"n_unlabeled must lie in [1, {len(self.unlabeled)}], got {n_unlabeled}")
        manifest = dataclasses.replace(
            self.manifest,
            n_unlabeled=n_unlabeled,
            unlabeled_seeds=self.manifest.unlabeled_seeds[:n_unlabeled],
        )
        return Cohort(
            atlas=self.atlas,
            unlabeled=self.unlabeled[:n_unlabeled],
            heldout=self.heldout,
            manifest=manifest,
            unlabeled_truth=self.unlabeled_truth[:n_unlabeled],
        )


def make_template(spec: PhantomSpec) -> Atlas:
    """Build the labeled template; it doubles as the atlas of a cohort."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _TEMPLATE_STREAM]))
    coords = _normalized_grid(spec)
    labels = np.zeros(spec.shape, dtype=np.int64)
    outer = OUTER_RADIUS * rng.uniform(0.92, 1.0, size=spec.spatial_rank)
    labels[_ellipsoid(coords, np.zeros(spec.spatial_rank), outer)] = 1
    inner = outer * INNER_RADIUS / OUTER_RADIUS
    if spec.num_structures >= 3:
        labels[_ellipsoid(coords, np.zeros(spec.spatial_rank), inner)] = 2
    _place_structures(spec, rng, coords, labels, inner)

    counts = np.bincount(labels.ravel(), minlength=spec.num_structures)
    if counts.min() < MIN_STRUCTURE_VOXELS:
        raise PhantomGenerationError(
            f"class {int(counts.argmin())} has {int(counts.min())} voxels at size {spec.size}; "
            f"reduce num_structures ({spec.num_structures}) or increase size"
        )
    intensities = _class_intensities(spec.num_structures, rng)
    image = intensities[labels].astype(np.float32)
    LOG.debug("template with %d classes, voxel counts %s", spec.num_structures, counts.tolist())
    return Atlas(image=Volume.from_array(image), labels=LabelMap.from_array(labels, spec.num_structures))


def simulate_subject(template: Atlas, spec: PhantomSpec, subject_seed: int) -> SimulatedSubject:
    """Deform the template, then apply image-only effects.

    If the deformation wipes out a class the amplitude is halved and the same
    displacement direction is tried again.
    """
    streams = dict(zip(_STREAMS, (np.random.default_rng(seed) for seed in _spawn(subject_seed))))
    direction = _smooth_direction(spec, streams["deformation"])
    template_labels = template.labels.data
    expected = torch.unique(template_labels)

    for attempt in generation_attempts():
        with attempt:
            amplitude = spec.deform_amplitude * 0.5 ** (attempt.retry_state.attempt_number - 1)
            displacement = (direction * amplitude).unsqueeze(0)
            labels = warp_labels(template_labels, displacement, template.num_classes)
            _check_classes(labels, expected, amplitude)

    class_image = _jittered_template(template, spec, streams["jitter"])
    image = warp_volume(class_image, displacement).squeeze(0).squeeze(0).numpy().astype(np.float64)
    if spec.bias_amplitude > 0:
        image = image * (1 + spec.bias_amplitude * _smooth_unit_field(spec, streams["bias"], spec.size / 4))
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * streams["noise"].standard_normal(spec.shape)
    lesion = None
    if spec.lesion_rate > 0 and streams["lesion"].random() < spec.lesion_rate:
        lesion, profile = _lesion(spec, streams["lesion"], labels[0].numpy())
        image = image + LESION_CONTRAST * profile
    return SimulatedSubject(
        image=Volume.from_array(image.astype(np.float32)),
        labels=LabelMap(labels, template.num_classes),
        displacement=displacement,
        amplitude=amplitude,
        lesion=lesion,
    )


def make_subject(template: Atlas, spec: PhantomSpec, subject_seed: int) -> Tuple[Volume, LabelMap]:
    subject = simulate_subject(template, spec, subject_seed)
    return subject.image, subject.labels


def subject_seeds(seed: int, start: int, count: int) -> SeedList:
    """Per-subject seeds, one independent stream per (seed, subject index)."""
    indices = range(start, start + count)
    return [int(np.random.SeedSequence([seed, index]).generate_state(1)[0]) for index in indices]


def make_cohort(spec: PhantomSpec, n_unlabeled: int, n_heldout: int, workers: int = 1) -> Cohort:
    if n_unlabeled < 1 or n_heldout < 1:
        raise ConfigError(
            f"subject counts must be >= 1, got {n_unlabeled} unlabeled and {n_heldout} heldout"
        )
    manifest = CohortManifest(
        spec=spec,
        n_unlabeled=n_unlabeled,
        n_heldout=n_heldout,
        unlabeled_seeds=subject_seeds(spec.seed, 0, n_unlabeled),
        heldout_seeds=subject_seeds(spec.seed, n_unlabeled, n_heldout),
    )
    return cohort_from_manifest(manifest, workers=workers)


def cohort_from_manifest(manifest: Union[CohortManifest, dict], workers: int = 1) -> Cohort:
    """Regenerate a cohort from its manifest."""
    if isinstance(manifest, dict):
        manifest = CohortManifest.from_dict(manifest)
    spec = manifest.spec
    template = make_template(spec)
    seeds = list(manifest.unlabeled_seeds) + list(manifest.heldout_seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subjects = list(pool.map(lambda seed: make_subject(template, spec, seed), seeds))
    else:
        subjects = [make_subject(template, spec, seed) for seed in seeds]
    unlabeled = subjects[: manifest.n_unlabeled]
    LOG.info(
        "generated cohort: %d unlabeled, %d heldout, rank %d, size %d",
        manifest.n_unlabeled,
        manifest.n_heldout,
        spec.spatial_rank,
        spec.size,
    )
    return Cohort(
        atlas=template,
        unlabeled=[image for image, _ in unlabeled],
        heldout=subjects[manifest.n_unlabeled :],
        manifest=manifest,
        unlabeled_truth=[labels for _, labels in unlabeled],
    )


def save_cohort(cohort: Cohort, directory: Union[str, Path]):
    """Write the cohort in the directory layout `load_cohort` reads."""
    directory = Path(directory)
    write_volume(directory / "atlas" / "image.avl", cohort.atlas.image)
    write_volume(directory / "atlas" / "labels.avl", cohort.atlas.labels)
    for index, image in enumerate(cohort.unlabeled):
        write_volume(directory / "unlabeled" / f"{index:04d}.avl", image)
    for index, (image, labels) in enumerate(cohort.heldout):
        write_volume(directory / "heldout" / "images" / f"{index:04d}.avl", image)
        write_volume(directory / "heldout" / "labels" / f"{index:04d}.avl", labels)
    manifest = json.dumps(cohort.manifest.to_dict(), indent=2, sort_keys=True)
    (directory / "manifest.json").write_text(manifest + "\n", encoding="utf-8")
    LOG.info("saved cohort to %s", directory)


def load_cohort(directory: Union[str, Path]) -> Cohort:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = CohortManifest.from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (OSError, ValueError) as error:
        raise ConfigError(f"unable to read cohort manifest '{manifest_path}'") from error
    num_classes = manifest.spec.num_structures
    atlas_labels = _relabel(read_volume(directory / "atlas" / "labels.avl"), num_classes)
    atlas = Atlas(image=read_volume(directory / "atlas" / "image.avl"), labels=atlas_labels)
    unlabeled = [
        read_volume(directory / "unlabeled" / f"{index:04d}.avl") for index in range(manifest.n_unlabeled)
    ]
    heldout = [
        (
            read_volume(directory / "heldout" / "images" / f"{index:04d}.avl"),
            _relabel(read_volume(directory / "heldout" / "labels" / f"{index:04d}.avl"), num_classes),
        )
        for index in range(manifest.n_heldout)
    ]
    return Cohort(atlas=atlas, unlabeled=unlabeled, heldout=heldout, manifest=manifest)


def _relabel(labels: LabelMap, num_classes: int) -> LabelMap:
    """A label file only knows its largest value; restore the cohort's class count."""
    return LabelMap(labels.data, num_classes)


def _spawn(subject_seed: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(subject_seed).spawn(len(_STREAMS))


def _normalized_grid(spec: PhantomSpec) -> np.ndarray:
    """Voxel centres mapped to [-1, 1] per axis, shape ``(D, *spatial)``."""
    axis = (np.arange(spec.size) + 0.5) / spec.size * 2 - 1
    return np.stack(np.meshgrid(*([axis] * spec.spatial_rank), indexing="ij"))


def _ellipsoid(coords: np.ndarray, centre: np.ndarray, radii: np.ndarray) -> np.ndarray:
    shape = (-1,) + (1,) * (coords.ndim - 1)
    scaled = (coords - centre.reshape(shape)) / radii.reshape(shape)
    return (scaled**2).sum(axis=0) <= 1


def _place_structures(spec: PhantomSpec, rng: np.random.Generator, coords, labels, inner: np.ndarray):
    """Place the small structures (classes 3 and up) inside the inner body without overlap.

    Odd structures are two-lobed blobs, the others single ellipsoids. The
    bounding balls of all structures fill ``PACKING_DENSITY`` of the body.
    """
    first = 3
    count = spec.num_structures - first
    if count <= 0:
        return
    rank = spec.spatial_rank
    body = float(inner.min())
    radius = (PACKING_DENSITY / count) ** (1 / rank) * body / LOBE_EXTENT
    radius = max(radius, MIN_RADIUS_VOXELS * 2 / spec.size)
    placed = []
    for label in range(first, first + count):
        lobed = (label - first) % 2 == 1
        radii = radius * rng.uniform(0.95, 1.05, size=rank)
        bound = float(radii.max()) * (LOBE_EXTENT if lobed else 1.0)
        if bound >= body:
            raise PhantomGenerationError(f"no room for {count} structures at size {spec.size}")
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            direction = rng.standard_normal(rank)
            direction /= np.linalg.norm(direction)
            centre = direction * rng.uniform() ** (1 / rank) * (inner - bound)
            if all(np.linalg.norm(centre - other) >= bound + other_bound for other, other_bound in placed):
                break
        else:
            raise PhantomGenerationError(
                f"cannot place structure {label} of {spec.num_structures} classes at size {spec.size}"
            )
        mask = _ellipsoid(coords, centre, radii)
        if lobed:
            offset = rng.standard_normal(rank)
            offset *= (LOBE_EXTENT - LOBE_SCALE) * float(radii.max()) / np.linalg.norm(offset)
            mask |= _ellipsoid(coords, centre + offset, radii * LOBE_SCALE)
        labels[mask] = label
        placed.append((centre, bound))


def _class_intensities(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Background at 0, the other classes at distinct levels in [0.2, 1]."""
    levels = np.linspace(0.2, 1.0, num_classes - 1)
    return np.concatenate([[0.0], rng.permutation(levels)])


def _smooth_unit_field(
    spec: PhantomSpec, rng: np.random.Generator, sigma: float, components: int = 0
) -> np.ndarray:
    """White noise, Gaussian smoothing, then scaling to a maximum magnitude of 1."""
    shape = (components,) + spec.shape if components else spec.shape
    noise = rng.standard_normal(shape)
    if components:
        smoothed = np.stack([gaussian_filter(part, sigma, mode="reflect") for part in noise])
        magnitude = np.sqrt((smoothed**2).sum(axis=0))
    else:
        smoothed = gaussian_filter(noise, sigma, mode="reflect")
        magnitude = np.abs(smoothed)
    peak = magnitude.max()
    return smoothed / peak if peak > 0 else smoothed


def _smooth_direction(spec: PhantomSpec, rng: np.random.Generator) -> torch.Tensor:
    """Displacement with peak magnitude 1, shape ``(D, *spatial)``."""
    unit = _smooth_unit_field(spec, rng, spec.deform_smoothness, components=spec.spatial_rank)
    return torch.from_numpy(unit.astype(np.float32))


def _check_classes(labels: torch.Tensor, expected: torch.Tensor, amplitude: float):
    present = torch.unique(labels)
    missing = sorted(set(expected.tolist()) - set(present.tolist()))
    if missing:
        raise PhantomGenerationError(f"classes {missing} vanished under deformation amplitude {amplitude:g}")


def _jittered_template(template: Atlas, spec: PhantomSpec, rng: np.random.Generator) -> torch.Tensor:
    """The template image with every class intensity scaled by its own random factor."""
    image = template.image.data
    if spec.intensity_jitter == 0:
        return image
    factors = 1 + spec.intensity_jitter * rng.standard_normal(template.num_classes)
    factors[0] = 1.0
    scale = torch.from_numpy(factors.astype(np.float32))[template.labels.data]
    return image * scale.unsqueeze(1)


def _lesion(
    spec: PhantomSpec, rng: np.random.Generator, labels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """A ball inside the foreground with a linearly decaying intensity profile."""
    foreground = np.argwhere(labels > 0)
    centre = foreground[rng.integers(len(foreground))]
    radius = max(LESION_RADIUS * spec.size, 1.5)
    grid = np.stack(np.meshgrid(*[np.arange(spec.size)] * spec.spatial_rank, indexing="ij"))
    distance = np.sqrt(((grid - centre.reshape((-1,) + (1,) * spec.spatial_rank)) ** 2).sum(axis=0))
    mask = distance <= radius
    profile = np.where(mask, 1 - distance / radius, 0.0)
    return mask, profile
