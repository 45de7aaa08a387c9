"""Shared domain types for the separation pipelines.

All types are immutable after construction (frozen dataclasses over
read-only arrays), so instances can be shared between concurrent workers.
Value-level problems on samples are reported by :func:`validate_sample`
as data, not exceptions, so that broken datasets can be inventoried.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError, ParameterError
from .images import CHANNELS, check_image, freeze, image_violations

SYNTHETIC_CONSISTENCY_TOL = 1e-6

COUPLING_MODES = ("coupled", "l1_only", "independent_gans")


def default_stain_names(n: int) -> list[str]:
    return [f"stain{i}" for i in range(n)]


@dataclass(frozen=True)
class SourceSet:
    """Ordered collection of N single-stain images sharing dimensions.

    Order is significant and stable: index ``i`` is stain ``i`` throughout
    the package, including on-disk ``_src<i>`` files.
    """

    sources: tuple[np.ndarray, ...]
    stain_names: tuple[str, ...] = ()

    def __init__(self, sources, stain_names=None):
        srcs = tuple(freeze(np.asarray(s)) for s in sources)
        if len(srcs) < 1:
            raise ParameterError("SourceSet requires at least one source")
        for i, s in enumerate(srcs):
            if s.ndim != 3 or s.shape[2] != CHANNELS:
                raise DimensionError(
                    f"source {i}: expected (H, W, {CHANNELS}) array, got {s.shape}"
                )
            if s.shape != srcs[0].shape:
                raise DimensionError(
                    f"source {i} shape {s.shape} differs from source 0 {srcs[0].shape}"
                )
        names = tuple(stain_names) if stain_names else tuple(default_stain_names(len(srcs)))
        if len(names) != len(srcs):
            raise ParameterError(
                f"{len(names)} stain names for {len(srcs)} sources"
            )
        object.__setattr__(self, "sources", srcs)
        object.__setattr__(self, "stain_names", names)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.sources[0].shape

    def __len__(self) -> int:
        return len(self.sources)

    def __iter__(self):
        return iter(self.sources)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.sources[i]

    def permuted(self, order) -> "SourceSet":
        """Reorder sources (and names) by the given index sequence."""
        idx = list(order)
        if sorted(idx) != list(range(self.n_sources)):
            raise ParameterError(f"not a permutation of 0..{self.n_sources - 1}: {order}")
        return SourceSet([self.sources[i] for i in idx], [self.stain_names[i] for i in idx])


@dataclass(frozen=True)
class Sample:
    """One supervised pair: a mixed image and its ground-truth decomposition.

    ``synthetic`` marks samples built by the exact linear synthesis model;
    only those are held to the mixed == clamp(sum of sources) consistency
    check. Real microscopy pairs carry no such guarantee.
    """

    mixed: np.ndarray
    truth: SourceSet
    id: str
    synthetic: bool = False

    def __init__(self, mixed, truth: SourceSet, id: str, synthetic: bool = False):
        object.__setattr__(self, "mixed", freeze(np.asarray(mixed)))
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "id", str(id))
        object.__setattr__(self, "synthetic", bool(synthetic))


def validate_sample(sample: Sample) -> list[str]:
    """Check every Sample invariant; return one description per violation.

    An empty list means the sample is valid. Violations name the failed
    invariant so reports stay greppable.
    """
    violations: list[str] = []
    violations += image_violations(sample.mixed, "mixed")
    for i, src in enumerate(sample.truth):
        violations += image_violations(src, f"truth[{i}]")
    if any(v.startswith("shape") for v in violations):
        return violations

    for i, src in enumerate(sample.truth):
        if src.shape != sample.mixed.shape:
            violations.append(
                f"dimension-match: truth[{i}] is {src.shape[:2]}, "
                f"mixed is {sample.mixed.shape[:2]}"
            )
    if sample.synthetic and not violations:
        resynth = np.clip(np.sum(np.stack(sample.truth.sources), axis=0), 0.0, 1.0)
        err = float(np.max(np.abs(resynth - sample.mixed)))
        if err > SYNTHETIC_CONSISTENCY_TOL:
            violations.append(
                "synthetic-consistency: mixed differs from clamp(sum of truth) "
                f"by {err:.3g} (tolerance {SYNTHETIC_CONSISTENCY_TOL:g})"
            )
    return violations


@dataclass(frozen=True)
class SpectrumMatrix:
    """N RGB spectrum columns, non-negative and unit Euclidean norm.

    The linear model is scale-ambiguous between a spectrum and its density
    map, so magnitude is absorbed into the densities and columns are kept
    unit-norm as the gauge convention.
    """

    columns: np.ndarray  # (3, N)

    def __init__(self, columns):
        v = np.asarray(columns, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != CHANNELS:
            raise DimensionError(
                f"spectrum matrix must be ({CHANNELS}, N), got {v.shape}"
            )
        if not np.isfinite(v).all() or (v < 0).any():
            raise ParameterError("spectrum entries must be finite and non-negative")
        norms = np.linalg.norm(v, axis=0)
        if (norms == 0).any():
            raise ParameterError("spectrum columns must be nonzero")
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ParameterError(
                "spectrum columns must be unit-norm; normalize() builds one"
            )
        object.__setattr__(self, "columns", freeze(v))

    @staticmethod
    def normalize(columns) -> "SpectrumMatrix":
        """Build a SpectrumMatrix by rescaling each column to unit norm."""
        v = np.asarray(columns, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != CHANNELS:
            raise DimensionError(
                f"spectrum matrix must be ({CHANNELS}, N), got {v.shape}"
            )
        norms = np.linalg.norm(v, axis=0)
        if (norms == 0).any():
            raise ParameterError("spectrum columns must be nonzero")
        return SpectrumMatrix(v / norms)

    @property
    def n_sources(self) -> int:
        return self.columns.shape[1]

    def column(self, i: int) -> np.ndarray:
        return self.columns[:, i]


@dataclass(frozen=True)
class DensityMaps:
    """N planes of per-pixel stain proportions, non-negative and finite."""

    maps: np.ndarray  # (N, H, W)

    def __init__(self, maps):
        d = np.asarray(maps, dtype=np.float64)
        if d.ndim != 3:
            raise DimensionError(f"density maps must be (N, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ParameterError("density entries must be finite")
        if (d < 0).any():
            raise ParameterError("density entries must be non-negative")
        object.__setattr__(self, "maps", freeze(d))

    @property
    def n_sources(self) -> int:
        return self.maps.shape[0]

    @property
    def height(self) -> int:
        return self.maps.shape[1]

    @property
    def width(self) -> int:
        return self.maps.shape[2]


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of one training run.

    ``coupling_mode`` selects the method: ``coupled`` is the shared-
    discriminator model-aware scheme, ``l1_only`` the plain regression
    baseline (adversarial loss permanently disabled), ``independent_gans``
    per-source conditional GANs.
    """

    n_sources: int = 2
    lambda_adv: float = 0.01
    alpha: float = 75.0
    learning_rate: float = 0.0002
    momentum1: float = 0.5
    momentum2: float = 0.999
    batch_size: int = 1
    total_iterations: int = 2000
    seed: int = 0
    coupling_mode: str = "coupled"
    # network geometry; defaults follow the 256x256 reference architecture
    image_size: int = 256
    base_width: int = 64
    norm: str = "batch"
    # operational knobs
    checkpoint_every: int = 500
    non_saturating: bool = False
    share_batch: bool = False

    def __post_init__(self):
        if self.n_sources < 1:
            raise ConfigError("n_sources must be >= 1")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")
        if not 0.0 <= self.alpha <= 100.0:
            raise ConfigError("alpha is a percentage in [0, 100]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum1 < 1.0 or not 0.0 <= self.momentum2 < 1.0:
            raise ConfigError("momentum parameters must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.coupling_mode not in COUPLING_MODES:
            raise ConfigError(
                f"coupling_mode must be one of {COUPLING_MODES}, got {self.coupling_mode!r}"
            )
        if self.image_size < 8 or (self.image_size & (self.image_size - 1)) != 0:
            raise ConfigError("image_size must be a power of two >= 8")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.norm not in ("batch", "instance", "none"):
            raise ConfigError("norm must be 'batch', 'instance' or 'none'")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def levels(self) -> int:
        """Encoder depth: downsample by 2 until the bottleneck is 1x1."""
        return int(round(math.log2(self.image_size)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**d)
