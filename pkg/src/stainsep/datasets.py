"""Dataset ingestion, patch extraction, splits and synthetic generation.

Folders follow the sibling-file convention: ``x.png`` is a mixed image and
``x_src0.png``, ``x_src1.png``, ... its single-stain ground truth (an
optional stain-name suffix ``x_src0_dapi.png`` is accepted). Manifests are
line-delimited JSON: a header record followed by one record per sample.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError, DimensionError, ParameterError
from .images import load_image, save_image
from .types import Sample, SourceSet, SpectrumMatrix

_IMAGE_EXTS = (".png", ".tif", ".tiff")


def _source_pattern(src_suffix: str) -> re.Pattern:
    return re.compile(
        rf"^(?P<stem>.+){re.escape(src_suffix)}(?P<idx>\d+)(?:_(?P<stain>[^.]+))?$"
    )

MANIFEST_FORMAT = "stainsep-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DatasetManifest:
    """Samples plus a train/test split covering every id exactly once."""

    samples: tuple[Sample, ...]
    split: dict
    seed: int
    patch_size: int

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")
        if set(self.split) != set(ids):
            raise DataError("split must cover every sample id exactly once")
        bad = {v for v in self.split.values()} - {"train", "test"}
        if bad:
            raise DataError(f"split values must be 'train' or 'test', got {sorted(bad)}")

    def subset(self, part: str) -> list[Sample]:
        if part not in ("train", "test"):
            raise ParameterError("part must be 'train' or 'test'")
        return [s for s in self.samples if self.split[s.id] == part]

    @property
    def train_samples(self) -> list[Sample]:
        return self.subset("train")

    @property
    def test_samples(self) -> list[Sample]:
        return self.subset("test")


def _factor_pairs(count: int) -> list[tuple[int, int]]:
    pairs = []
    for r in range(1, count + 1):
        if count % r == 0:
            pairs.append((r, count // r))
    return pairs


def _grid_feasible(r: int, c: int, height: int, width: int, patch: int) -> bool:
    fits_v = r == 1 or (height - patch) >= (r - 1)
    fits_h = c == 1 or (width - patch) >= (c - 1)
    return fits_v and fits_h


def choose_grid(height: int, width: int, patch: int, count: int) -> tuple[int, int]:
    """Pick the r x c factorization of ``count`` best matching the aspect ratio.

    Among feasible factor pairs (strides of at least one pixel, or a single
    row/column), the pair minimizing |log(r/c) - log(H/W)| wins; ties go to
    the smaller row count. Raises a parameter error naming the nearest
    feasible count when no pair fits.
    """
    if patch > min(height, width):
        raise ParameterError(
            f"patch {patch} exceeds image extent {height}x{width}"
        )
    if count < 1:
        raise ParameterError("count must be >= 1")
    feasible = [
        (r, c)
        for r, c in _factor_pairs(count)
        if _grid_feasible(r, c, height, width, patch)
    ]
    if not feasible:
        suggestion = _nearest_feasible_count(height, width, patch, count)
        raise ParameterError(
            f"count {count} has no r x c grid fitting a {height}x{width} image "
            f"with patch {patch}; nearest feasible count is {suggestion}"
        )
    target = math.log(height / width)
    return min(feasible, key=lambda rc: (abs(math.log(rc[0] / rc[1]) - target), rc[0]))


def _nearest_feasible_count(height: int, width: int, patch: int, count: int) -> int:
    for delta in range(1, count + 2):
        for cand in (count - delta, count + delta):
            if cand < 1:
                continue
            if any(
                _grid_feasible(r, c, height, width, patch)
                for r, c in _factor_pairs(cand)
            ):
                return cand
    return 1


def grid_offsets(
    height: int, width: int, patch: int, count: int
) -> list[tuple[int, int]]:
    """Top-left corners of the uniform (possibly overlapping) patch grid."""
    rows, cols = choose_grid(height, width, patch, count)
    stride_v = (height - patch) // (rows - 1) if rows > 1 else 0
    stride_h = (width - patch) // (cols - 1) if cols > 1 else 0
    return [(i * stride_v, j * stride_h) for i in range(rows) for j in range(cols)]


def extract_patches(
    mixed,
    truth: SourceSet,
    patch: int,
    count: int,
    id_prefix: str = "patch",
    synthetic: bool = False,
) -> list[Sample]:
    """Cut ``count`` aligned patch samples at identical grid coordinates.

    The mixed image and every source are cropped at the same offsets, so
    patch k of the mixed image corresponds exactly to patch k of each stain.
    """
    mixed = np.asarray(mixed, dtype=np.float64)
    if mixed.ndim != 3:
        raise DimensionError(f"mixed image must be (H, W, 3), got {mixed.shape}")
    if truth.shape != mixed.shape:
        raise DimensionError(
            f"truth shape {truth.shape} differs from mixed {mixed.shape}"
        )
    h, w, _ = mixed.shape
    offsets = grid_offsets(h, w, patch, count)
    out = []
    for k, (y, x) in enumerate(offsets):
        sub_truth = SourceSet(
            [s[y : y + patch, x : x + patch] for s in truth],
            truth.stain_names,
        )
        out.append(
            Sample(
                mixed[y : y + patch, x : x + patch],
                sub_truth,
                f"{id_prefix}_p{k:03d}",
                synthetic=synthetic,
            )
        )
    return out


def parent_id(sample_id: str) -> str:
    """Parent image id for a patch id (strips the ``_p<k>`` suffix)."""
    m = re.match(r"^(.*)_p\d+$", sample_id)
    return m.group(1) if m else sample_id


def make_split(
    samples,
    test_fraction: float,
    seed: int,
    by_parent: bool = False,
    patch_size: int | None = None,
) -> DatasetManifest:
    """Deterministic train/test split over samples.

    The default mode splits over individual samples with
    ``round(test_fraction * total)`` test entries. ``by_parent`` keeps all
    patches of one parent image on the same side (leakage-free, recommended
    for evaluation); it matches the fraction only at parent granularity.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ParameterError("need at least 2 samples to split")
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError("test_fraction must lie strictly between 0 and 1")
    ids = sorted(s.id for s in samples)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids")
    n_test = int(math.floor(test_fraction * len(ids) + 0.5))
    rng = np.random.default_rng(seed)

    if by_parent:
        parents = sorted({parent_id(i) for i in ids})
        order = [parents[k] for k in rng.permutation(len(parents))]
        members = {p: [i for i in ids if parent_id(i) == p] for p in parents}
        test_ids: set[str] = set()
        taken = 0
        for p in order:
            group = members[p]
            # stop once adding the group overshoots more than stopping undershoots
            if abs(taken + len(group) - n_test) > abs(taken - n_test):
                break
            test_ids.update(group)
            taken += len(group)
    else:
        order = [ids[k] for k in rng.permutation(len(ids))]
        test_ids = set(order[:n_test])

    split = {i: ("test" if i in test_ids else "train") for i in ids}
    if patch_size is None:
        patch_size = int(samples[0].mixed.shape[0])
    return DatasetManifest(
        samples=tuple(sorted(samples, key=lambda s: s.id)),
        split=split,
        seed=int(seed),
        patch_size=patch_size,
    )


@dataclass(frozen=True)
class FolderPair:
    """One matched triple found by :func:`load_folder`."""

    id: str
    mixed: np.ndarray
    truth: SourceSet
    mixed_path: str
    source_paths: tuple[str, ...]


def load_folder(root, src_suffix: str = "_src") -> tuple[list[FolderPair], list[str]]:
    """Match mixed/source triples under ``root``; unmatched files are reported.

    Returns ``(pairs, unmatched)``. Unmatched files are warnings rather than
    errors because public datasets routinely carry extraneous files.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    files = sorted(
        p for p in root.iterdir() if p.is_file() and p.suffix.lower() in _IMAGE_EXTS
    )
    pattern = _source_pattern(src_suffix)
    mixed_files: dict[str, Path] = {}
    sources: dict[str, dict[int, tuple[Path, str | None]]] = {}
    unmatched: list[str] = []
    for p in files:
        m = pattern.match(p.stem)
        if m:
            stem = m.group("stem")
            idx = int(m.group("idx"))
            slot = sources.setdefault(stem, {})
            if idx in slot:
                unmatched.append(f"{p.name}: duplicate source index {idx}")
                continue
            slot[idx] = (p, m.group("stain"))
        else:
            mixed_files[p.stem] = p

    pairs: list[FolderPair] = []
    for stem, path in mixed_files.items():
        slot = sources.pop(stem, {})
        if not slot:
            unmatched.append(f"{path.name}: no {src_suffix}<i> counterparts")
            continue
        indices = sorted(slot)
        if indices != list(range(len(indices))):
            unmatched.append(
                f"{path.name}: non-consecutive source indices {indices}"
            )
            continue
        mixed = load_image(path)
        imgs, names = [], []
        for i in indices:
            sp, stain = slot[i]
            imgs.append(load_image(sp))
            names.append(stain if stain else f"stain{i}")
        try:
            truth = SourceSet(imgs, names)
            if truth.shape != mixed.shape:
                raise DimensionError("source dimensions differ from mixed image")
        except (DimensionError, ParameterError) as exc:
            unmatched.append(f"{path.name}: {exc}")
            continue
        pairs.append(
            FolderPair(
                id=stem,
                mixed=mixed,
                truth=truth,
                mixed_path=str(path),
                source_paths=tuple(str(slot[i][0]) for i in indices),
            )
        )
    for stem, slot in sources.items():
        for i in sorted(slot):
            unmatched.append(f"{slot[i][0].name}: no mixed image {stem}")
    pairs.sort(key=lambda fp: fp.id)
    return pairs, unmatched


def default_spectra(n_sources: int) -> SpectrumMatrix:
    """Well-conditioned reference spectra.

    N=2 matches the fluorescence use case (blue nuclear stain, yellow
    membrane stain); larger N falls back to evenly spaced hues.
    """
    if n_sources == 2:
        cols = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    else:
        cols = np.stack(
            [colorsys.hsv_to_rgb(i / n_sources, 1.0, 1.0) for i in range(n_sources)],
            axis=1,
        )
    return SpectrumMatrix.normalize(cols)


def _blob_plane(
    rng: np.random.Generator,
    size: int,
    n_blobs: int,
    region: tuple[float, float] | None,
) -> np.ndarray:
    """Sum of compact Gaussian bumps; exactly zero outside their cutoff radius."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    plane = np.zeros((size, size))
    lo, hi = region if region else (0.0, 1.0)
    for _ in range(n_blobs):
        sigma = rng.uniform(size / 16.0, size / 8.0)
        cutoff = 3.0 * sigma
        if region:
            margin = min(cutoff, (hi - lo) * size / 2.0 - 1.0)
            cutoff = max(margin, 2.0)
            cx = rng.uniform(lo * size + cutoff, hi * size - cutoff)
        else:
            cx = rng.uniform(0, size)
        cy = rng.uniform(0, size)
        amp = rng.uniform(0.4, 0.9)
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        bump = np.exp(-r2 / (2.0 * sigma**2)) - math.exp(
            -(cutoff**2) / (2.0 * sigma**2)
        )
        plane += amp * np.clip(bump, 0.0, None)
    return np.minimum(plane, 1.0)


def synth_generate(
    n_samples: int,
    n_sources: int,
    image_size: int,
    seed: int,
    spectra: SpectrumMatrix | None = None,
    disjoint: bool = False,
    blobs_per_source: int = 3,
    id_prefix: str = "synth",
) -> list[Sample]:
    """Exact-consistency synthetic samples from random soft density blobs.

    Each source image is its spectrum times a random blob density plane and
    the mixed image is the clamped sum, so every sample satisfies the
    synthetic-consistency invariant bit-exactly. ``disjoint`` confines each
    source's blobs to its own vertical strip, forcing disjoint supports.
    """
    if image_size < 32:
        raise ParameterError("image_size must be >= 32")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    spectra = spectra if spectra is not None else default_spectra(n_sources)
    if spectra.n_sources != n_sources:
        raise DimensionError(
            f"spectra have {spectra.n_sources} columns, expected {n_sources}"
        )
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n_samples):
        imgs = []
        for i in range(n_sources):
            region = (i / n_sources, (i + 1) / n_sources) if disjoint else None
            dens = _blob_plane(rng, image_size, blobs_per_source, region)
            imgs.append(dens[:, :, None] * spectra.column(i)[None, None, :])
        mixed = np.clip(np.sum(imgs, axis=0), 0.0, 1.0)
        samples.append(
            Sample(
                mixed,
                SourceSet(imgs),
                f"{id_prefix}{k:04d}",
                synthetic=True,
            )
        )
    return samples


def source_filename(sample_id: str, index: int, stain: str | None = None) -> str:
    """Canonical on-disk name for source ``index`` of a sample."""
    stain_part = ""
    if stain and stain != f"stain{index}":
        safe = re.sub(r"[^A-Za-z0-9-]+", "-", stain).strip("-")
        if safe:
            stain_part = f"_{safe}"
    return f"{sample_id}_src{index}{stain_part}.png"


def write_manifest(manifest: DatasetManifest, out_dir) -> Path:
    """Write images plus a line-delimited manifest; returns the manifest path."""
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": manifest.seed,
            "patch_size": manifest.patch_size,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in manifest.samples:
            mixed_rel = os.path.join("images", f"{s.id}.png")
            save_image(s.mixed, out / mixed_rel)
            src_rels = []
            for i, (img, stain) in enumerate(zip(s.truth, s.truth.stain_names)):
                rel = os.path.join("images", source_filename(s.id, i, stain))
                save_image(img, out / rel)
                src_rels.append(rel)
            record = {
                "id": s.id,
                "mixed": mixed_rel,
                "sources": src_rels,
                "stains": list(s.truth.stain_names),
                "split": manifest.split[s.id],
                "synthetic": s.synthetic,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    """Load a manifest file and every image it references."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    base = path.parent
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
    samples, split = [], {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        # file round-trips quantize to 8 bit, which breaks the 1e-6
        # synthetic-consistency bound; reloaded samples are not re-flagged
        truth = SourceSet(
            [load_image(base / sp) for sp in rec["sources"]], rec["stains"]
        )
        samples.append(Sample(load_image(base / rec["mixed"]), truth, rec["id"]))
        split[rec["id"]] = rec["split"]
    return DatasetManifest(
        samples=tuple(samples),
        split=split,
        seed=int(header.get("seed", 0)),
        patch_size=int(header.get("patch_size", samples[0].mixed.shape[0])),
    )
