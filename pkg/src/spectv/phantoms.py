"""Deterministic phantoms: eigenfunction disks, 1-D steps, textured patches,
and a labeled synthetic cohort for end-to-end classifier testing.

All generators are pure functions of their arguments.  Randomized ones use
numpy's PCG64 generator; cohort patches derive their substream from
``SeedSequence((cohort_seed, patient, vertebra, patch))`` so that parallel
generation order cannot change the output.

The class signal of textured patches deliberately lives at fine scales
(small, high-amplitude spots near the patch centre) with a broader, weakly
class-dependent bump underneath, so that high-uptake patches dominate the
mean spectral response across most scales while fine bands stay the most
discriminative.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Label3, Manifest, PatchRecord, PATCH_SIZE, save_manifest
from .errors import ContractViolation

BORDER_MARGIN = 4  # disks keep at least this many pixels from every border

# Fine-speckle amplitude ranges per class: disjoint NORMAL/HU by construction,
# LU between.  Calibrated so class-wise mean spectra reproduce the intended
# ordering (high uptake above normal at almost every scale).
FINE_AMPLITUDE = {
    Label3.NORMAL: (0.25, 1.0),
    Label3.PATH_LU: (1.1, 2.2),
    Label3.PATH_HU: (2.4, 5.0),
}
# Broad centre-bump amplitude: overlapping ranges with shifted means, so the
# coarse scales separate in the mean but stay weak per-patch discriminators.
# The bump's extinction scale amplitude*radius/2 reaches ~30 for high uptake,
# which keeps its mean response positive across the whole scale axis.
COARSE_AMPLITUDE = {
    Label3.NORMAL: (0.2, 3.5),
    Label3.PATH_LU: (0.6, 4.5),
    Label3.PATH_HU: (1.0, 5.5),
}
PIXEL_NOISE_SIGMA = 0.35


def _disk_mask(width, height, center, radius):
    cx, cy = center
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


def _check_disk(width, height, center, radius):
    if radius < 2:
        raise ContractViolation(f"disk radius must be >= 2 px, got {radius}")
    cx, cy = center
    if (cx - radius < BORDER_MARGIN or cy - radius < BORDER_MARGIN
            or cx + radius > width - 1 - BORDER_MARGIN
            or cy + radius > height - 1 - BORDER_MARGIN):
        raise ContractViolation(
            f"disk (center {center}, radius {radius}) closer than "
            f"{BORDER_MARGIN} px to a border of {width}x{height}")


def disk_image(width: int = 64, height: int = 64, center=(32, 32),
               radius: float = 8.0, contrast: float = 1.0) -> np.ndarray:
    """Indicator of a disk: contrast inside (x-cx)^2 + (y-cy)^2 <= r^2, else 0."""
    _check_disk(width, height, center, radius)
    return contrast * _disk_mask(width, height, center, radius).astype(np.float64)


def two_disks_image(width: int, height: int, centers, radii, contrasts) -> np.ndarray:
    """Sum of two disjoint disks; overlap is an error."""
    if len(centers) != 2 or len(radii) != 2 or len(contrasts) != 2:
        raise ContractViolation("two_disks needs exactly two centers/radii/contrasts")
    for c, r in zip(centers, radii):
        _check_disk(width, height, c, r)
    m1 = _disk_mask(width, height, centers[0], radii[0])
    m2 = _disk_mask(width, height, centers[1], radii[1])
    if np.any(m1 & m2):
        raise ContractViolation("disks overlap")
    return contrasts[0] * m1.astype(np.float64) + contrasts[1] * m2.astype(np.float64)


def step_signal_1d(breakpoints, levels, length: int) -> np.ndarray:
    """Piecewise-constant 1-D signal as a height-1 image.

    ``levels[i]`` fills [breakpoints[i-1], breakpoints[i]); one more level
    than breakpoints.
    """
    breakpoints = list(breakpoints)
    levels = list(levels)
    if len(levels) != len(breakpoints) + 1:
        raise ContractViolation(
            f"{len(levels)} levels for {len(breakpoints)} breakpoints")
    if any(b <= 0 or b >= length for b in breakpoints):
        raise ContractViolation("breakpoints must lie strictly inside (0, length)")
    if any(b2 <= b1 for b1, b2 in zip(breakpoints, breakpoints[1:])):
        raise ContractViolation("breakpoints must be strictly increasing")
    sig = np.empty((1, length), dtype=np.float64)
    prev = 0
    for b, lv in zip(breakpoints + [length], levels):
        sig[0, prev:b] = lv
        prev = b
    return sig


def _smooth_background(rng, size, coarse=5, sigma=0.5):
    """Bilinear upsample of a coarse Gaussian grid: the smooth CT-like base."""
    grid = rng.normal(0.0, sigma, (coarse, coarse))
    src = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.clip(src.astype(int), 0, coarse - 2)
    w = src - i0
    rows = grid[i0][:, i0] * (1 - w)[:, None] * (1 - w)[None, :]
    rows += grid[i0 + 1][:, i0] * w[:, None] * (1 - w)[None, :]
    rows += grid[i0][:, i0 + 1] * (1 - w)[:, None] * w[None, :]
    rows += grid[i0 + 1][:, i0 + 1] * w[:, None] * w[None, :]
    return rows


def _add_spot(img, rng, center, radius, amplitude):
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    img[(xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius * radius] += amplitude


def texture_patch(label: Label3, seed, size: int = PATCH_SIZE) -> np.ndarray:
    """Textured patch: smooth background plus class-dependent granular field.

    High-uptake patches carry the highest-amplitude fine speckle (spot radius
    1..3 px) concentrated near the centre, low-uptake intermediate, normal the
    lowest; a broad centre bump adds weakly class-dependent coarse content.
    """
    rng = np.random.default_rng(seed)
    img = 1.0 + _smooth_background(rng, size)
    c = size // 2
    # broad centre bump (coarse scales), always covering the mask
    bump_r = rng.uniform(6.0, 11.0)
    bump_a = rng.uniform(*COARSE_AMPLITUDE[label])
    off = rng.integers(-2, 3, size=2)
    _add_spot(img, rng, (c + off[0], c + off[1]), bump_r, bump_a)
    # fine speckle near the centre (class signal); partial mask coverage keeps
    # individual pixels ambiguous
    lo, hi = FINE_AMPLITUDE[label]
    for _ in range(int(rng.integers(2, 5))):
        pos = (c + int(rng.integers(-4, 5)), c + int(rng.integers(-4, 5)))
        _add_spot(img, rng, pos, rng.uniform(1.0, 3.0),
                  rng.uniform(lo, hi) * rng.choice((-1.0, 1.0)))
    # sparse background speckle, identical distribution for all classes
    for _ in range(int(rng.integers(3, 7))):
        pos = (int(rng.integers(4, size - 4)), int(rng.integers(4, size - 4)))
        _add_spot(img, rng, pos, rng.uniform(1.0, 2.5),
                  rng.uniform(0.2, 0.7) * rng.choice((-1.0, 1.0)))
    img += rng.normal(0.0, PIXEL_NOISE_SIGMA, img.shape)
    return img


def noise_texture(width: int = PATCH_SIZE, height: int = PATCH_SIZE, seed=0) -> np.ndarray:
    """Neutral textured raster (square patches reuse the NORMAL generator)."""
    if width == height:
        return texture_patch(Label3.NORMAL, seed, size=width)
    rng = np.random.default_rng(seed)
    base = 1.0 + _smooth_background(rng, max(width, height))[:height, :width]
    for _ in range(6):
        pos = (int(rng.integers(4, width - 4)), int(rng.integers(4, height - 4)))
        _add_spot(base, rng, pos, rng.uniform(1.0, 3.0),
                  rng.uniform(0.3, 1.0) * rng.choice((-1.0, 1.0)))
    return base


def random_phantom(seed: int) -> np.ndarray:
    """Mixed-kind deterministic phantom (disk, two disks, 1-D step, texture)."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        w = h = int(rng.integers(48, 72))
        r = float(rng.uniform(4, 10))
        cx = int(rng.integers(BORDER_MARGIN + int(r) + 1, w - BORDER_MARGIN - int(r) - 1))
        cy = int(rng.integers(BORDER_MARGIN + int(r) + 1, h - BORDER_MARGIN - int(r) - 1))
        return disk_image(w, h, (cx, cy), r, float(rng.uniform(0.5, 2.0)))
    if kind == 1:
        w = h = 64
        return two_disks_image(w, h, [(18, 18), (44, 44)],
                               [float(rng.uniform(3, 6)), float(rng.uniform(7, 10))],
                               [float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0))])
    if kind == 2:
        length = int(rng.integers(64, 129))
        nseg = int(rng.integers(2, 8))
        bps = np.sort(rng.choice(np.arange(2, length - 2), size=nseg - 1, replace=False))
        return step_signal_1d([int(b) for b in bps],
                              list(rng.uniform(-1, 1, nseg)), length)
    return texture_patch(Label3.NORMAL, seed)


@dataclass(frozen=True)
class CohortPatch:
    record: PatchRecord
    image: np.ndarray


@dataclass
class SyntheticCohort:
    """Labeled synthetic cohort: patients -> vertebrae -> 50x50 patches."""

    seed: int
    patches: list[CohortPatch]

    def manifest(self, root: Path | None = None) -> Manifest:
        return Manifest([p.record for p in self.patches],
                        root=root if root is not None else Path())


def synth_cohort(n_normal: int, n_pathological: int, seed: int, *,
                 vertebrae_per_patient: int = 3,
                 patches_per_vertebra: int = 2) -> SyntheticCohort:
    """Balanced labeled cohort; pathological patients mix HU and LU patches
    roughly 2:1 with at least one HU patch each.  Bit-identical per seed."""
    if n_normal < 1 or n_pathological < 1:
        raise ContractViolation("cohort needs at least one patient per status")
    if not 1 <= vertebrae_per_patient <= 6 or not 1 <= patches_per_vertebra <= 6:
        raise ContractViolation("1..6 vertebrae per patient and patches per vertebra")
    patches = []
    statuses = ["normal"] * n_normal + ["pathological"] * n_pathological
    for p_idx, status in enumerate(statuses):
        pid = f"P{p_idx:04d}"
        labels = []
        for v_idx in range(vertebrae_per_patient):
            for k_idx in range(patches_per_vertebra):
                if status == "normal":
                    labels.append(Label3.NORMAL)
                else:
                    pick = np.random.default_rng(
                        np.random.SeedSequence((seed, p_idx, v_idx, k_idx, 7))).uniform()
                    labels.append(Label3.PATH_HU if pick < 2.0 / 3.0 else Label3.PATH_LU)
        if status == "pathological" and Label3.PATH_HU not in labels:
            labels[0] = Label3.PATH_HU
        i = 0
        for v_idx in range(vertebrae_per_patient):
            vid = f"V{v_idx + 1}"
            for k_idx in range(patches_per_vertebra):
                label = labels[i]
                i += 1
                img = texture_patch(label,
                                    np.random.SeedSequence((seed, p_idx, v_idx, k_idx)))
                rec = PatchRecord(pid, vid, f"C{k_idx + 1}", label,
                                  f"patches/{pid}_{vid}_C{k_idx + 1}.stv")
                patches.append(CohortPatch(rec, img))
    return SyntheticCohort(seed, patches)


def save_cohort(cohort: SyntheticCohort, directory) -> Path:
    """Write patch rasters and the manifest CSV; returns the manifest path."""
    from .containers import write_raster  # deferred to keep phantom import light

    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    for patch in cohort.patches:
        write_raster(directory / patch.record.path, patch.image)
    manifest_path = directory / "manifest.csv"
    save_manifest(cohort.manifest(directory), manifest_path)
    return manifest_path
