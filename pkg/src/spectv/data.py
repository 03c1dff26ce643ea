"""Patch datasets: labels, the 13-pixel circular mask, manifests, training rows."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractViolation, ManifestError

PATCH_SIZE = 50
PATCH_CENTER = (25, 25)  # (row, col), 0-indexed on a 50x50 patch


class Label3(enum.IntEnum):
    """Patch classes; order fixes deterministic tie-breaking (NORMAL first)."""

    NORMAL = 0
    PATH_LU = 1
    PATH_HU = 2


LABEL_NAMES = {lab.name: lab for lab in Label3}

# Discrete disk of radius 2: the unique centered mask with exactly 13 pixels.
# Row-major ordering by (dy, dx).
DEFAULT_MASK = tuple(sorted(
    ((dx, dy) for dx in range(-2, 3) for dy in range(-2, 3) if dx * dx + dy * dy <= 4),
    key=lambda o: (o[1], o[0]),
))


def remap_lu(label: Label3) -> int:
    """Binary tag for scoring: high uptake is positive, everything else not."""
    return 1 if label == Label3.PATH_HU else 0


def masked_pixels(center: tuple[int, int], mask=DEFAULT_MASK, *,
                  shape: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE)) -> list[tuple[int, int]]:
    """(row, col) coordinates of the mask around ``center`` = (row, col).

    Deterministic ordering, row-major by (dy, dx).  Raises when the mask does
    not fit inside ``shape``.
    """
    cy, cx = center
    coords = [(cy + dy, cx + dx) for dx, dy in mask]
    for r, c in coords:
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise ContractViolation(
                f"mask pixel ({r}, {c}) falls outside a {shape[0]}x{shape[1]} patch")
    return coords


@dataclass(frozen=True)
class PatchRecord:
    patient_id: str
    vertebra_id: str
    patch_id: str
    label: Label3
    path: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.vertebra_id, self.patch_id)


@dataclass
class Manifest:
    """Validated list of patch records with per-patient derived status."""

    records: list[PatchRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        per_vertebra: dict[tuple[str, str], int] = {}
        for rec in self.records:
            if rec.key in seen:
                raise ManifestError(f"duplicate patch key {rec.key}")
            seen.add(rec.key)
            vkey = (rec.patient_id, rec.vertebra_id)
            per_vertebra[vkey] = per_vertebra.get(vkey, 0) + 1
            if per_vertebra[vkey] > 6:
                raise ManifestError(f"vertebra {vkey} has more than 6 patches")

    def patients(self) -> list[str]:
        out = []
        for rec in self.records:
            if rec.patient_id not in out:
                out.append(rec.patient_id)
        return out

    def patient_status(self, patient_id: str) -> bool:
        """True when pathological: the patient has at least one HU patch."""
        return any(rec.patient_id == patient_id and rec.label == Label3.PATH_HU
                   for rec in self.records)

    def by_patient(self) -> dict[str, dict[str, list[PatchRecord]]]:
        """patient_id -> vertebra_id -> records, in manifest order."""
        tree: dict[str, dict[str, list[PatchRecord]]] = {}
        for rec in self.records:
            tree.setdefault(rec.patient_id, {}).setdefault(rec.vertebra_id, []).append(rec)
        return tree


MANIFEST_HEADER = ["patient_id", "vertebra_id", "patch_id", "label", "path"]


def load_manifest(path, *, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest CSV; errors carry the offending row."""
    from .containers import read_raster_header  # local import, no cycle at module load

    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header "
                                f"{','.join(MANIFEST_HEADER)}") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            pid, vid, patch_id, label_name, rel = row
            if label_name not in LABEL_NAMES:
                raise ManifestError(f"{path}:{lineno}: unknown label {label_name!r}")
            records.append(PatchRecord(pid, vid, patch_id, LABEL_NAMES[label_name], rel))
    manifest = Manifest(records, root=path.parent)
    if check_files:
        for rec in manifest.records:
            raster = manifest.root / rec.path
            if not raster.is_file():
                raise ManifestError(f"missing patch raster: {raster}")
            _, (width, height) = read_raster_header(raster)
            if (width, height) != (PATCH_SIZE, PATCH_SIZE):
                raise ManifestError(
                    f"{raster}: patch is {width}x{height}, expected "
                    f"{PATCH_SIZE}x{PATCH_SIZE}")
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest.records:
            writer.writerow([rec.patient_id, rec.vertebra_id, rec.patch_id,
                             rec.label.name, rec.path])


def training_rows(manifest: Manifest, duplicate_lu: bool = True) -> list[tuple[PatchRecord, Label3]]:
    """(record, label) rows for training; LU patches appear twice when enabled.

    Duplication mitigates class imbalance during training only; evaluation
    must use the plain record list.
    """
    rows = [(rec, rec.label) for rec in manifest.records]
    if duplicate_lu:
        rows.extend((rec, rec.label) for rec in manifest.records
                    if rec.label == Label3.PATH_LU)
    return rows
