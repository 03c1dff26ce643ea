"""Binary container formats: STV1 rasters/stacks/signature fields, STVM models.

STV1 layout: magic ``STV1``, kind byte (0 raster, 1 spectral stack,
2 signature field), little-endian u32 dims (width, height[, n_components]),
payload of little-endian float64 row-major with components outermost (stacks
append the residual image after the components), trailing CRC32 of the
payload.

STVM layout: magic ``STVM``, u16 format version, band config, mode, cutoff,
then one learner per band as preorder node lists with explicit float64
thresholds.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .ensemble import BandConfig, DecisionTree, EnsembleModel, Forest, N_CLASSES
from .errors import FormatError
from .transform import SignatureField, SpectralStack

MAGIC_RASTER = b"STV1"
MAGIC_MODEL = b"STVM"
KIND_RASTER = 0
KIND_STACK = 1
KIND_SIGNATURES = 2
MODEL_VERSION = 1
_MODES = ("tree", "forest")


def _dims(kind: int, head: bytes) -> tuple[int, ...]:
    n_dims = 2 if kind == KIND_RASTER else 3
    if len(head) < n_dims * 4:
        raise FormatError("truncated dimension header")
    return struct.unpack(f"<{n_dims}I", head[:n_dims * 4])


def _write_container(path, kind: int, dims: tuple[int, ...], payload: np.ndarray) -> None:
    payload = np.ascontiguousarray(payload, dtype="<f8")
    raw = payload.tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC_RASTER)
        fh.write(bytes([kind]))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(raw)
        fh.write(struct.pack("<I", zlib.crc32(raw)))


def _read_container(path, expected_kind: int | None = None):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 5 or blob[:4] != MAGIC_RASTER:
        raise FormatError(f"{path}: not an STV1 container")
    kind = blob[4]
    if kind not in (KIND_RASTER, KIND_STACK, KIND_SIGNATURES):
        raise FormatError(f"{path}: unknown kind byte {kind}")
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"{path}: kind {kind}, expected {expected_kind}")
    dims = _dims(kind, blob[5:])
    off = 5 + 4 * len(dims)
    if kind == KIND_RASTER:
        count = dims[0] * dims[1]
    elif kind == KIND_STACK:
        count = dims[0] * dims[1] * (dims[2] + 1)  # components plus residual
    else:
        count = dims[0] * dims[1] * dims[2]
    need = count * 8
    if len(blob) != off + need + 4:
        raise FormatError(f"{path}: payload size mismatch "
                          f"(declared {need} bytes, file holds {len(blob) - off - 4})")
    raw = blob[off:off + need]
    (crc,) = struct.unpack("<I", blob[off + need:])
    if crc != zlib.crc32(raw):
        raise FormatError(f"{path}: CRC mismatch")
    return kind, dims, np.frombuffer(raw, dtype="<f8")


def read_raster_header(path) -> tuple[int, tuple[int, ...]]:
    """(kind, dims) without reading the payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(17)
    if len(head) < 5 or head[:4] != MAGIC_RASTER:
        raise FormatError(f"{path}: not an STV1 container")
    kind = head[4]
    if kind not in (KIND_RASTER, KIND_STACK, KIND_SIGNATURES):
        raise FormatError(f"{path}: unknown kind byte {kind}")
    return kind, _dims(kind, head[5:])


def write_raster(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    _write_container(path, KIND_RASTER, (width, height), image)


def read_raster(path) -> np.ndarray:
    _, (width, height), flat = _read_container(path, KIND_RASTER)
    return flat.reshape(height, width).copy()


def write_stack(path, stack: SpectralStack) -> None:
    n, height, width = stack.components.shape
    payload = np.concatenate([stack.components, stack.residual[None]], axis=0)
    _write_container(path, KIND_STACK, (width, height, n), payload)


def read_stack(path, dt: float = 0.25) -> SpectralStack:
    """Load a stack; dt is not stored in the container and must match the
    decomposition (the source mean is recovered from the reconstruction)."""
    _, (width, height, n), flat = _read_container(path, KIND_STACK)
    cube = flat.reshape(n + 1, height, width)
    components = cube[:n].copy()
    residual = cube[n].copy()
    mean = float((components.sum(axis=0) + residual).mean())
    return SpectralStack(components, residual, dt, mean)


def write_signature_field(path, field: SignatureField) -> None:
    height, width, n = field.values.shape
    _write_container(path, KIND_SIGNATURES, (width, height, n),
                     np.moveaxis(field.values, -1, 0))


def read_signature_field(path) -> SignatureField:
    _, (width, height, n), flat = _read_container(path, KIND_SIGNATURES)
    values = np.moveaxis(flat.reshape(n, height, width), 0, -1).copy()
    return SignatureField(values, p_enh=1.0, enhanced=False)


def _pack_tree(tree: DecisionTree) -> bytes:
    parts = [struct.pack("<I", tree.n_nodes)]
    for i in range(tree.n_nodes):
        parts.append(struct.pack("<id2i", int(tree.feature[i]), float(tree.threshold[i]),
                                 int(tree.left[i]), int(tree.right[i])))
        parts.append(struct.pack(f"<{N_CLASSES}Q", *(int(c) for c in tree.counts[i])))
    return b"".join(parts)


def _unpack_tree(blob: bytes, off: int) -> tuple[DecisionTree, int]:
    (n_nodes,) = struct.unpack_from("<I", blob, off)
    off += 4
    feature = np.empty(n_nodes, dtype=np.int32)
    threshold = np.empty(n_nodes, dtype=np.float64)
    left = np.empty(n_nodes, dtype=np.int32)
    right = np.empty(n_nodes, dtype=np.int32)
    counts = np.empty((n_nodes, N_CLASSES), dtype=np.int64)
    for i in range(n_nodes):
        feature[i], threshold[i], left[i], right[i] = struct.unpack_from("<id2i", blob, off)
        off += struct.calcsize("<id2i")
        counts[i] = struct.unpack_from(f"<{N_CLASSES}Q", blob, off)
        off += 8 * N_CLASSES
    return DecisionTree(feature, threshold, left, right, counts), off


def save_model(path, model: EnsembleModel) -> None:
    cfg = model.band_config
    parts = [MAGIC_MODEL,
             struct.pack("<H", MODEL_VERSION),
             struct.pack("<IIB", cfg.n_components, cfg.scales_per_band,
                         int(cfg.overlapping)),
             struct.pack("<B", _MODES.index(model.mode)),
             struct.pack("<d", model.cutoff),
             struct.pack("<I", len(model.learners))]
    for learner in model.learners:
        if model.mode == "tree":
            parts.append(_pack_tree(learner))
        else:
            parts.append(struct.pack("<I", len(learner.trees)))
            for seed, tree in zip(learner.seeds, learner.trees):
                parts.append(struct.pack("<Q", seed))
                parts.append(_pack_tree(tree))
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> EnsembleModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC_MODEL:
        raise FormatError(f"{path}: not an STVM container")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    off = 6
    n_components, scales, overlapping = struct.unpack_from("<IIB", blob, off)
    off += 9
    (mode_byte,) = struct.unpack_from("<B", blob, off)
    off += 1
    if mode_byte >= len(_MODES):
        raise FormatError(f"{path}: unknown mode byte {mode_byte}")
    (cutoff,) = struct.unpack_from("<d", blob, off)
    off += 8
    (n_learners,) = struct.unpack_from("<I", blob, off)
    off += 4
    mode = _MODES[mode_byte]
    learners = []
    try:
        for _ in range(n_learners):
            if mode == "tree":
                tree, off = _unpack_tree(blob, off)
                learners.append(tree)
            else:
                (n_trees,) = struct.unpack_from("<I", blob, off)
                off += 4
                trees, seeds = [], []
                for _ in range(n_trees):
                    (seed,) = struct.unpack_from("<Q", blob, off)
                    off += 8
                    tree, off = _unpack_tree(blob, off)
                    trees.append(tree)
                    seeds.append(int(seed))
                learners.append(Forest(trees, seeds))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated model ({exc})") from None
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    config = BandConfig(n_components, scales, bool(overlapping))
    return EnsembleModel(config, mode, learners, float(cutoff))
