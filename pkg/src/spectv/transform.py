"""Spectral TV transform, spectrum, exact reconstruction, and filtering.

The transform takes a TV-flow trajectory and forms components
``phi_k = k * (u_{k+1} - 2 u_k + u_{k-1})`` (the time-step measure is folded
in) together with the finite-horizon residual
``f_r = (n+1) u_n - n u_{n+1}``, so that

    sum_k phi_k + f_r = u_0

holds as a telescoping identity at machine precision.  At extinction the
residual equals the constant mean image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .flow import FlowConfig, ScaleSpace, as_image, tv_flow


@dataclass
class SpectralStack:
    """Spectral components phi_1..phi_n plus the finite-horizon residual."""

    components: np.ndarray  # (n, height, width), dt measure folded in
    residual: np.ndarray    # (height, width)
    dt: float
    source_mean: float

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def scales(self) -> np.ndarray:
        """Physical scale t_k = k * dt of each component."""
        return np.arange(1, self.n_components + 1, dtype=np.float64) * self.dt


@dataclass
class Spectrum:
    """Global spectral response S_k = <f, phi_k> and the residual term."""

    values: np.ndarray
    residual_term: float


@dataclass
class TransferFunction:
    """Per-component gains H_k plus the gain applied to the residual."""

    gains: np.ndarray
    residual_gain: float = 1.0

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.ndim != 1 or not np.isfinite(self.gains).all():
            raise ContractViolation("gains must be a finite 1-D sequence")


@dataclass
class SignatureField:
    """Per-pixel scale signatures psi(x), the classifier features.

    ``values[y, x, k]`` is phi_{k+1}(y, x); enhanced fields have each pixel
    vector multiplied by the p-th power of its own L1 norm over scales.
    """

    values: np.ndarray  # (height, width, n)
    p_enh: float = 1.0
    enhanced: bool = False

    @property
    def n_components(self) -> int:
        return self.values.shape[2]


def stv_transform(space: ScaleSpace) -> SpectralStack:
    """Spectral components of a flow trajectory, measure folded in."""
    frames = space.frames
    n = space.config.n_components
    if frames.shape[0] != n + 2:
        raise ContractViolation(
            f"scale space has {frames.shape[0]} frames, expected {n + 2}")
    ks = np.arange(1, n + 1, dtype=np.float64)
    phi = ks[:, None, None] * (frames[2:] - 2.0 * frames[1:-1] + frames[:-2])
    residual = (n + 1.0) * frames[n] - float(n) * frames[n + 1]
    return SpectralStack(phi, residual, space.config.dt, float(frames[0].mean()))


def decompose(f, config: FlowConfig | None = None, *, warm_start: bool = True) -> SpectralStack:
    """Convenience: evolve the flow and transform in one call."""
    return stv_transform(tv_flow(f, config, warm_start=warm_start))


def reconstruct(stack: SpectralStack) -> np.ndarray:
    """Sum of the components plus the residual; equals the input exactly."""
    return stack.components.sum(axis=0) + stack.residual


def spectrum(f, stack: SpectralStack) -> Spectrum:
    """S_k = <f, phi_k> over the image; Parseval: sum S + <f, f_r> = ||f||^2."""
    img = as_image(f)
    if img.shape != stack.residual.shape:
        raise ContractViolation(
            f"image shape {img.shape} does not match stack {stack.residual.shape}")
    values = np.einsum("kij,ij->k", stack.components, img)
    return Spectrum(values, float((img * stack.residual).sum()))


def stv_filter(stack: SpectralStack, transfer: TransferFunction) -> np.ndarray:
    """Reweight components by the transfer gains and sum with the residual."""
    if transfer.gains.shape[0] != stack.n_components:
        raise ContractViolation(
            f"{transfer.gains.shape[0]} gains for {stack.n_components} components")
    out = np.tensordot(transfer.gains, stack.components, axes=1)
    out += transfer.residual_gain * stack.residual
    return out


def extract_signatures(stack: SpectralStack) -> SignatureField:
    """Raw per-pixel signatures: psi(x)_k = phi_k(x)."""
    return SignatureField(np.ascontiguousarray(np.moveaxis(stack.components, 0, -1)),
                          p_enh=1.0, enhanced=False)


def enhance_vectors(vectors: np.ndarray, p_enh: float) -> np.ndarray:
    """Multiply each signature vector (last axis) by its L1 norm to the p-th power."""
    if p_enh < 0:
        raise ContractViolation(f"p_enh must be >= 0, got {p_enh}")
    weight = np.abs(vectors).sum(axis=-1, keepdims=True) ** p_enh
    return vectors * weight


def enhance_signatures(field: SignatureField, p_enh: float = 1.0) -> SignatureField:
    """Salience enhancement of a raw signature field."""
    if field.enhanced:
        raise ContractViolation("signature field is already enhanced")
    return SignatureField(enhance_vectors(field.values, p_enh), p_enh=p_enh, enhanced=True)
