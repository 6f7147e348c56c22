"""Non-learned reconstruction: zero-fill, apodized ACS, homodyne, PI, RSOS.

The full-scheme pipeline runs, per bin and in this order: parallel-imaging
interpolation of the missing lattice offsets, homodyne partial-Fourier
completion per coil, root-sum-of-squares coil combination, then zero-padding
to the output matrix.  ACS-only bins are reconstructed from the Gaussian
window-apodized calibration block alone.

Parallel imaging here is the standard autocalibrated k-space interpolation:
missing samples are synthesized as shift-invariant linear combinations of
acquired multi-coil neighbors, with weights fit on the ACS block by
regularized least squares.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from vrmsi.core import (
    MAGIC_STACK,
    MultiSpectralStack,
    crop_center_array,
    fft2c,
    ifft2c,
    pad_center_array,
    read_container,
    write_container,
)
from vrmsi.sampling import (
    ACS_ONLY,
    FULL_SCHEME,
    SamplingPlan,
    acs_only_mask,
    full_scheme_mask,
    partial_fourier_mask,
)

METHOD_REFERENCE = "REFERENCE"
METHOD_CR_VR = "CR_VR"
METHOD_CR_ZREPLACE = "CR_ZREPLACE"
METHOD_DL_VR = "DL_VR"
METHOD_DL_ZREPLACE = "DL_ZREPLACE"

CONVENTIONAL_METHODS = (METHOD_REFERENCE, METHOD_CR_VR, METHOD_CR_ZREPLACE)
ALL_METHODS = CONVENTIONAL_METHODS + (METHOD_DL_VR, METHOD_DL_ZREPLACE)


@dataclass(frozen=True)
class KernelGeometry:
    """Interpolation kernel: lattice steps, tap counts, and ridge strength.

    ``ridge`` scales the regularizer relative to the mean diagonal of the
    calibration normal matrix; 0 switches to a plain least-squares solve.
    """

    ry: int
    rz: int
    ky_taps: int = 5
    kz_taps: int = 4
    ridge: float = 1e-4


@dataclass(frozen=True)
class ReconOutput:
    """Per-bin coil-combined magnitude images plus the method label."""

    images: np.ndarray                   # (n_bins, rows, cols) real, >= 0
    method: str
    mask_provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3:
            raise ValueError("expected (n_bins, rows, cols)")
        if np.any(images < 0):
            raise ValueError("combined magnitude images must be non-negative")
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        images = images.copy()
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    @property
    def n_bins(self) -> int:
        return self.images.shape[0]


def zero_fill_recon(ksp: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero unsampled entries and inverse transform."""
    if mask.shape != ksp.shape[-2:]:
        raise ValueError("mask dims must match k-space dims")
    return ifft2c(np.where(mask, ksp, 0))


def apodized_acs_recon(ksp: np.ndarray, acs_dims, sigma_fraction: float = 0.25) -> np.ndarray:
    """Low-resolution image from the Gaussian-windowed central ACS block.

    The separable window peaks at 1 on the DC sample with sigma equal to
    ``sigma_fraction`` times the block dimension.
    """
    acs = crop_center_array(ksp, acs_dims[0], acs_dims[1])
    wr = _gaussian_window(acs_dims[0], sigma_fraction * acs_dims[0])
    wc = _gaussian_window(acs_dims[1], sigma_fraction * acs_dims[1])
    windowed = acs * wr[:, None] * wc[None, :]
    return ifft2c(pad_center_array(windowed, ksp.shape[-2], ksp.shape[-1]))


def _gaussian_window(n: int, sigma: float) -> np.ndarray:
    idx = np.arange(n) - n // 2
    return np.exp(-0.5 * (idx / sigma) ** 2)


def rsos_coils(images: np.ndarray) -> np.ndarray:
    """Root sum of squared magnitudes across the leading coil axis."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("expected (n_coils, rows, cols) with at least one coil")
    return np.sqrt(np.sum(np.abs(images) ** 2, axis=0))


def rsos_bins(images: np.ndarray) -> np.ndarray:
    """Root sum of squared magnitudes across the leading bin axis."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("expected (n_bins, rows, cols) with at least one bin")
    return np.sqrt(np.sum(np.abs(images) ** 2, axis=0))


def homodyne_recon(ksp: np.ndarray, pf_mask: np.ndarray) -> np.ndarray:
    """Homodyne partial-Fourier reconstruction of one coil plane.

    A low-resolution phase estimate comes from the conjugate-symmetric rows
    around DC; the asymmetric data are ramp weighted so each conjugate row
    pair sums to weight 2, then the demodulated real part is kept.  With a
    fully sampled mask no reweighting is needed and the result equals the
    magnitude of the plain inverse transform.
    """
    ky = ksp.shape[-2]
    pf_mask = np.asarray(pf_mask, dtype=bool)
    if pf_mask.shape != (ky,):
        raise ValueError("pf_mask must be one boolean per ky row")
    sampled = int(pf_mask.sum())
    if not np.all(pf_mask[:sampled]):
        raise ValueError("pf_mask must be a contiguous low-ky prefix")
    overscan = sampled - ky // 2
    if overscan <= 0:
        raise ValueError("no phase reference: overscan rows are required")

    if sampled == ky:
        img = ifft2c(ksp)
        return np.real(np.exp(-1j * np.angle(img)) * img)

    m = np.arange(ky) - ky // 2

    # Symmetric central band for the phase estimate (every row has its
    # mirror inside the band, so real inputs stay exactly real).
    band = np.abs(m) <= overscan - 1
    lowres = ifft2c(ksp * band[:, None])
    phase = np.exp(-1j * np.angle(lowres))

    weights = np.clip(1.0 - m / overscan, 0.0, 2.0)
    weights[~pf_mask] = 0.0
    if ky % 2 == 0 and pf_mask[0]:
        weights[0] = 1.0                 # Nyquist row is its own conjugate
    return np.real(phase * ifft2c(ksp * weights[:, None]))


def pi_interpolate(
    ksp: np.ndarray,
    acs_block: np.ndarray,
    geometry: KernelGeometry,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Fill missing lattice offsets of uniformly undersampled multi-coil k-space.

    ``ksp`` is (n_coils, ky, kz) with zeros at unsampled positions and the
    sampled lattice anchored at DC.  ``acs_block`` is the fully sampled
    calibration region (n_coils, ar, ac).  Acquired samples pass through
    unchanged; when ``mask`` is given, no entry marked acquired is rewritten.
    """
    nc, ky, kz = ksp.shape
    ry, rz = geometry.ry, geometry.rz
    if ry == 1 and rz == 1:
        return ksp.copy()
    if acs_block.shape[0] != nc:
        raise ValueError("ACS coil count must match the data")

    taps_y = (np.arange(geometry.ky_taps) - (geometry.ky_taps - 1) // 2) * ry
    taps_z = (np.arange(geometry.kz_taps) - (geometry.kz_taps - 1) // 2) * rz
    out = ksp.copy()

    for dy, dz in product(range(ry), range(rz)):
        if dy == 0 and dz == 0:
            continue
        src_y = taps_y - dy
        src_z = taps_z - dz
        w = _fit_kernel(acs_block, src_y, src_z, geometry.ridge)
        _apply_kernel(out, ksp, w, src_y, src_z, (ry, dy), (rz, dz), mask)
    return out


def _fit_kernel(acs: np.ndarray, src_y, src_z, ridge: float) -> np.ndarray:
    """Least-squares weights mapping source constellations to ACS targets."""
    nc, ar, ac = acs.shape
    ty_lo = max(0, -src_y.min())
    ty_hi = ar - 1 - max(src_y.max(), 0)
    tz_lo = max(0, -src_z.min())
    tz_hi = ac - 1 - max(src_z.max(), 0)
    if ty_hi < ty_lo or tz_hi < tz_lo:
        raise ValueError("ACS block too small for the kernel geometry")

    ty, tz = np.meshgrid(np.arange(ty_lo, ty_hi + 1), np.arange(tz_lo, tz_hi + 1), indexing="ij")
    ty = ty.ravel()
    tz = tz.ravel()
    n_inst = ty.size

    src = np.empty((n_inst, nc, src_y.size, src_z.size), dtype=np.complex128)
    for a, oy in enumerate(src_y):
        for b, oz in enumerate(src_z):
            src[:, :, a, b] = acs[:, ty + oy, tz + oz].T
    src = src.reshape(n_inst, -1)
    targets = acs[:, ty, tz].T

    if ridge > 0:
        gram = src.conj().T @ src
        lam = ridge * np.real(np.trace(gram)) / gram.shape[0]
        try:
            return np.linalg.solve(gram + lam * np.eye(gram.shape[0]), src.conj().T @ targets)
        except np.linalg.LinAlgError:
            pass
    return np.linalg.lstsq(src, targets, rcond=None)[0]


def _apply_kernel(out, ksp, weights, src_y, src_z, y_lattice, z_lattice, mask) -> None:
    """Write interpolated values at every position with offset (dy, dz)."""
    nc, ky, kz = ksp.shape
    ry, dy = y_lattice
    rz, dz = z_lattice
    pad_y = int(max(-src_y.min(), src_y.max(), 0))
    pad_z = int(max(-src_z.min(), src_z.max(), 0))
    padded = np.pad(ksp, ((0, 0), (pad_y, pad_y), (pad_z, pad_z)))

    ty = np.arange((ky // 2 + dy) % ry, ky, ry)
    tz = np.arange((kz // 2 + dz) % rz, kz, rz)
    TY, TZ = np.meshgrid(ty, tz, indexing="ij")
    TY = TY.ravel()
    TZ = TZ.ravel()

    src = np.empty((TY.size, nc, src_y.size, src_z.size), dtype=np.complex128)
    for a, oy in enumerate(src_y):
        for b, oz in enumerate(src_z):
            src[:, :, a, b] = padded[:, TY + oy + pad_y, TZ + oz + pad_z].T
    values = src.reshape(TY.size, -1) @ weights

    if mask is not None:
        keep = ~mask[TY, TZ]
        TY, TZ, values = TY[keep], TZ[keep], values[keep]
    out[:, TY, TZ] = values.T


def reconstruct(
    plan: SamplingPlan,
    ksp_stack: MultiSpectralStack,
    method: str,
    out_shape: tuple[int, int] | None = None,
    apod_sigma_fraction: float = 0.25,
    kernel_taps: tuple[int, int] = (5, 4),
    ridge: float = 1e-4,
) -> ReconOutput:
    """Run one conventional method over a sampled k-space stack.

    REFERENCE applies the full scheme (PI + homodyne) to every bin; CR_VR
    keeps that for FULL_SCHEME bins and uses the apodized ACS image for
    ACS_ONLY bins; CR_ZREPLACE zeroes the ACS_ONLY bins entirely.
    """
    if method not in CONVENTIONAL_METHODS:
        raise ValueError(f"reconstruct handles {CONVENTIONAL_METHODS}, got {method!r}")
    params = plan.params
    ky, kz = params.matrix
    if ksp_stack.domain != "kspace":
        raise ValueError("reconstruct expects a k-space stack")
    if ksp_stack.n_bins != plan.n_bins or (ksp_stack.rows, ksp_stack.cols) != (ky, kz):
        raise ValueError("plan and stack dimensions disagree")

    full_mask = full_scheme_mask(params)
    acs_mask = acs_only_mask(ky, kz, params.acs)
    pf = partial_fourier_mask(ky, params.pf_overscan)
    geometry = KernelGeometry(params.accel[0], params.accel[1], *kernel_taps, ridge)
    out_rows, out_cols = out_shape if out_shape is not None else (ky, kz)

    combined = np.empty((plan.n_bins, out_rows, out_cols))
    for b in range(plan.n_bins):
        scheme = FULL_SCHEME if method == METHOD_REFERENCE else plan.schemes[b]
        if scheme == FULL_SCHEME:
            masked = np.where(full_mask, ksp_stack.data[b], 0)
            acs_data = crop_center_array(masked, params.acs[0], params.acs[1])
            filled = pi_interpolate(masked, acs_data, geometry, mask=full_mask)
            coil_images = np.stack([homodyne_recon(filled[c], pf) for c in range(ksp_stack.n_coils)])
            image = rsos_coils(coil_images)
        elif method == METHOD_CR_ZREPLACE:
            image = np.zeros((ky, kz))
        else:
            masked = np.where(acs_mask, ksp_stack.data[b], 0)
            coil_images = np.stack(
                [apodized_acs_recon(masked[c], params.acs, apod_sigma_fraction)
                 for c in range(ksp_stack.n_coils)]
            )
            image = rsos_coils(coil_images)
        combined[b] = _resample_to(image, out_rows, out_cols)

    return ReconOutput(combined, method, mask_provenance=f"vr-plan-{plan.n_bins}bins")


def _resample_to(image: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    if image.shape == (out_rows, out_cols):
        return image
    return np.abs(ifft2c(pad_center_array(fft2c(image), out_rows, out_cols)))


def save_recon(output: ReconOutput, path) -> None:
    metadata = {
        "n_bins": output.n_bins,
        "n_coils": 1,
        "rows": int(output.images.shape[1]),
        "cols": int(output.images.shape[2]),
        "domain": "image",
        "bin_centers_khz": [],
        "provenance": output.mask_provenance,
        "payload_dtype": "float32",
        "method": output.method,
    }
    payload = output.images.astype("<f4").tobytes()
    write_container(path, MAGIC_STACK, metadata, payload)


def load_recon(path) -> ReconOutput:
    metadata, payload = read_container(path, MAGIC_STACK)
    shape = (metadata["n_bins"], metadata["rows"], metadata["cols"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: recon payload size mismatch")
    images = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return ReconOutput(np.maximum(images, 0.0), metadata["method"], metadata.get("provenance", ""))
