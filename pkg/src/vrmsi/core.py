"""Complex image model, centered Fourier transforms, and the MSSTACK container.

Conventions used by every module in this package:

* The DC sample of a centered k-space array sits at index ``N // 2`` along
  each axis (the ``fftshift`` convention).
* Forward and inverse transforms are unitary (``1/sqrt(N)`` both ways), so
  energy is preserved and Parseval checks are scale free.
* Arrays are complex128 in memory; containers store complex64 on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

DOMAIN_IMAGE = "image"
DOMAIN_KSPACE = "kspace"

MAGIC_STACK = b"MSSTACK\0"
MAGIC_MODEL = b"MSMODEL\0"
CONTAINER_VERSION = 1

_PAYLOAD_DTYPES = {
    "complex64": np.dtype("<c8"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("u1"),
}


class DataIntegrityError(ValueError):
    """Input data violates a numeric integrity requirement (NaN/Inf)."""


class ContainerError(IOError):
    """Base class for container read failures."""


class BadMagicError(ContainerError):
    """File does not start with the expected magic bytes."""


class BadVersionError(ContainerError):
    """Container version is not supported."""


class TruncatedPayloadError(ContainerError):
    """Payload length does not match what the header implies."""


@dataclass(frozen=True)
class ComplexImage:
    """A 2D complex array tagged with the domain it lives in.

    The tag flips on every forward/inverse transform; transforming twice
    restores it.
    """

    data: np.ndarray
    domain: str

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2:
            raise ValueError(f"expected a 2D array, got shape {data.shape}")
        if self.domain not in (DOMAIN_IMAGE, DOMAIN_KSPACE):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MultiSpectralStack:
    """Per-slice complex data indexed [bin][coil], plus the bin centers.

    ``data`` has shape (n_bins, n_coils, rows, cols); every plane shares the
    same domain tag.  Bin centers must be strictly increasing and uniformly
    spaced.
    """

    data: np.ndarray
    bin_centers_khz: np.ndarray
    domain: str
    provenance: str = field(default="")

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        centers = np.asarray(self.bin_centers_khz, dtype=np.float64)
        if data.ndim != 4:
            raise ValueError(f"expected (bins, coils, rows, cols), got {data.shape}")
        if centers.ndim != 1 or centers.shape[0] != data.shape[0]:
            raise ValueError("bin_centers_khz length must equal n_bins")
        if self.domain not in (DOMAIN_IMAGE, DOMAIN_KSPACE):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if centers.size > 1:
            steps = np.diff(centers)
            if np.any(steps <= 0):
                raise ValueError("bin centers must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise ValueError("bin centers must be uniformly spaced")
        data = data.copy()
        data.setflags(write=False)
        centers = centers.copy()
        centers.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bin_centers_khz", centers)

    @property
    def n_bins(self) -> int:
        return self.data.shape[0]

    @property
    def n_coils(self) -> int:
        return self.data.shape[1]

    @property
    def rows(self) -> int:
        return self.data.shape[2]

    @property
    def cols(self) -> int:
        return self.data.shape[3]

    @property
    def bin_spacing_khz(self) -> float:
        if self.n_bins < 2:
            return 0.0
        return float(self.bin_centers_khz[1] - self.bin_centers_khz[0])

    def image(self, b: int, c: int) -> ComplexImage:
        return ComplexImage(self.data[b, c], self.domain)

    def with_data(self, data: np.ndarray, domain: str) -> "MultiSpectralStack":
        return MultiSpectralStack(data, self.bin_centers_khz, domain, self.provenance)


def fft2c(arr: np.ndarray) -> np.ndarray:
    """Unitary centered 2D FFT on the last two axes of a plain array."""
    shifted = np.fft.ifftshift(arr, axes=(-2, -1))
    k = np.fft.fft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(arr: np.ndarray) -> np.ndarray:
    """Unitary centered 2D inverse FFT on the last two axes."""
    shifted = np.fft.ifftshift(arr, axes=(-2, -1))
    img = np.fft.ifft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(img, axes=(-2, -1))


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataIntegrityError("non-finite values in transform input")


def fft2_centered(img: ComplexImage) -> ComplexImage:
    """Forward transform an image-domain ComplexImage into k-space."""
    if img.domain != DOMAIN_IMAGE:
        raise ValueError("fft2_centered expects an image-domain input")
    _check_finite(img.data)
    return ComplexImage(fft2c(img.data), DOMAIN_KSPACE)


def ifft2_centered(ksp: ComplexImage) -> ComplexImage:
    """Inverse transform k-space back to the image domain."""
    if ksp.domain != DOMAIN_KSPACE:
        raise ValueError("ifft2_centered expects a k-space input")
    _check_finite(ksp.data)
    return ComplexImage(ifft2c(ksp.data), DOMAIN_IMAGE)


def fft_stack(stack: MultiSpectralStack) -> MultiSpectralStack:
    """Transform every (bin, coil) plane of an image-domain stack."""
    if stack.domain != DOMAIN_IMAGE:
        raise ValueError("fft_stack expects an image-domain stack")
    _check_finite(stack.data)
    return stack.with_data(fft2c(stack.data), DOMAIN_KSPACE)


def ifft_stack(stack: MultiSpectralStack) -> MultiSpectralStack:
    """Inverse transform every (bin, coil) plane of a k-space stack."""
    if stack.domain != DOMAIN_KSPACE:
        raise ValueError("ifft_stack expects a k-space stack")
    _check_finite(stack.data)
    return stack.with_data(ifft2c(stack.data), DOMAIN_IMAGE)


def _center_offsets(out_dims: tuple[int, int], in_dims: tuple[int, int]) -> tuple[int, int]:
    # Even-split convention: for odd differences the extra row/col goes to
    # the high-index side.
    return ((out_dims[0] - in_dims[0]) // 2, (out_dims[1] - in_dims[1]) // 2)


def pad_center_array(arr: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Embed the last two axes centered in a zero array of the target size."""
    rows, cols = arr.shape[-2], arr.shape[-1]
    if out_rows < rows or out_cols < cols:
        raise ValueError(f"target dims ({out_rows}, {out_cols}) smaller than input ({rows}, {cols})")
    r0, c0 = _center_offsets((out_rows, out_cols), (rows, cols))
    out = np.zeros(arr.shape[:-2] + (out_rows, out_cols), dtype=arr.dtype)
    out[..., r0:r0 + rows, c0:c0 + cols] = arr
    return out


def crop_center_array(arr: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Extract the centered block from the last two axes."""
    rows, cols = arr.shape[-2], arr.shape[-1]
    if out_rows > rows or out_cols > cols:
        raise ValueError(f"target dims ({out_rows}, {out_cols}) exceed input ({rows}, {cols})")
    r0, c0 = _center_offsets((rows, cols), (out_rows, out_cols))
    return arr[..., r0:r0 + out_rows, c0:c0 + out_cols].copy()


def zero_pad_center(img: ComplexImage, out_rows: int, out_cols: int) -> ComplexImage:
    """Zero-fill a k-space plane out to a larger matrix, keeping DC centered."""
    if img.domain != DOMAIN_KSPACE:
        raise ValueError("zero_pad_center operates on k-space data")
    return ComplexImage(pad_center_array(img.data, out_rows, out_cols), DOMAIN_KSPACE)


def crop_center(ksp: ComplexImage, rows: int, cols: int) -> ComplexImage:
    """Extract the centered k-space block, inverse of zero_pad_center."""
    if ksp.domain != DOMAIN_KSPACE:
        raise ValueError("crop_center operates on k-space data")
    return ComplexImage(crop_center_array(ksp.data, rows, cols), DOMAIN_KSPACE)


# ---------------------------------------------------------------------------
# Container format.
#
# bytes 0-7    magic ("MSSTACK\0" for stacks, "MSMODEL\0" for checkpoints)
# bytes 8-11   little-endian u32 version (= 1)
# bytes 12-15  little-endian u32 JSON length
# then         UTF-8 JSON metadata, then raw payload
# ---------------------------------------------------------------------------


def write_container(path, magic: bytes, metadata: dict, payload: bytes) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(payload)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != magic:
        raise BadMagicError(f"{path}: bad magic, expected {magic!r}")
    version, json_len = struct.unpack_from("<II", raw, 8)
    if version != CONTAINER_VERSION:
        raise BadVersionError(f"{path}: unsupported container version {version}")
    if len(raw) < 16 + json_len:
        raise TruncatedPayloadError(f"{path}: metadata truncated")
    try:
        metadata = json.loads(raw[16:16 + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable metadata: {exc}") from exc
    return metadata, raw[16 + json_len:]


def save_stack(stack: MultiSpectralStack, path) -> None:
    """Write a stack as an MSSTACK container (little-endian complex64 payload)."""
    metadata = {
        "n_bins": stack.n_bins,
        "n_coils": stack.n_coils,
        "rows": stack.rows,
        "cols": stack.cols,
        "domain": stack.domain,
        "bin_centers_khz": [float(c) for c in stack.bin_centers_khz],
        "provenance": stack.provenance,
        "payload_dtype": "complex64",
    }
    payload = np.ascontiguousarray(stack.data.astype(_PAYLOAD_DTYPES["complex64"])).tobytes()
    write_container(path, MAGIC_STACK, metadata, payload)


def load_stack(path) -> MultiSpectralStack:
    """Read an MSSTACK container written by save_stack."""
    metadata, payload = read_container(path, MAGIC_STACK)
    dtype = _PAYLOAD_DTYPES[metadata.get("payload_dtype", "complex64")]
    shape = (metadata["n_bins"], metadata["n_coils"], metadata["rows"], metadata["cols"])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, dims imply {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return MultiSpectralStack(
        data.astype(np.complex128),
        np.asarray(metadata["bin_centers_khz"], dtype=np.float64),
        metadata["domain"],
        metadata.get("provenance", ""),
    )
