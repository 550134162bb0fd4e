"""Eigenface subspace: fitting, projection, synthesis, persistence, image I/O.

Images are flat float vectors, row-major and channel-interleaved, with a
nominal [0, 1] range. A fitted basis stores an orthonormal component matrix
together with per-component standard deviations chosen so that the projected
training coordinates have unit sample variance along every axis.

Basis arrays are computed in float64 but rounded to exact float32 values, so
writing and re-reading the binary basis file is a bit-exact round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

BASIS_MAGIC = b"EIGBASIS"
BASIS_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ")  # magic, version, width, height, channels, rank


class BasisFormatError(ValueError):
    """Basis file is malformed: bad magic, version, truncation, or non-finite data."""


class DegenerateComponentError(ValueError):
    """A retained principal direction has numerically zero variance."""


@dataclass(eq=False)
class ImageTensor:
    """Flat image vector; pixel (x, y, ch) lives at index (y*width + x)*channels + ch."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        self.pixels = np.asarray(self.pixels, dtype=np.float64).ravel()
        if self.pixels.size != self.width * self.height * self.channels:
            raise ValueError(
                f"pixel count {self.pixels.size} != "
                f"{self.width}x{self.height}x{self.channels}"
            )
        if not np.isfinite(self.pixels).all():
            raise ValueError("image contains non-finite pixels")

    @property
    def dim(self) -> int:
        return self.width * self.height * self.channels

    def grid(self) -> np.ndarray:
        """View as (height, width, channels)."""
        return self.pixels.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "ImageTensor":
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim == 2:
            grid = grid[:, :, None]
        h, w, c = grid.shape
        return cls(width=w, height=h, channels=c, pixels=grid.ravel())


def horizontal_flip(image: ImageTensor) -> ImageTensor:
    """Mirror left-right: pixel (x, y, ch) -> (width-1-x, y, ch). An involution."""
    flipped = image.grid()[:, ::-1, :]
    return ImageTensor(image.width, image.height, image.channels, flipped.ravel())


@dataclass(eq=False)
class EigenBasis:
    """Orthonormal component rows plus per-axis stds of the training projection."""

    width: int
    height: int
    channels: int
    rank: int
    mean: np.ndarray            # (dim,)
    component_stds: np.ndarray  # (rank,), positive, nonincreasing
    components: np.ndarray      # (rank, dim), orthonormal rows

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.component_stds = np.asarray(self.component_stds, dtype=np.float64).ravel()
        self.components = np.asarray(self.components, dtype=np.float64)
        d = self.width * self.height * self.channels
        if self.mean.shape != (d,):
            raise ValueError(f"mean has length {self.mean.size}, expected {d}")
        if self.components.shape != (self.rank, d):
            raise ValueError(
                f"components shape {self.components.shape} != ({self.rank}, {d})"
            )
        if self.component_stds.shape != (self.rank,):
            raise ValueError("component_stds length != rank")
        if not (self.component_stds > 0).all():
            raise ValueError("component_stds must be strictly positive")

    @property
    def dim(self) -> int:
        return self.width * self.height * self.channels

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EigenBasis)
            and (self.width, self.height, self.channels, self.rank)
            == (other.width, other.height, other.channels, other.rank)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.component_stds, other.component_stds)
            and np.array_equal(self.components, other.components)
        )


def _f32_exact(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 for fast math."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def fit_pca(images: list[ImageTensor], rank: int) -> EigenBasis:
    """Fit a rank-`rank` eigenbasis to `images`.

    Thin SVD of the mean-centered data matrix; when there are fewer images
    than pixels the small Gram matrix is decomposed instead. Each component's
    sign is fixed so its largest-magnitude entry is positive, and stds use the
    sample convention (divide by M-1) so projected training coordinates have
    unit sample variance per axis.
    """
    if len(images) < 2:
        raise ValueError("need at least 2 images to fit a basis")
    w, h, c = images[0].width, images[0].height, images[0].channels
    for i, img in enumerate(images):
        if (img.width, img.height, img.channels) != (w, h, c):
            raise ValueError(
                f"image {i} is {img.width}x{img.height}x{img.channels}, "
                f"expected {w}x{h}x{c}"
            )
    m = len(images)
    d = w * h * c
    max_rank = min(d, m - 1)
    if not 1 <= rank <= max_rank:
        raise ValueError(f"rank must be in [1, {max_rank}], got {rank}")

    data = np.stack([img.pixels for img in images])  # (m, d)
    mean = data.mean(axis=0)
    centered = data - mean

    if m < d:
        # Gram route: the m x m matrix has the same nonzero spectrum.
        gram = centered @ centered.T
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:rank]
        sing = np.sqrt(np.clip(eigvals[order], 0.0, None))
        _check_degenerate(sing, m, d)
        components = (centered.T @ eigvecs[:, order]).T / sing[:, None]
    else:
        _, sing_all, vt = np.linalg.svd(centered, full_matrices=False)
        sing = sing_all[:rank]
        _check_degenerate(sing, m, d)
        components = vt[:rank]

    # Deterministic sign: largest-magnitude entry of each component positive.
    for row in components:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0

    stds = sing / np.sqrt(m - 1)
    return EigenBasis(
        width=w,
        height=h,
        channels=c,
        rank=rank,
        mean=_f32_exact(mean),
        component_stds=_f32_exact(stds),
        components=_f32_exact(components),
    )


def _check_degenerate(sing: np.ndarray, m: int, d: int) -> None:
    tol = max(m, d) * np.finfo(np.float64).eps * (sing[0] if sing.size else 0.0)
    bad = np.nonzero(sing <= tol)[0]
    if bad.size:
        raise DegenerateComponentError(
            f"component {bad[0]} has numerically zero variance "
            f"(singular value {sing[bad[0]]:.3e})"
        )


def project(basis: EigenBasis, image: ImageTensor) -> np.ndarray:
    """Coordinates of `image` in the basis: <flat - mean, u_i> / std_i."""
    if image.dim != basis.dim or (image.width, image.height, image.channels) != (
        basis.width,
        basis.height,
        basis.channels,
    ):
        raise ValueError(
            f"image {image.width}x{image.height}x{image.channels} does not match "
            f"basis {basis.width}x{basis.height}x{basis.channels}"
        )
    return (basis.components @ (image.pixels - basis.mean)) / basis.component_stds


def synthesize(basis: EigenBasis, coords: np.ndarray) -> ImageTensor:
    """Image mean + sum_i coords_i * std_i * u_i. Pixels are not clamped."""
    coords = np.asarray(coords, dtype=np.float64).ravel()
    if coords.size != basis.rank:
        raise ValueError(f"coords length {coords.size} != rank {basis.rank}")
    flat = basis.mean + (coords * basis.component_stds) @ basis.components
    return ImageTensor(basis.width, basis.height, basis.channels, flat)


def save_basis(basis: EigenBasis, path) -> None:
    """Write the little-endian binary basis format (f32 payload)."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                BASIS_MAGIC,
                BASIS_VERSION,
                basis.width,
                basis.height,
                basis.channels,
                basis.rank,
            )
        )
        fh.write(basis.mean.astype("<f4").tobytes())
        fh.write(basis.component_stds.astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(basis.components).astype("<f4").tobytes())


def load_basis(path) -> EigenBasis:
    """Read a basis file; bit-exact inverse of save_basis for fitted bases."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise BasisFormatError("truncated header")
        magic, version, w, h, c, rank = _HEADER.unpack(header)
        if magic != BASIS_MAGIC:
            raise BasisFormatError(f"bad magic {magic!r}")
        if version != BASIS_VERSION:
            raise BasisFormatError(f"unsupported version {version}")
        d = w * h * c
        payload = fh.read()
    expected = 4 * (d + rank + rank * d)
    if len(payload) != expected:
        raise BasisFormatError(
            f"payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.isfinite(values).all():
        raise BasisFormatError("basis file contains non-finite values")
    mean = values[:d]
    stds = values[d : d + rank]
    components = values[d + rank :].reshape(rank, d)
    if not (stds > 0).all():
        raise BasisFormatError("non-positive component std in basis file")
    return EigenBasis(
        width=w, height=h, channels=c, rank=rank,
        mean=mean, component_stds=stds, components=components,
    )


def render_u8(image: ImageTensor) -> np.ndarray:
    """Clamp to [0, 1] and quantize to 8-bit; the display/file-side step."""
    clipped = np.clip(image.grid(), 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8)


def write_png(image: ImageTensor, path) -> None:
    arr = render_u8(image)
    if image.channels == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path, size: tuple[int, int] | None = None, grayscale: bool = False) -> ImageTensor:
    """Load an image file as float pixels in [0, 1], optionally resized to (width, height)."""
    with Image.open(path) as im:
        im = im.convert("L" if grayscale else "RGB")
        if size is not None and im.size != size:
            im = im.resize(size, Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageTensor.from_grid(arr)
