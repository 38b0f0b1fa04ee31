"""
Complex wavefields on a regular sampling grid.

The centered FFT pair used throughout the package is orthonormal
(``norm="ortho"``, i.e. a 1/sqrt(MN) factor in both directions), so Parseval
holds with constant 1 and the adjoint of the forward transform is the
inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np


class InvalidFieldError(ValueError):
    """Raised for malformed grids, fields or frame stacks."""


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid of an SLM-sized field.

    :param height: number of rows (M)
    :param width: number of columns (N)
    :param pitch: pixel pitch in meters
    :param wavelength: wavelength in meters
    """

    height: int
    width: int
    pitch: float
    wavelength: float

    def __post_init__(self):
        if int(self.height) < 2 or int(self.width) < 2:
            raise InvalidFieldError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise InvalidFieldError(f"pitch must be positive, got {self.pitch}")
        if not (np.isfinite(self.wavelength) and self.wavelength > 0):
            raise InvalidFieldError(f"wavelength must be positive, got {self.wavelength}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "pitch": self.pitch, "wavelength": self.wavelength}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["height"], d["width"], d["pitch"], d["wavelength"])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ComplexField:
    """Complex amplitudes sampled on ``grid``; ``values[row, col]``."""

    grid: GridSpec
    values: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.shape != self.grid.shape:
            raise InvalidFieldError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidFieldError("field contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    def __getitem__(self, idx):
        return self.values[idx]

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def energy(self) -> float:
        return float(np.sum(self.intensity))


@dataclass(frozen=True)
class FrameStack:
    """T time-multiplexed frames sharing one grid.

    ``frames`` is a (T, M, N) array of either complex fields or real phase maps.
    """

    grid: GridSpec
    frames: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise InvalidFieldError("frame stack must hold at least one frame")
        if arr.shape[1:] != self.grid.shape:
            raise InvalidFieldError(f"frame shape {arr.shape[1:]} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidFieldError("frame stack contains non-finite values")
        object.__setattr__(self, "frames", _frozen(arr))

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.count

    @classmethod
    def from_fields(cls, fields) -> "FrameStack":
        fields = list(fields)
        if not fields:
            raise InvalidFieldError("empty frame stack")
        grid = fields[0].grid
        for f in fields[1:]:
            if f.grid != grid:
                raise InvalidFieldError("all frames must share one grid")
        return cls(grid, np.stack([f.values for f in fields]))


# ---------------------------------------------------------------------------
# array-level transforms (operate on the last two axes)

def fft2c(arr: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D DFT over the last two axes."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(arr, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def ifft2c(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(arr, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def fft2_centered(field: ComplexField) -> ComplexField:
    """2D DFT with the zero frequency at index (M//2, N//2)."""
    if not np.all(np.isfinite(field.values)):
        raise InvalidFieldError("field contains non-finite values")
    return ComplexField(field.grid, fft2c(field.values))


def ifft2_centered(field: ComplexField) -> ComplexField:
    if not np.all(np.isfinite(field.values)):
        raise InvalidFieldError("field contains non-finite values")
    return ComplexField(field.grid, ifft2c(field.values))


def frequency_axes(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """1D frequency axes (fy, fx) in cycles/m matching the centered layout."""
    fy = (np.arange(grid.height) - grid.height // 2) / (grid.height * grid.pitch)
    fx = (np.arange(grid.width) - grid.width // 2) / (grid.width * grid.pitch)
    return fy, fx


def frequency_grid(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin spatial frequencies ``(fx, fy)`` as M x N maps, cycles/m."""
    fy, fx = frequency_axes(grid)
    fx_map, fy_map = np.meshgrid(fx, fy, indexing="xy")
    return fx_map, fy_map


def intensity_average_array(frames: np.ndarray) -> np.ndarray:
    """sqrt(mean_t |u_t|^2) over the leading axis."""
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise InvalidFieldError("empty frame stack")
    # sorted summation: exact invariance under frame permutation
    return np.sqrt(np.sum(np.sort(np.abs(frames) ** 2, axis=0), axis=0) / frames.shape[0])


def intensity_average(frames: FrameStack) -> np.ndarray:
    """Time-multiplexed amplitude of a stack of fields."""
    return intensity_average_array(frames.frames)
