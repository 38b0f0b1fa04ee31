"""
Angular spectrum propagation and the parametric calibrated display model.

The model keeps the content-independent terms only: a source amplitude and
phase at the SLM plane, an amplitude and phase in the Fourier plane (folded
into the transfer function), and an optional lookup table mapping discrete
SLM codes to physical phase.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import (ComplexField, GridSpec, InvalidFieldError, fft2c, ifft2c,
                    frequency_grid)

FORMAT_VERSION = 1

# default optics (R, G, B)
WAVELENGTHS = {"r": 638e-9, "g": 520e-9, "b": 450e-9}
PITCH = 10.8e-6
PLANE_DISTANCES = (0.079, 0.081, 0.0825, 0.084, 0.086, 0.088, 0.091)
HELD_OUT_DISTANCE = 0.086


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class TransferFunction:
    grid: GridSpec
    distance: float
    h_values: np.ndarray = dc_field(repr=False)


_cache: dict[str, np.ndarray] = {}
_cache_lock = threading.Lock()


def _cache_key(grid: GridSpec, z: float, a_f, phi_f) -> str:
    h = hashlib.sha256()
    h.update(np.array([grid.height, grid.width], dtype="<i8").tobytes())
    h.update(np.array([grid.pitch, grid.wavelength, z], dtype="<f8").tobytes())
    for arr in (a_f, phi_f):
        if arr is None:
            h.update(b"-")
        else:
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _transfer_values(grid: GridSpec, z: float, a_f=None, phi_f=None) -> np.ndarray:
    fx, fy = frequency_grid(grid)
    lam = grid.wavelength
    arg = 1.0 - (lam * fx) ** 2 - (lam * fy) ** 2
    prop = arg > 0
    kz = 2 * np.pi / lam * z * np.sqrt(np.where(prop, arg, 0.0))
    if phi_f is not None:
        kz = kz + phi_f
    h = np.exp(1j * kz)
    if a_f is not None:
        h = a_f * h
    return np.where(prop, h, 0.0 + 0.0j)


def clear_transfer_cache():
    with _cache_lock:
        _cache.clear()


def build_transfer(grid: GridSpec, z: float, a_f=None, phi_f=None) -> TransferFunction:
    """ASM kernel ``a_F exp(i(kz sqrt(1 - (lam fx)^2 - (lam fy)^2) + phi_F))``.

    Evanescent bins are zeroed. Results are cached in memory, and on disk when
    ``CGH_CACHE_DIR`` is set.
    """
    z = float(z)
    key = _cache_key(grid, z, a_f, phi_f)
    with _cache_lock:
        h = _cache.get(key)
    if h is None:
        cache_dir = os.environ.get("CGH_CACHE_DIR")
        path = os.path.join(cache_dir, f"tf_{key}.npy") if cache_dir else None
        if path and os.path.exists(path):
            h = np.load(path)
        else:
            h = _transfer_values(grid, z, a_f, phi_f)
            if path:
                os.makedirs(cache_dir, exist_ok=True)
                tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
                with open(tmp, "wb") as fh:
                    np.save(fh, h)
                os.replace(tmp, path)
        h.setflags(write=False)
        with _cache_lock:
            h = _cache.setdefault(key, h)
    return TransferFunction(grid, z, h)


def propagate_array(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    return ifft2c(fft2c(u) * h)


def propagate_adjoint(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`propagate_array` (conjugate kernel)."""
    return ifft2c(fft2c(g) * np.conj(h))


def asm_propagate(u: ComplexField, tf: TransferFunction) -> ComplexField:
    if u.grid != tf.grid:
        raise DimensionError(f"field grid {u.grid} does not match transfer grid {tf.grid}")
    return ComplexField(u.grid, propagate_array(u.values, tf.h_values))


def identity_lut(levels: int) -> np.ndarray:
    return 2 * np.pi * np.arange(levels) / levels


def apply_lut(indices, lut) -> np.ndarray:
    """Map integer level indices to phase values in radians."""
    idx = np.asarray(indices)
    lut = np.asarray(lut, dtype=np.float64)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("lut lookup needs integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= lut.size):
        raise IndexError(f"lut index out of range [0, {lut.size})")
    return lut[idx]


def lut_gradient(indices, upstream, n_levels: int) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. lut entries given dL/dphase per pixel."""
    idx = np.asarray(indices).ravel()
    return np.bincount(idx, weights=np.asarray(upstream, dtype=np.float64).ravel(),
                       minlength=n_levels)


@dataclass(frozen=True)
class CalibratedModel:
    """Source- and Fourier-plane calibration terms plus a phase lookup table."""

    grid: GridSpec
    a_src: np.ndarray = dc_field(repr=False)
    phi_src: np.ndarray = dc_field(repr=False)
    a_f: np.ndarray = dc_field(repr=False)
    phi_f: np.ndarray = dc_field(repr=False)
    lut: np.ndarray | None = dc_field(default=None, repr=False)
    distances: tuple = PLANE_DISTANCES

    def __post_init__(self):
        shape = self.grid.shape
        for name in ("a_src", "phi_src", "a_f", "phi_f"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidFieldError(f"{name} contains non-finite values")
            if name.startswith("a_") and np.any(arr < 0):
                raise InvalidFieldError(f"{name} must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.lut is not None:
            lut = np.array(self.lut, dtype=np.float64)
            if lut.ndim != 1 or lut.size < 2 or not np.all(np.isfinite(lut)):
                raise InvalidFieldError("lut must be a finite 1D table with at least 2 entries")
            if np.any(lut < 0) or np.any(lut >= 2 * np.pi):
                raise InvalidFieldError("lut values must lie in [0, 2pi)")
            if np.any(np.diff(np.mod(lut - lut[0], 2 * np.pi)) <= 0):
                raise InvalidFieldError("lut must be strictly increasing on the branch starting at lut[0]")
            lut.setflags(write=False)
            object.__setattr__(self, "lut", lut)
        object.__setattr__(self, "distances", tuple(float(z) for z in self.distances))

    @classmethod
    def nominal(cls, grid: GridSpec, distances=PLANE_DISTANCES, lut=None) -> "CalibratedModel":
        ones, zeros = np.ones(grid.shape), np.zeros(grid.shape)
        return cls(grid, ones, zeros, ones, zeros, lut, tuple(distances))

    def with_params(self, **kw) -> "CalibratedModel":
        return replace(self, **kw)

    def fourier_term(self) -> np.ndarray | None:
        """``a_F exp(i phi_F)``, or None when both terms are neutral."""
        if not np.any(self.phi_f) and np.all(self.a_f == 1.0):
            return None
        return self.a_f * np.exp(1j * self.phi_f)

    def transfer(self, z: float) -> TransferFunction:
        # only the nominal kernel is cached; fitted Fourier terms change every step
        base = build_transfer(self.grid, z)
        term = self.fourier_term()
        if term is None:
            return base
        return TransferFunction(self.grid, float(z), base.h_values * term)

    def slm_phase(self, phase) -> np.ndarray:
        """Physical SLM phase; integer inputs are treated as lut codes."""
        phase = np.asarray(phase)
        if np.issubdtype(phase.dtype, np.integer):
            lut = self.lut if self.lut is not None else identity_lut(int(phase.max()) + 1)
            return apply_lut(phase, lut)
        return phase.astype(np.float64)

    def source_field(self, phase) -> np.ndarray:
        return self.a_src * np.exp(1j * (self.phi_src + self.slm_phase(phase)))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        arrays = {name: _encode(getattr(self, name)) for name in ("a_src", "phi_src", "a_f", "phi_f")}
        return {
            "format_version": FORMAT_VERSION,
            "grid": self.grid.to_dict(),
            "distances": list(self.distances),
            "arrays": arrays,
            "lut": None if self.lut is None else _encode(self.lut),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {d.get('format_version')!r}")
        arrays = {k: _decode(v) for k, v in d["arrays"].items()}
        lut = None if d.get("lut") is None else _decode(d["lut"])
        return cls(GridSpec.from_dict(d["grid"]), arrays["a_src"], arrays["phi_src"],
                   arrays["a_f"], arrays["phi_f"], lut, tuple(d["distances"]))

    def save(self, path, extra: dict | None = None):
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)

    @classmethod
    def load(cls, path) -> "CalibratedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    if d.get("dtype", "<f8") != "<f8":
        raise ValueError(f"unsupported array dtype {d['dtype']}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def model_forward(phase, model: CalibratedModel, z: float) -> ComplexField:
    """Field at distance ``z`` for one SLM phase pattern (radians or lut codes)."""
    if not np.isfinite(z):
        raise ValueError(f"propagation distance must be finite, got {z}")
    phase = np.asarray(phase)
    if phase.shape != model.grid.shape:
        raise DimensionError(f"phase shape {phase.shape} does not match model grid {model.grid.shape}")
    u = propagate_array(model.source_field(phase), model.transfer(z).h_values)
    return ComplexField(model.grid, u)
