"""
Simulated camera-in-the-loop optimization.

A :class:`PhysicalDisplay` hides a perturbed "truth" model behind
:meth:`PhysicalDisplay.capture`; the CITL update rules only ever see captured
intensities and their own (nominal) model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import GridSpec, frequency_grid
from .metrics import psnr
from .optimizer import OptimConfig, OptimRun, _apply_update, initial_phases
from .pipeline import check_finite, forward_phase, phase_jacobian, render, render_adjoint
from .propagation import CalibratedModel
from .quantization import ConfigurationError, QuantScheme, nearest_index
from .supervision import EPS, frame_mean_sq

DEFAULT_NOISE = 1e-3
# noise stream index reserved for the final evaluation capture
EVAL_CAPTURE_INDEX = 2 ** 31 - 1


@dataclass(frozen=True)
class PhysicalDisplay:
    """Hidden display model that always quantizes before showing a pattern.

    :param truth_model: calibrated model standing in for the real hardware
    :param scheme: levels the SLM can show
    :param noise: capture noise std as a fraction of the peak noiseless intensity
    :param seed: seed of the capture noise stream
    :param perturbation: description of how ``truth_model`` was built
    """

    truth_model: CalibratedModel
    scheme: QuantScheme
    noise: float = DEFAULT_NOISE
    seed: int = 0
    perturbation: dict | None = None

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigurationError("capture noise must be non-negative")

    @property
    def grid(self) -> GridSpec:
        return self.truth_model.grid

    def shown_phase(self, phases) -> np.ndarray:
        """Phase physically shown for ``phases`` (radians or level indices)."""
        phases = np.asarray(phases)
        idx = phases if np.issubdtype(phases.dtype, np.integer) else nearest_index(phases, self.scheme)
        lut = self.truth_model.lut if self.truth_model.lut is not None else self.scheme.levels
        if lut.size != self.scheme.n_levels:
            raise ConfigurationError("truth lut size does not match the number of levels")
        return lut[idx]

    def capture(self, phases, z=None, index: int = 0) -> np.ndarray:
        """Time-averaged intensity of the quantized ``phases`` (T, M, N) or (M, N).

        ``z`` is one distance (returns (M, N)) or a sequence (returns (J, M, N));
        ``None`` means all model planes. ``index`` keys the noise draw.
        """
        phases = np.asarray(phases)
        if phases.ndim == 2:
            phases = phases[None]
        if phases.shape[-2:] != self.grid.shape:
            raise ConfigurationError(f"phase shape {phases.shape[-2:]} does not match display {self.grid.shape}")
        single = z is not None and np.ndim(z) == 0
        zs = self.truth_model.distances if z is None else ((float(z),) if single else tuple(z))
        _, fields = render(self.shown_phase(phases), self.truth_model, zs)
        inten = frame_mean_sq(fields, 1)
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, index])
            sigma = self.noise * inten.max()
            inten = np.maximum(inten + rng.normal(0.0, sigma, inten.shape), 0.0)
        return inten[0] if single else inten

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = self.truth_model.to_dict()
        d["scheme"] = self.scheme.to_dict()
        d["noise"] = self.noise
        d["seed"] = self.seed
        d["perturbation"] = self.perturbation or {}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicalDisplay":
        return cls(CalibratedModel.from_dict(d), QuantScheme.from_dict(d["scheme"]),
                   float(d.get("noise", DEFAULT_NOISE)), int(d.get("seed", 0)), d.get("perturbation") or None)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "PhysicalDisplay":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def perturbation_terms(grid: GridSpec, seed: int = 0, ripple: float = 0.15, phase_sigma: float = 0.5,
                       fourier_edge_shift: float = 1.0):
    """``(a_src, phi_src, phi_f)`` of the canonical mismatch.

    * ``a_src``: ``1 + ripple * r`` with ``r`` a sum of three random-phase,
      low-frequency sinusoids normalized to peak 1.
    * ``phi_src``: Gaussian-filtered white noise scaled to std ``phase_sigma``.
    * ``phi_f``: quadratic radial ramp equal to ``fourier_edge_shift`` radians
      at the Nyquist frequency of each axis.
    """
    rng = np.random.default_rng(seed)
    m, n = grid.shape
    y, x = np.meshgrid(np.arange(m) / m, np.arange(n) / n, indexing="ij")
    r = np.zeros(grid.shape)
    for _ in range(3):
        ky, kx = rng.uniform(-3, 3, size=2)
        r += np.sin(2 * np.pi * (ky * y + kx * x) + rng.uniform(0, 2 * np.pi))
    a_src = 1.0 + ripple * r / np.abs(r).max()

    smooth = gaussian_filter(rng.standard_normal(grid.shape), sigma=max(m, n) / 8, mode="wrap")
    phi_src = phase_sigma * (smooth - smooth.mean()) / smooth.std()

    fx, fy = frequency_grid(grid)
    nyq = 1.0 / (2 * grid.pitch)
    phi_f = fourier_edge_shift * (fx ** 2 + fy ** 2) / nyq ** 2
    return a_src, phi_src, phi_f


def canonical_display(grid: GridSpec, scheme: QuantScheme, distances=None, seed: int = 0,
                      noise: float = DEFAULT_NOISE) -> PhysicalDisplay:
    """The canonical mismatched display for ``grid`` (terms fixed by ``seed``)."""
    nominal = CalibratedModel.nominal(grid) if distances is None else CalibratedModel.nominal(grid, distances)
    recipe = {"recipe": "canonical", "seed": seed, "ripple": 0.15, "phase_sigma": 0.5, "fourier_edge_shift": 1.0}
    a_src, phi_src, phi_f = perturbation_terms(grid, seed, recipe["ripple"], recipe["phase_sigma"],
                                               recipe["fourier_edge_shift"])
    truth = nominal.with_params(a_src=a_src, phi_src=phi_src, phi_f=phi_f)
    return PhysicalDisplay(truth, scheme, noise, seed, recipe)


# ---------------------------------------------------------------------------
# update rules


def _citl_step(run: OptimRun, display: PhysicalDisplay, model: CalibratedModel, target, z,
               config: OptimConfig, scheme, spec) -> OptimRun:
    run = run.copy()
    k = run.iteration
    target = np.asarray(target, dtype=np.float64)
    a_cap = np.sqrt(display.capture(run.phases, z, index=k))
    if config.scale_mode == "closed_form":
        den = float(np.sum(a_cap * a_cap))
        s = float(np.sum(a_cap * target)) / den if den > 0 else 1.0
    else:
        s = run.s
    q = forward_phase(run.phases, scheme, spec, k)
    v, fields = render(q, model, (z,))
    check_finite(fields, "propagation")
    t = fields.shape[1]
    amp_sim = np.sqrt(frame_mean_sq(fields, 1))[0]
    r = s * a_cap - target
    n = r.size
    loss = float(np.sum(r * r)) / n
    d_amp = 2.0 * r / n
    # captured residual, simulated derivative
    g_fields = (s * d_amp / (t * (amp_sim + EPS)))[None, None] * fields
    g_q = render_adjoint(g_fields, v, model, (z,))
    g_phi = check_finite(g_q * phase_jacobian(run.phases, scheme, spec, k), "surrogate quantizer")
    run.phases = _apply_update(run, g_phi, config)
    if config.scale_mode == "closed_form":
        run.s = s
    else:
        run.s = max(s - config.step_size * float(np.sum(d_amp * a_cap)), 1e-12)
    run.loss_history.append(loss)
    run.iteration += 1
    return run


def citl_step_naive(run: OptimRun, display: PhysicalDisplay, model: CalibratedModel, target, z,
                    config: OptimConfig) -> OptimRun:
    """Captured residual, backward pass through ``model`` at the continuous phase."""
    return _citl_step(run, display, model, target, z, config, None, None)


def citl_step_surrogate(run: OptimRun, display: PhysicalDisplay, model: CalibratedModel, target, z,
                        config: OptimConfig) -> OptimRun:
    """Captured residual, backward pass through ``model`` at the quantized phase
    and then through the configured surrogate."""
    spec = config.surrogate_at(run.iteration, display.scheme)
    return _citl_step(run, display, model, target, z, config, display.scheme, spec)


CITL_VARIANTS = {"naive": citl_step_naive, "surrogate": citl_step_surrogate}


@dataclass
class CitlResult:
    run: OptimRun
    psnr: float
    amplitude: np.ndarray  # scaled captured amplitude of the exported phases


def evaluate_capture(display: PhysicalDisplay, indices, target, z, index: int = EVAL_CAPTURE_INDEX):
    """Scaled captured amplitude of exported level indices and its PSNR."""
    a = np.sqrt(display.capture(np.asarray(indices), z, index=index))
    den = float(np.sum(a * a))
    s = float(np.sum(a * target)) / den if den > 0 else 1.0
    rec = s * a
    return rec, psnr(np.clip(rec, 0.0, 1.0), target)


def run_citl(display: PhysicalDisplay, model: CalibratedModel, target, config: OptimConfig,
             variant: str = "surrogate", z=None, callback=None) -> CitlResult:
    """Full CITL optimization with early stopping on the captured loss."""
    if variant not in CITL_VARIANTS:
        raise ConfigurationError(f"unknown CITL variant {variant!r}")
    if variant == "surrogate" and config.surrogate.kind == "none":
        raise ConfigurationError("surrogate CITL needs a surrogate kind other than 'none'")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != model.grid.shape:
        raise ConfigurationError(f"target shape {target.shape} does not match grid {model.grid.shape}")
    z = model.distances[0] if z is None else float(z)
    step = CITL_VARIANTS[variant]
    run = OptimRun(initial_phases(model.grid.shape, config.frames, config.seed), 1.0)
    best, since = math.inf, 0
    for k in range(config.iterations):
        run = step(run, display, model, target, z, config)
        if callback is not None:
            callback(k, run)
        if config.patience is None:
            continue
        loss = run.loss_history[-1]
        if loss < best * (1 - config.tolerance) or best == math.inf:
            best, since = min(best, loss), 0
        else:
            since += 1
            if since >= config.patience:
                run.stopped_early = True
                break
    run.quantized = nearest_index(run.phases, display.scheme)
    rec, p = evaluate_capture(display, run.quantized, target, z)
    return CitlResult(run, p, rec)
