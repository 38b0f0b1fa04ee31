"""
Gradient engine and the time-multiplexed phase optimization loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .pipeline import check_finite, forward_phase, phase_jacobian, render, render_adjoint
from .propagation import CalibratedModel
from .quantization import ConfigurationError, QuantScheme, SurrogateSpec, nearest_index, quantize
from .supervision import Objective, build_objective

log = logging.getLogger(__name__)

METHODS = ("naive", "projected", "surrogate")


@dataclass(frozen=True)
class AnnealSchedule:
    """Per-iteration schedules, evaluated at progress ``t / t_max`` in [0, 1].

    Temperature decays as ``tau0 * exp(-decay * progress)``; the score scale
    and the sigmoid slope ramp linearly between their start and end values.
    """

    tau0: float = 4.0
    decay: float = math.log(2)
    score_scale_start: float = 300.0
    score_scale_end: float = 1000.0
    slope_start: float = 4.0
    slope_end: float = 16.0

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ConfigurationError("tau0 must be positive")

    def temperature(self, progress: float) -> float:
        return self.tau0 * math.exp(-self.decay * progress)

    def score_scale(self, progress: float) -> float:
        return self.score_scale_start + (self.score_scale_end - self.score_scale_start) * progress

    def slope(self, progress: float) -> float:
        return self.slope_start + (self.slope_end - self.slope_start) * progress


@dataclass(frozen=True)
class OptimConfig:
    """Optimization settings.

    ``lr=None`` picks 0.01 for one frame and 0.02 for multiplexed frames.
    ``gs_width`` sets the Gumbel-Softmax score width ``w`` in units of
    inverse level gaps (``w = gs_width / min_gap``) for coarse schemes. Where
    that would exceed ``gs_max_slope`` rad^-1 the scheme counts as fine and
    ``w = gs_fine_slope`` instead: a flat score spreading the relaxation over
    many levels works better there. ``patience=None`` disables early stopping.
    """

    iterations: int = 2000
    lr: float | None = None
    frames: int = 1
    method: str = "surrogate"
    surrogate: SurrogateSpec = dc_field(default_factory=SurrogateSpec)
    anneal: AnnealSchedule = dc_field(default_factory=AnnealSchedule)
    gs_width: float = 0.7
    gs_max_slope: float = 2.0
    gs_fine_slope: float = 0.5
    scale_mode: str = "closed_form"
    optimizer: str = "adam"
    patience: int | None = 100
    tolerance: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.frames < 1:
            raise ConfigurationError("frames must be >= 1")
        if self.lr is not None and not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not (self.gs_width > 0 and self.gs_max_slope > 0 and self.gs_fine_slope > 0):
            raise ConfigurationError("gs_width, gs_max_slope and gs_fine_slope must be positive")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.scale_mode not in ("closed_form", "joint_gradient"):
            raise ConfigurationError(f"unknown scale_mode {self.scale_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.method == "surrogate" and self.surrogate.kind == "none":
            raise ConfigurationError("surrogate method needs a surrogate kind other than 'none'")

    def gs_slope(self, scheme: QuantScheme) -> float:
        """Score width ``w`` (rad^-1) for ``scheme``."""
        w = self.gs_width / scheme.min_gap()
        return w if w <= self.gs_max_slope else self.gs_fine_slope

    @property
    def step_size(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.frames == 1 else 0.02

    def surrogate_at(self, iteration: int, scheme: QuantScheme | None) -> SurrogateSpec:
        """Surrogate spec with annealed parameters for ``iteration``."""
        progress = iteration / (self.iterations - 1) if self.iterations > 1 else 0.0
        spec = self.surrogate
        kw = {"rng_seed": self.seed}
        if spec.kind == "sigmoid":
            kw["slope"] = self.anneal.slope(progress)
        elif spec.is_gumbel:
            kw["temperature"] = self.anneal.temperature(progress)
            kw["score_scale"] = self.anneal.score_scale(progress)
            if scheme is not None:
                kw["slope"] = self.gs_slope(scheme)
        return replace(spec, **kw)


@dataclass
class Problem:
    objective: Objective
    model: CalibratedModel
    scheme: QuantScheme


@dataclass
class OptimRun:
    phases: np.ndarray  # (T, M, N) continuous phases
    s: float
    loss_history: list = dc_field(default_factory=list)
    iteration: int = 0
    quantized: np.ndarray | None = None  # (T, M, N) level indices
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    stopped_early: bool = False

    def copy(self) -> "OptimRun":
        return OptimRun(self.phases.copy(), self.s, list(self.loss_history), self.iteration,
                        None if self.quantized is None else self.quantized.copy(),
                        None if self.adam_m is None else self.adam_m.copy(),
                        None if self.adam_v is None else self.adam_v.copy(),
                        self.stopped_early)


# ---------------------------------------------------------------------------
# gradients


def objective_gradient(objective: Objective, phases, model, scheme, spec, s, iteration: int = 0,
                       closed_form_scale: bool = False):
    """Loss and its gradients ``(loss, dL/dphases, dL/ds, s)``.

    Reverse accumulation: loss -> amplitude -> frame average -> inverse FFT
    -> transfer function -> forward FFT -> source terms -> exp(i phase) ->
    quantizer surrogate. With ``closed_form_scale`` the scale is replaced by
    its least-squares value before evaluating the loss. ``iteration`` keys
    the Gumbel noise, shared by the forward and backward pass.
    """
    phases = np.asarray(phases, dtype=np.float64)
    if phases.ndim == 2:
        phases = phases[None]
    q = check_finite(forward_phase(phases, scheme, spec, iteration), "quantizer forward")
    v, fields = render(q, model, objective.distances)
    check_finite(fields, "propagation")
    if closed_form_scale:
        s = objective.closed_form_scale(fields)
    loss, g_fields, g_s = objective(fields, s)
    check_finite(g_fields, "loss head")
    g_q = render_adjoint(g_fields, v, model, objective.distances)
    g_phi = g_q * phase_jacobian(phases, scheme, spec, iteration)
    check_finite(g_phi, "surrogate quantizer")
    return loss, g_phi, g_s, s


def gradient(loss_kind: str, phases, model, scheme, spec, s, target, iteration: int = 0, **objective_kw):
    """``(dL/dphases, dL/ds)`` for one of the supervision families."""
    obj = build_objective(loss_kind, target, **objective_kw)
    _, g_phi, g_s, _ = objective_gradient(obj, phases, model, scheme, spec, s, iteration)
    return g_phi, g_s


# ---------------------------------------------------------------------------
# steppers

_B1, _B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def _apply_update(run: OptimRun, grad, config: OptimConfig) -> np.ndarray:
    lr = config.step_size
    if config.optimizer == "sgd":
        return run.phases - lr * grad
    if run.adam_m is None:
        run.adam_m = np.zeros_like(run.phases)
        run.adam_v = np.zeros_like(run.phases)
    k = run.iteration + 1
    run.adam_m = _B1 * run.adam_m + (1 - _B1) * grad
    run.adam_v = _B2 * run.adam_v + (1 - _B2) * grad * grad
    m_hat = run.adam_m / (1 - _B1 ** k)
    v_hat = run.adam_v / (1 - _B2 ** k)
    return run.phases - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def _step(run, problem, config, scheme, spec, project=False):
    run = run.copy()
    closed = config.scale_mode == "closed_form"
    loss, g_phi, g_s, s = objective_gradient(problem.objective, run.phases, problem.model,
                                             scheme, spec, run.s, run.iteration, closed_form_scale=closed)
    new = _apply_update(run, g_phi, config)
    if project:
        new = quantize(new, problem.scheme)
    run.phases = new
    if closed:
        run.s = s
    else:
        run.s = max(run.s - config.step_size * g_s, 1e-12)
    run.loss_history.append(loss)
    run.iteration += 1
    return run


def step_naive(run: OptimRun, problem: Problem, config: OptimConfig) -> OptimRun:
    """Continuous-phase update; the quantizer is bypassed in both passes."""
    return _step(run, problem, config, None, None)


def step_projected(run: OptimRun, problem: Problem, config: OptimConfig) -> OptimRun:
    """Gradient step on the (already feasible) phase, then projection onto the levels."""
    return _step(run, problem, config, None, None, project=True)


def step_surrogate(run: OptimRun, problem: Problem, config: OptimConfig) -> OptimRun:
    """Hard-quantized (or relaxed) forward pass, surrogate backward pass."""
    spec = config.surrogate_at(run.iteration, problem.scheme)
    return _step(run, problem, config, problem.scheme, spec)


STEPPERS = {"naive": step_naive, "projected": step_projected, "surrogate": step_surrogate}


def projected_variant_update(phases, problem: Problem, s, lr):
    """Projected-GD variant that keeps the projection only inside the forward
    model: ``phi <- phi - lr * dL/dq`` evaluated at ``q(phi)``."""
    q = quantize(phases, problem.scheme)
    v, fields = render(q, problem.model, problem.objective.distances)
    _, g_fields, _ = problem.objective(fields, s)
    g_q = render_adjoint(g_fields, v, problem.model, problem.objective.distances)
    return phases - lr * g_q


# ---------------------------------------------------------------------------
# driver


def initial_phases(shape, frames: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-np.pi, np.pi, size=(frames,) + tuple(shape))


def initial_run(problem: Problem, config: OptimConfig) -> OptimRun:
    phases = initial_phases(problem.model.grid.shape, config.frames, config.seed)
    if config.method == "projected":
        phases = quantize(phases, problem.scheme)
    scheme = problem.scheme if config.method == "surrogate" else None
    spec = config.surrogate_at(0, problem.scheme) if config.method == "surrogate" else None
    q = forward_phase(phases, scheme, spec, 0)
    _, fields = render(q, problem.model, problem.objective.distances)
    return OptimRun(phases, problem.objective.closed_form_scale(fields))


def validate(problem: Problem, config: OptimConfig):
    shape = problem.model.grid.shape
    for head in problem.objective.heads:
        tg = getattr(head, "targets", None)
        if tg is not None and tg.shape[-2:] != shape:
            raise ConfigurationError(f"target shape {tg.shape[-2:]} does not match grid {shape}")
        if tg is not None and tg.shape[0] != len(problem.objective.distances):
            raise ConfigurationError("target plane count does not match distances")
    if config.method == "projected" and config.surrogate.kind != "none":
        log.debug("projected method ignores the surrogate setting")


def optimize(target, model: CalibratedModel, scheme: QuantScheme, config: OptimConfig,
             loss_kind: str = "2d", stepper=None, callback=None, **objective_kw) -> OptimRun:
    """Optimize ``config.frames`` phase patterns for ``target``.

    ``target`` is a TargetContent (built into an objective for ``loss_kind``)
    or a ready Objective. Returns the run with hard-quantized level indices in
    ``quantized``.
    """
    objective = target if isinstance(target, Objective) else build_objective(loss_kind, target, **objective_kw)
    problem = Problem(objective, model, scheme)
    validate(problem, config)
    step = stepper or STEPPERS[config.method]
    run = initial_run(problem, config)
    best, since = math.inf, 0
    for k in range(config.iterations):
        run = step(run, problem, config)
        loss = run.loss_history[-1]
        if callback is not None:
            callback(k, run)
        if config.patience is None:
            continue
        if loss < best * (1 - config.tolerance) or best == math.inf:
            best, since = min(best, loss), 0
        else:
            since += 1
            if since >= config.patience:
                run.stopped_early = True
                log.info("early stop at iteration %d (loss %.6g)", k + 1, loss)
                break
    run.quantized = nearest_index(run.phases, scheme)
    return run


def export_phases(run: OptimRun, scheme: QuantScheme) -> np.ndarray:
    """Feasible phase values of the exported frames."""
    idx = run.quantized if run.quantized is not None else nearest_index(run.phases, scheme)
    return scheme.levels[idx]


def reconstruct(problem: Problem, phases):
    """Scaled reconstructions for feasible ``phases`` (closed-form scale)."""
    _, fields = render(np.asarray(phases, dtype=np.float64), problem.model, problem.objective.distances)
    s = problem.objective.closed_form_scale(fields)
    return problem.objective.reconstructions(fields, s), s
