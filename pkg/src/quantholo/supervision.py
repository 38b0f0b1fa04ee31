"""
Target content and runtime supervision losses.

Every loss is assembled from *heads* that act on rendered plane fields of
shape (J, T, M, N) and return ``(loss, dL/dfields, dL/ds)``. The optimizer
chains the field gradients back to the SLM phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import FrameStack
from .pipeline import forward_phase, render

EPS = 1e-12

# training diopters and the matching propagation distances (held-out 2.0 D)
DIOPTERS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
TRAIN_DIOPTERS = (0.0, 0.5, 1.0, 1.5, 2.5, 3.0)
DIOPTER_DISTANCES = (0.079, 0.081, 0.0825, 0.084, 0.086, 0.088, 0.091)


class SupervisionError(ValueError):
    pass


def diopters_to_distance(d, diopters=DIOPTERS, distances=DIOPTER_DISTANCES):
    """Map scene depth in diopters to SLM propagation distance (piecewise linear)."""
    return np.interp(d, diopters, distances)


# ---------------------------------------------------------------------------
# target content

TARGET_KINDS = ("amp2d", "rgbd", "focal_stack", "light_field")


@dataclass(frozen=True)
class TargetContent:
    """Tagged target container.

    amp2d: ``amplitude`` (M, N).
    rgbd: ``amplitude`` (M, N) and ``depth`` (M, N) in the same units as
    ``distances`` (meters unless converted).
    focal_stack: ``planes`` (J, M, N) at increasing ``distances``.
    light_field: ``views`` (Py, Px, W, W) patch-grid view amplitudes.
    """

    kind: str
    amplitude: np.ndarray | None = dc_field(default=None, repr=False)
    depth: np.ndarray | None = dc_field(default=None, repr=False)
    planes: np.ndarray | None = dc_field(default=None, repr=False)
    views: np.ndarray | None = dc_field(default=None, repr=False)
    distances: tuple = ()

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise SupervisionError(f"unknown target kind {self.kind!r}")
        for name in ("amplitude", "depth", "planes", "views"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise SupervisionError(f"target {name} contains non-finite values")
            if name != "depth" and np.any(arr < 0):
                raise SupervisionError(f"target {name} must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "distances", tuple(float(z) for z in self.distances))
        required = {"amp2d": ("amplitude",), "rgbd": ("amplitude", "depth"),
                    "focal_stack": ("planes",), "light_field": ("views",)}[self.kind]
        for name in required:
            if getattr(self, name) is None:
                raise SupervisionError(f"{self.kind} target needs '{name}'")
        if self.kind == "focal_stack":
            if len(self.distances) != self.planes.shape[0]:
                raise SupervisionError("focal stack needs one distance per plane")
            if np.any(np.diff(self.distances) <= 0):
                raise SupervisionError("focal stack distances must be strictly increasing")
        if self.kind == "light_field" and self.views.ndim != 4:
            raise SupervisionError("light field views must be (Py, Px, W, W)")

    @property
    def shape(self):
        if self.kind == "focal_stack":
            return self.planes.shape[1:]
        if self.kind == "light_field":
            return None
        return self.amplitude.shape


# ---------------------------------------------------------------------------
# depth masks


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray = dc_field(repr=False)  # (J, M, N) of {0, 1}
    distances: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=np.float64)
        if m.ndim != 3 or m.shape[0] != len(self.distances):
            raise SupervisionError("need one mask per distance")
        if not np.array_equal(m.sum(axis=0), np.ones(m.shape[1:])):
            raise SupervisionError("masks must partition the image")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "distances", tuple(float(z) for z in self.distances))

    def __len__(self):
        return self.masks.shape[0]


def depth_to_masks(depth, distances) -> MaskSet:
    """Assign each pixel to its nearest plane; ties go to the lower plane index."""
    depth = np.asarray(depth, dtype=np.float64)
    dist = np.asarray(distances, dtype=np.float64)
    if dist.size < 1:
        raise SupervisionError("need at least one plane")
    err = np.abs(depth[None] - dist.reshape(-1, *([1] * depth.ndim)))
    nearest = np.argmin(err, axis=0)  # first minimum = lower index on ties
    masks = (nearest[None] == np.arange(dist.size).reshape(-1, *([1] * depth.ndim))).astype(np.float64)
    return MaskSet(masks, tuple(dist))


# ---------------------------------------------------------------------------
# short-time Fourier transform


@dataclass(frozen=True)
class StftSpec:
    window_size: int = 8
    hop: int | None = None
    window: str = "rectangular"

    def __post_init__(self):
        hop = self.window_size if self.hop is None else int(self.hop)
        if self.window_size < 1 or not 1 <= hop <= self.window_size:
            raise SupervisionError("need 1 <= hop <= window_size")
        if self.window not in ("rectangular", "hann"):
            raise SupervisionError(f"unknown window {self.window!r}")
        object.__setattr__(self, "hop", hop)

    @property
    def n_views(self) -> int:
        return self.window_size ** 2

    def window_array(self) -> np.ndarray:
        w = self.window_size
        if self.window == "rectangular":
            return np.ones((w, w))
        h = np.hanning(w + 2)[1:-1]
        win = np.outer(h, h)
        # unit mean power keeps amplitudes comparable to the rectangular case
        return win / np.sqrt(np.mean(win ** 2))

    def layout(self, shape):
        """Padded shape and patch-grid size for a field of ``shape``."""
        w, hop = self.window_size, self.hop
        m, n = shape
        if w > m or w > n:
            raise SupervisionError(f"window {w} larger than grid {shape}")
        py = -(-(m - w) // hop) + 1
        px = -(-(n - w) // hop) + 1
        return ((py - 1) * hop + w, (px - 1) * hop + w), (py, px)


class _StftPlan:
    def __init__(self, spec: StftSpec, shape):
        self.spec = spec
        self.shape = tuple(shape)
        self.padded, self.grid = spec.layout(shape)
        w, hop = spec.window_size, spec.hop
        py, px = self.grid
        rows = (np.arange(py) * hop)[:, None, None, None] + np.arange(w)[None, None, :, None]
        cols = (np.arange(px) * hop)[None, :, None, None] + np.arange(w)[None, None, None, :]
        self.index = rows * self.padded[1] + cols  # (py, px, w, w)
        self.window = spec.window_array()
        inside = (rows < shape[0]) & (cols < shape[1])
        self.patch_weight = inside.any(axis=(2, 3)).astype(np.float64)

    def forward(self, u):
        lead = u.shape[:-2]
        pad = np.zeros(lead + self.padded, dtype=np.complex128)
        pad[..., :self.shape[0], :self.shape[1]] = u
        flat = pad.reshape(lead + (-1,))
        patches = flat[..., self.index] * self.window
        # fft2c on the last two axes
        return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(patches, axes=(-2, -1)), norm="ortho"),
                               axes=(-2, -1))

    def adjoint(self, g):
        lead = g.shape[:-4]
        p = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(g, axes=(-2, -1)), norm="ortho"),
                            axes=(-2, -1)) * self.window
        size = self.padded[0] * self.padded[1]
        p = p.reshape((-1,) + p.shape[len(lead):])
        out = np.empty((p.shape[0], size), dtype=np.complex128)
        idx = self.index.ravel()
        for b in range(p.shape[0]):
            vals = p[b].ravel()
            out[b] = (np.bincount(idx, vals.real, minlength=size)
                      + 1j * np.bincount(idx, vals.imag, minlength=size))
        out = out.reshape(lead + self.padded)
        return out[..., :self.shape[0], :self.shape[1]]


_plans: dict = {}


def stft_plan(spec: StftSpec, shape) -> _StftPlan:
    key = (spec, tuple(shape))
    plan = _plans.get(key)
    if plan is None:
        plan = _plans[key] = _StftPlan(spec, shape)
    return plan


def stft(field, spec: StftSpec) -> np.ndarray:
    """Patch-wise centered 2D DFT: (Py, Px, W, W) complex array.

    Accepts a ComplexField or any array whose last two axes are spatial.
    """
    u = np.asarray(getattr(field, "values", field), dtype=np.complex128)
    return stft_plan(spec, u.shape[-2:]).forward(u)


def istft(coeffs, spec: StftSpec, shape) -> np.ndarray:
    """Inverse of :func:`stft` for non-overlapping rectangular tiling."""
    if spec.window != "rectangular" or spec.hop != spec.window_size:
        raise SupervisionError("exact inversion needs a rectangular window with hop == window_size")
    return stft_plan(spec, shape).adjoint(np.asarray(coeffs))


# ---------------------------------------------------------------------------
# loss heads


def frame_mean_sq(x, axis):
    """Mean of |x|^2 over the frame axis, summed in sorted order so the
    result is bit-identical under any permutation of the frames."""
    p = np.sort(np.abs(x) ** 2, axis=axis)
    return np.sum(p, axis=axis) / x.shape[axis]


def _amp(fields):
    return np.sqrt(frame_mean_sq(fields, -3))


class AmplitudeHead:
    """Mean-squared error between scaled time-multiplexed amplitude and targets.

    ``targets`` and ``masks`` are (J, M, N); the loss is the mean over planes
    of the per-plane pixel MSE.
    """

    def __init__(self, targets, masks=None):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.masks = None if masks is None else np.asarray(masks, dtype=np.float64)

    def __call__(self, fields, s):
        j, t = fields.shape[:2]
        amp = _amp(fields)
        if self.masks is None:
            r = s * amp - self.targets
        else:
            r = self.masks * (s * amp - self.targets)
        n = r[0].size
        loss = float(np.sum(r * r)) / (j * n)
        d_amp = 2.0 * r / (j * n)
        if self.masks is not None:
            d_amp = d_amp * self.masks
        g_s = float(np.sum(d_amp * amp))
        g_fields = (s * d_amp / (t * (amp + EPS)))[:, None] * fields
        return loss, g_fields, g_s

    def closed_form_scale(self, fields):
        amp = _amp(fields)
        if self.masks is not None:
            amp = amp * self.masks
            tgt = self.targets * self.masks
        else:
            tgt = self.targets
        den = float(np.sum(amp * amp))
        return float(np.sum(amp * tgt)) / den if den > 0 else 1.0

    def reconstructions(self, fields, s):
        return s * _amp(fields)


class LightFieldHead:
    """MSE between scaled time-averaged STFT amplitudes and target views."""

    def __init__(self, views, stft_spec: StftSpec):
        self.views = np.asarray(views, dtype=np.float64)
        self.spec = stft_spec

    def _check(self, plan):
        expect = plan.grid + (self.spec.window_size,) * 2
        if self.views.shape != expect:
            raise SupervisionError(f"light field has shape {self.views.shape}, STFT gives {expect}")

    def __call__(self, fields, s):
        if fields.shape[0] != 1:
            raise SupervisionError("light-field supervision uses a single plane")
        u = fields[0]
        t = u.shape[0]
        plan = stft_plan(self.spec, u.shape[-2:])
        self._check(plan)
        coeffs = plan.forward(u)  # (T, Py, Px, W, W)
        amp = _amp_stft(coeffs)
        wgt = plan.patch_weight[:, :, None, None]
        r = wgt * (s * amp - self.views)
        n = r.size
        loss = float(np.sum(r * r)) / n
        d_amp = 2.0 * r * wgt / n
        g_s = float(np.sum(d_amp * amp))
        g_coeffs = (s * d_amp / (t * (amp + EPS)))[None] * coeffs
        g_u = plan.adjoint(g_coeffs)
        return loss, g_u[None], g_s

    def closed_form_scale(self, fields):
        plan = stft_plan(self.spec, fields.shape[-2:])
        amp = _amp_stft(plan.forward(fields[0])) * plan.patch_weight[:, :, None, None]
        den = float(np.sum(amp * amp))
        return float(np.sum(amp * self.views)) / den if den > 0 else 1.0

    def reconstructions(self, fields, s):
        plan = stft_plan(self.spec, fields.shape[-2:])
        return s * _amp_stft(plan.forward(fields[0]))


def _amp_stft(coeffs):
    return np.sqrt(frame_mean_sq(coeffs, 0))


def patch_masks(masks, spec: StftSpec, shape):
    """Sample (J, M, N) pixel masks at each patch center -> (J, Py, Px)."""
    plan = stft_plan(spec, shape)
    py, px = plan.grid
    w, hop = spec.window_size, spec.hop
    rows = np.minimum(np.arange(py) * hop + w // 2, shape[0] - 1)
    cols = np.minimum(np.arange(px) * hop + w // 2, shape[1] - 1)
    return np.asarray(masks)[:, rows[:, None], cols[None, :]]


class StftVarianceHead:
    """Angular variance of the masked, scaled STFT amplitude, averaged over
    patches and planes (population variance over the W*W bins)."""

    def __init__(self, masks, stft_spec: StftSpec):
        self.masks = np.asarray(masks, dtype=np.float64)
        self.spec = stft_spec

    def __call__(self, fields, s):
        j, t = fields.shape[:2]
        shape = fields.shape[-2:]
        plan = stft_plan(self.spec, shape)
        pm = patch_masks(self.masks, self.spec, shape)[:, :, :, None, None]  # (J, Py, Px, 1, 1)
        coeffs = plan.forward(fields)  # (J, T, Py, Px, W, W)
        amp = np.sqrt(frame_mean_sq(coeffs, 1))  # (J, Py, Px, W, W)
        a = pm * s * amp
        dev = a - a.mean(axis=(-2, -1), keepdims=True)
        b = self.spec.n_views
        n_patch = plan.grid[0] * plan.grid[1]
        var = np.sum(dev * dev, axis=(-2, -1)) / b
        loss = float(np.sum(var)) / (j * n_patch)
        d_a = 2.0 * dev / (b * j * n_patch)
        d_amp = d_a * pm * s
        g_s = float(np.sum(d_a * pm * amp))
        g_coeffs = (d_amp / (t * (amp + EPS)))[:, None] * coeffs
        return loss, plan.adjoint(g_coeffs), g_s


# ---------------------------------------------------------------------------
# objectives


@dataclass
class Objective:
    """A weighted sum of heads evaluated on fields at ``distances``."""

    distances: tuple
    heads: list
    weights: list = None
    scale_head: int = 0

    def __post_init__(self):
        self.distances = tuple(float(z) for z in self.distances)
        if self.weights is None:
            self.weights = [1.0] * len(self.heads)

    def __call__(self, fields, s):
        total, g_fields, g_s = 0.0, np.zeros_like(fields), 0.0
        for head, wt in zip(self.heads, self.weights):
            loss, gf, gs = head(fields, s)
            total += wt * loss
            g_fields += wt * gf
            g_s += wt * gs
        return total, g_fields, g_s

    def closed_form_scale(self, fields):
        return self.heads[self.scale_head].closed_form_scale(fields)

    def reconstructions(self, fields, s):
        return self.heads[self.scale_head].reconstructions(fields, s)


def _plane_targets(target: TargetContent, distances):
    if target.kind == "focal_stack":
        return target.planes
    return np.broadcast_to(target.amplitude, (len(distances),) + target.amplitude.shape)


def build_objective(kind: str, target: TargetContent, z=None, masks: MaskSet | None = None,
                    stft_spec: StftSpec | None = None, reg_weight: float = 0.0) -> Objective:
    """Objective for one loss family.

    kind is one of ``2d``, ``2.5d``, ``3d``, ``4d`` or ``stft_reg``; ``2.5d``
    adds the angular-variance regularizer when ``reg_weight > 0``.
    """
    stft_spec = stft_spec or StftSpec()
    if kind == "2d":
        if target.amplitude is None:
            raise SupervisionError("2D supervision needs an amplitude target")
        z = target.distances[0] if z is None else z
        return Objective((z,), [AmplitudeHead(target.amplitude[None])])
    if kind in ("2.5d", "stft_reg"):
        if masks is None:
            if target.depth is None or not target.distances:
                raise SupervisionError("2.5D supervision needs masks or a depth map with distances")
            masks = depth_to_masks(target.depth, target.distances)
        dist = masks.distances
        if kind == "stft_reg":
            return Objective(dist, [StftVarianceHead(masks.masks, stft_spec)])
        heads = [AmplitudeHead(_plane_targets(target, dist), masks.masks)]
        weights = [1.0]
        if reg_weight > 0:
            heads.append(StftVarianceHead(masks.masks, stft_spec))
            weights.append(reg_weight)
        return Objective(dist, heads, weights)
    if kind == "3d":
        if target.kind != "focal_stack":
            raise SupervisionError("3D supervision needs a focal stack target")
        return Objective(target.distances, [AmplitudeHead(target.planes)])
    if kind == "4d":
        if target.kind != "light_field":
            raise SupervisionError("4D supervision needs a light field target")
        if target.views.shape[-2:] != (stft_spec.window_size,) * 2:
            raise SupervisionError(
                f"light field has {target.views.shape[-2:]} views, STFT gives {(stft_spec.window_size,) * 2}")
        z = target.distances[0] if z is None else z
        return Objective((z,), [LightFieldHead(target.views, stft_spec)])
    raise SupervisionError(f"unknown loss kind {kind!r}")


def evaluate(objective: Objective, phases, model, scheme, spec, s, iteration: int = 0):
    """Loss value for (T, M, N) phases under the configured forward quantizer."""
    phases = np.asarray(getattr(phases, "frames", phases), dtype=np.float64)
    if phases.ndim == 2:
        phases = phases[None]
    q = forward_phase(phases, scheme, spec, iteration)
    _, fields = render(q, model, objective.distances)
    return objective(fields, s)[0]


def _check_scale(s):
    if not s > 0:
        raise SupervisionError(f"scale must be positive, got {s}")


def _check_grid(arr, model):
    if arr.shape[-2:] != model.grid.shape:
        raise SupervisionError(f"target shape {arr.shape[-2:]} does not match grid {model.grid.shape}")


def loss_2d(phases: FrameStack, model, scheme, spec, s, target, z=None):
    _check_scale(s)
    amp = np.asarray(getattr(target, "amplitude", target), dtype=np.float64)
    if np.any(amp < 0):
        raise SupervisionError("target amplitude must be non-negative")
    _check_grid(amp, model)
    z = model.distances[0] if z is None else z
    tgt = TargetContent("amp2d", amplitude=amp, distances=(z,))
    return evaluate(build_objective("2d", tgt, z), phases, model, scheme, spec, s)


def loss_25d(phases: FrameStack, model, scheme, spec, s, rgbd: TargetContent, masks: MaskSet):
    _check_scale(s)
    if rgbd.distances and len(rgbd.distances) != len(masks):
        raise SupervisionError("mask count does not match plane count")
    _check_grid(rgbd.amplitude, model)
    obj = build_objective("2.5d", rgbd, masks=masks)
    return evaluate(obj, phases, model, scheme, spec, s)


def loss_3d(phases: FrameStack, model, scheme, spec, s, focal_stack: TargetContent, distances=None):
    _check_scale(s)
    if distances is not None and not np.allclose(distances, focal_stack.distances, rtol=0, atol=0):
        raise SupervisionError("focal stack distances do not match the configured planes")
    _check_grid(focal_stack.planes, model)
    return evaluate(build_objective("3d", focal_stack), phases, model, scheme, spec, s)


def loss_4d(phases: FrameStack, model, scheme, spec, s, light_field: TargetContent, stft_spec: StftSpec, z=None):
    _check_scale(s)
    obj = build_objective("4d", light_field, z=z, stft_spec=stft_spec)
    return evaluate(obj, phases, model, scheme, spec, s)


def stft_variance_reg(phases: FrameStack, model, scheme, spec, s, masks: MaskSet, stft_spec: StftSpec):
    _check_scale(s)
    tgt = TargetContent("rgbd", amplitude=np.zeros(masks.masks.shape[1:]),
                        depth=np.zeros(masks.masks.shape[1:]), distances=masks.distances)
    obj = build_objective("stft_reg", tgt, masks=masks, stft_spec=stft_spec)
    return evaluate(obj, phases, model, scheme, spec, s)
