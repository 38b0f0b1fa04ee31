"""
Discrete phase levels and the gradient strategies used to optimize through
the (non-differentiable) nearest-level projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit

TWO_PI = 2 * np.pi

SURROGATE_KINDS = ("none", "unit_jacobian", "sigmoid", "gumbel_softmax", "gumbel_softmax_forward")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    """Feasible set of SLM phase values.

    :param levels: sorted, distinct phase levels in radians
    :param bit_depth: set when the levels are the uniform ``2**bits`` grid
    :param wrap: treat phase on the circle (distances taken modulo 2 pi)
    """

    levels: np.ndarray
    bit_depth: int | None = None
    wrap: bool = True

    def __post_init__(self):
        lv = np.array(self.levels, dtype=np.float64).ravel()
        if lv.size < 2:
            raise ConfigurationError("a quantization scheme needs at least 2 levels")
        if not np.all(np.isfinite(lv)):
            raise ConfigurationError("levels must be finite")
        if self.wrap:
            lv = np.mod(lv, TWO_PI)
        if np.any(np.diff(lv) <= 0):
            raise ConfigurationError("levels must be strictly increasing")
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)

    def __eq__(self, other):
        if not isinstance(other, QuantScheme):
            return NotImplemented
        return (self.bit_depth == other.bit_depth and self.wrap == other.wrap
                and np.array_equal(self.levels, other.levels))

    def __hash__(self):
        return hash((self.levels.tobytes(), self.bit_depth, self.wrap))

    @classmethod
    def uniform(cls, bits: int, wrap: bool = True) -> "QuantScheme":
        n = 2 ** int(bits)
        return cls(TWO_PI * np.arange(n) / n, int(bits), wrap)

    @property
    def n_levels(self) -> int:
        return self.levels.size

    def gaps(self) -> np.ndarray:
        """Gap from each level to the next one (wrapping for circular schemes)."""
        lv = self.levels
        if self.wrap:
            return np.diff(np.append(lv, lv[0] + TWO_PI))
        return np.append(np.diff(lv), np.inf)

    def min_gap(self) -> float:
        return float(np.min(self.gaps()))

    def to_dict(self) -> dict:
        if self.bit_depth is not None:
            return {"bits": self.bit_depth, "wrap": self.wrap}
        return {"levels": [float(v) for v in self.levels], "wrap": self.wrap}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        wrap = bool(d.get("wrap", True))
        if "bits" in d and d["bits"] is not None:
            return cls.uniform(int(d["bits"]), wrap)
        if "levels" in d:
            return cls(np.asarray(d["levels"], dtype=np.float64), None, wrap)
        raise ConfigurationError("scheme needs either 'bits' or 'levels'")


def angular_delta(phi, level):
    """Signed difference ``phi - level`` wrapped to (-pi, pi]."""
    d = np.mod(np.asarray(phi, dtype=np.float64) - level, TWO_PI)
    return np.where(d > np.pi, d - TWO_PI, d)


def _delta(phi, level, wrap):
    if wrap:
        return angular_delta(phi, level)
    return np.asarray(phi, dtype=np.float64) - level


def nearest_index(phi, scheme: QuantScheme) -> np.ndarray:
    """Index of the nearest level; exact ties go to the lower index."""
    phi = np.asarray(phi, dtype=np.float64)
    lv = scheme.levels
    n = lv.size
    x = np.mod(phi, TWO_PI) if scheme.wrap else phi
    hi = np.searchsorted(lv, x, side="left")
    if scheme.wrap:
        lo_i = np.mod(hi - 1, n)
        hi_i = np.mod(hi, n)
    else:
        lo_i = np.clip(hi - 1, 0, n - 1)
        hi_i = np.clip(hi, 0, n - 1)
    d_lo = np.abs(_delta(x, lv[lo_i], scheme.wrap))
    d_hi = np.abs(_delta(x, lv[hi_i], scheme.wrap))
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi_i < lo_i))
    return np.where(pick_hi, hi_i, lo_i)


def quantize(phi, scheme: QuantScheme) -> np.ndarray:
    """Project each phase onto the nearest member of the feasible set."""
    return scheme.levels[nearest_index(phi, scheme)]


def score(phi, scheme: QuantScheme, w: float, scale: float = 1.0) -> np.ndarray:
    """Per-level score ``scale * sig(w d) (1 - sig(w d))``; trailing axis of length L."""
    d = _delta(np.asarray(phi, dtype=np.float64)[..., None], scheme.levels, scheme.wrap)
    sg = expit(w * d)
    return scale * sg * (1 - sg)


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate-gradient configuration.

    ``slope`` is the sigmoid slope (or, for the Gumbel-Softmax kinds, the
    score width ``w``); ``temperature`` and ``score_scale`` are the current
    (possibly annealed) softmax temperature and score multiplier.
    """

    kind: str = "gumbel_softmax"
    slope: float = 1.0
    temperature: float = 4.0
    score_scale: float = 300.0
    noise_enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigurationError(f"unknown surrogate kind {self.kind!r}")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if not self.slope > 0:
            raise ConfigurationError("slope must be positive")
        if not self.score_scale > 0:
            raise ConfigurationError("score_scale must be positive")

    @property
    def is_gumbel(self) -> bool:
        return self.kind in ("gumbel_softmax", "gumbel_softmax_forward")


# ---------------------------------------------------------------------------
# Gumbel-Softmax relaxation
#
# Noise comes from a counter-based hash of (seed, iteration, pixel, level), so
# a sample is a pure function of its key: the forward and backward pass of one
# iteration see the same draw, and results do not depend on evaluation order.

_M64 = 0xFFFFFFFFFFFFFFFF


@njit(cache=True)
def _mix(x):
    # splitmix64 finalizer
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@njit(cache=True)
def _gumbel_at(key, index):
    h = _mix(key ^ _mix(np.uint64(index) + np.uint64(0x9E3779B97F4A7C15)))
    u = (np.float64(h >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
    return -np.log(-np.log(u))


def _stream_key(seed: int, iteration: int) -> np.uint64:
    k = (int(seed) & _M64) * 0x9E3779B97F4A7C15 + int(iteration) * 0xD1B54A32D192ED03 + 1
    return np.uint64(k & _M64)


@njit(cache=True)
def _gumbel_fill(key, out):
    flat = out.ravel()
    for i in range(flat.size):
        flat[i] = _gumbel_at(key, i)


def gumbel_noise(shape, seed: int, iteration: int) -> np.ndarray:
    """Gumbel(0, 1) samples for one iteration, indexed by flat (pixel, level) position."""
    out = np.empty(shape, dtype=np.float64)
    _gumbel_fill(_stream_key(seed, iteration), out)
    return out


# levels whose noiseless logit trails the peak by more than this are skipped
LOGIT_MARGIN = 25.0


def window_halfwidth(scheme: QuantScheme, spec: SurrogateSpec, margin: float = LOGIT_MARGIN) -> int:
    """Half-width (in levels) of the window around the nearest level that can
    carry non-negligible softmax weight; ``-1`` means use every level."""
    peak = 0.25 * spec.score_scale / spec.temperature
    b = 0.25 - margin * spec.temperature / spec.score_scale
    if peak <= margin or b <= 0:
        return -1
    sg = 0.5 * (1 + np.sqrt(max(0.0, 1 - 4 * b)))
    reach = np.log(sg / (1 - sg)) / spec.slope  # radians
    h = int(np.ceil(reach / scheme.min_gap())) + 1
    return -1 if 2 * h + 1 >= scheme.n_levels else h


@njit(cache=True)
def _gs_kernel(phi, levels, wrap, w, scale, tau, mode, key, noise, half, q_out, jac_out, wt_out, want_wt):
    # mode: 0 no noise, 1 hashed noise, 2 explicit noise array
    # half: window half-width around the nearest level, -1 for all levels
    n_lv = levels.size
    two_pi = 2.0 * np.pi
    n_win = n_lv if half < 0 else 2 * half + 1
    idx = np.empty(n_win, dtype=np.int64)
    s = np.empty(n_win)
    ds = np.empty(n_win)
    br = np.empty(n_win)
    g = np.empty(n_win)
    for p in range(phi.size):
        x = phi[p]
        cnt = 0
        if half < 0:
            for l in range(n_lv):
                idx[cnt] = l
                cnt += 1
        else:
            xr = x - two_pi * np.floor(x / two_pi) if wrap else x
            hi = np.searchsorted(levels, xr)
            near = hi
            if hi == 0:
                near = 0
            elif hi >= n_lv:
                near = n_lv - 1
            elif xr - levels[hi - 1] <= levels[hi] - xr:
                near = hi - 1
            for off in range(-half, half + 1):
                l = near + off
                if wrap:
                    l = l % n_lv
                elif l < 0 or l >= n_lv:
                    continue
                idx[cnt] = l
                cnt += 1
        top = -np.inf
        for k in range(cnt):
            l = idx[k]
            d = x - levels[l]
            if wrap:
                d = d - two_pi * np.floor((d + np.pi) / two_pi)
                if d == -np.pi:
                    d = np.pi
                br[k] = x - d
            else:
                br[k] = levels[l]
            sg = 1.0 / (1.0 + np.exp(-w * d))
            base = sg * (1.0 - sg)
            s[k] = scale * base
            ds[k] = scale * w * base * (1.0 - 2.0 * sg)
            z = s[k]
            if mode == 1:
                z += _gumbel_at(key, p * n_lv + l)
            elif mode == 2:
                z += noise[p * n_lv + l]
            g[k] = z / tau
            if g[k] > top:
                top = g[k]
        tot = 0.0
        for k in range(cnt):
            g[k] = np.exp(g[k] - top)
            tot += g[k]
        qh = 0.0
        for k in range(cnt):
            g[k] /= tot
            qh += g[k] * br[k]
        jac = 0.0
        for k in range(cnt):
            jac += g[k] * ds[k] * (br[k] - qh)
        if want_wt:
            for l in range(n_lv):
                wt_out[p * n_lv + l] = 0.0
            for k in range(cnt):
                wt_out[p * n_lv + idx[k]] = g[k]
        q_out[p] = qh
        jac_out[p] = jac / tau


def _run_gs(phi, scheme, spec, noise, iteration, want_weights, exact=False):
    if not spec.is_gumbel:
        raise ConfigurationError(f"surrogate kind {spec.kind!r} is not a Gumbel-Softmax kind")
    if not spec.temperature > 0:
        raise ConfigurationError("temperature must be positive")
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    flat = phi.ravel()
    n_lv = scheme.n_levels
    if not spec.noise_enabled:
        mode, arr = 0, np.zeros(1)
    elif noise is None:
        mode, arr = 1, np.zeros(1)
    else:
        mode, arr = 2, np.ascontiguousarray(noise, dtype=np.float64).ravel()
        if arr.size != flat.size * n_lv:
            raise ValueError("noise must have shape phi.shape + (L,)")
    half = -1 if exact else window_halfwidth(scheme, spec)
    q = np.empty_like(flat)
    jac = np.empty_like(flat)
    wt = np.empty(flat.size * n_lv if want_weights else 1)
    _gs_kernel(flat, scheme.levels, bool(scheme.wrap), float(spec.slope), float(spec.score_scale),
               float(spec.temperature), mode, _stream_key(spec.rng_seed, iteration), arr, half,
               q, jac, wt, want_weights)
    weights = wt.reshape(phi.shape + (n_lv,)) if want_weights else None
    return q.reshape(phi.shape), jac.reshape(phi.shape), weights


def gumbel_softmax_relax(phi, scheme: QuantScheme, spec: SurrogateSpec, noise=None, iteration: int = 0,
                         exact: bool = False):
    """Relaxed phase ``sum_l Q_l G_l`` and the softmax weights ``G`` (trailing axis L).

    Each level enters on the 2 pi branch nearest to ``phi``, so the relaxation
    is continuous across the wrap point. Noise is drawn for
    ``(spec.rng_seed, iteration)`` unless given explicitly as ``noise``.
    Unless ``exact``, levels whose logit trails the peak by more than
    ``LOGIT_MARGIN`` get zero weight.
    """
    q, _, wt = _run_gs(phi, scheme, spec, noise, iteration, True, exact)
    return q, wt


def gumbel_softmax_jacobian(phi, scheme: QuantScheme, spec: SurrogateSpec, noise=None, iteration: int = 0,
                            exact: bool = False):
    """Elementwise d q_hat / d phi with the Gumbel sample held fixed."""
    return _run_gs(phi, scheme, spec, noise, iteration, False, exact)[1]


def gumbel_softmax_forward_and_jacobian(phi, scheme, spec, noise=None, iteration: int = 0):
    q, jac, _ = _run_gs(phi, scheme, spec, noise, iteration, False)
    return q, jac


def _bracket(phi, scheme):
    """Lower bracketing level index, its value on phi's branch, and the gap."""
    phi = np.asarray(phi, dtype=np.float64)
    lv = scheme.levels
    n = lv.size
    if scheme.wrap:
        x = np.mod(phi, TWO_PI)
        lo = np.mod(np.searchsorted(lv, x, side="right") - 1, n)
        offset = np.mod(x - lv[lo], TWO_PI)
    else:
        lo = np.clip(np.searchsorted(lv, phi, side="right") - 1, 0, n - 2)
        offset = phi - lv[lo]
    gap = scheme.gaps()[lo]
    return lo, phi - offset, offset, gap


def sigmoid_relax(phi, scheme: QuantScheme, slope: float):
    """Smooth staircase between the two levels bracketing ``phi``."""
    _, base, offset, gap = _bracket(phi, scheme)
    return base + gap * expit(slope * (offset - gap / 2) / gap)


def sigmoid_jacobian(phi, scheme: QuantScheme, slope: float) -> np.ndarray:
    _, _, offset, gap = _bracket(phi, scheme)
    sg = expit(slope * (offset - gap / 2) / gap)
    return slope * sg * (1 - sg)


def surrogate_jacobian(phi, scheme: QuantScheme, spec: SurrogateSpec, noise=None, iteration: int = 0):
    if spec.kind == "none":
        raise ConfigurationError("surrogate kind 'none' has no surrogate gradient")
    if spec.kind == "unit_jacobian":
        return np.ones(np.shape(phi))
    if spec.kind == "sigmoid":
        return sigmoid_jacobian(phi, scheme, spec.slope)
    return gumbel_softmax_jacobian(phi, scheme, spec, noise, iteration)


def surrogate_gradient(upstream, phi, scheme: QuantScheme, spec: SurrogateSpec, noise=None, iteration: int = 0):
    """Chain ``dL/dq`` through the surrogate derivative ``d q_hat / d phi``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if spec.kind == "unit_jacobian":
        return upstream.copy()
    return upstream * surrogate_jacobian(phi, scheme, spec, noise, iteration)
