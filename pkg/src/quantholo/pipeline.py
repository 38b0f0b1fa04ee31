"""
Forward rendering of time-multiplexed SLM frames and its adjoint.

Phases are held as (T, M, N) arrays; rendered fields as (J, T, M, N) with one
slab per target plane. Complex gradients follow the convention
``g = dL/dRe(u) + i dL/dIm(u)``.
"""

from __future__ import annotations

import numpy as np

from .propagation import CalibratedModel, propagate_adjoint, propagate_array
from .quantization import (QuantScheme, SurrogateSpec, gumbel_softmax_forward_and_jacobian,
                           quantize, surrogate_jacobian)


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a named pipeline stage."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values in stage '{stage}'")
        self.stage = stage


def check_finite(arr, stage: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(stage)
    return arr


def forward_phase(phi, scheme: QuantScheme | None, spec: SurrogateSpec | None, iteration: int = 0):
    """Phase actually fed to the display model during optimization.

    ``scheme=None`` bypasses quantization (naive optimization); the
    forward-replacing Gumbel-Softmax kind feeds the relaxed phase (noise drawn
    for ``iteration``), everything else the hard-quantized phase.
    """
    if scheme is None:
        return np.asarray(phi, dtype=np.float64)
    if spec is not None and spec.kind == "gumbel_softmax_forward":
        return gumbel_softmax_forward_and_jacobian(phi, scheme, spec, iteration=iteration)[0]
    return quantize(phi, scheme)


def phase_jacobian(phi, scheme: QuantScheme | None, spec: SurrogateSpec | None, iteration: int = 0):
    """Elementwise d(forward phase)/d phi as used in the backward pass."""
    phi = np.asarray(phi, dtype=np.float64)
    if scheme is None:
        return np.ones_like(phi)
    if spec is None or spec.kind == "none":
        return np.zeros_like(phi)
    return surrogate_jacobian(phi, scheme, spec, iteration=iteration)


def render(q, model: CalibratedModel, distances):
    """Source fields (T, M, N) and plane fields (J, T, M, N) for display phases ``q``."""
    v = model.source_field(q)
    fields = np.stack([propagate_array(v, model.transfer(z).h_values) for z in distances])
    return v, fields


def render_adjoint(g_fields, v, model: CalibratedModel, distances):
    """dL/dq from plane-field gradients (J, T, M, N)."""
    g_v = np.zeros_like(v)
    for j, z in enumerate(distances):
        g_v += propagate_adjoint(g_fields[j], model.transfer(z).h_values)
    check_finite(g_v, "transfer adjoint")
    return np.imag(g_v * np.conj(v))
