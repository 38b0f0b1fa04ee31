"""
Bits x frames x method sweeps and their CSV form.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .field import GridSpec
from .io import BUILTIN_TARGETS, builtin_amplitude, load_amplitude
from .metrics import psnr, ssim
from .optimizer import OptimConfig, Problem, export_phases, optimize, reconstruct
from .propagation import PITCH, WAVELENGTHS, CalibratedModel
from .quantization import ConfigurationError, QuantScheme, SurrogateSpec
from .supervision import TargetContent, build_objective

# sweep method name -> (optimizer method, surrogate kind)
SWEEP_METHODS = {
    "naive": ("naive", "none"),
    "projected_gd": ("surrogate", "unit_jacobian"),  # projection kept only inside the forward model
    "projected_eq4": ("projected", "none"),  # project after every step
    "sigmoid": ("surrogate", "sigmoid"),
    "gs_surrogate": ("surrogate", "gumbel_softmax"),
    "gs_forward": ("surrogate", "gumbel_softmax_forward"),
}
DEFAULT_METHODS = ("naive", "projected_gd", "sigmoid", "gs_surrogate", "gs_forward")
DEFAULT_TARGETS = ("camera", "coins", "moon", "horse", "astronaut")
CSV_FIELDS = ("method", "bits", "frames", "psnr", "ssim", "n_runs", "runs", "error")


@dataclass(frozen=True)
class SweepConfig:
    bits: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    frames: tuple = (1, 2, 4, 8)
    methods: tuple = DEFAULT_METHODS
    targets: tuple = DEFAULT_TARGETS
    height: int = 64
    width: int = 64
    pitch: float = PITCH
    wavelength: float = WAVELENGTHS["g"]
    z: float = 0.01
    iterations: int = 500
    lr: float | None = None
    gs_width: float = 0.7
    gs_max_slope: float = 2.0
    gs_fine_slope: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("bits", "frames", "methods", "targets"):
            val = tuple(getattr(self, name))
            if not val:
                raise ConfigurationError(f"sweep '{name}' list must not be empty")
            object.__setattr__(self, name, val)
        for m in self.methods:
            if m not in SWEEP_METHODS:
                raise ConfigurationError(f"unknown sweep method {m!r} (methods)")
        if any(int(b) < 1 for b in self.bits):
            raise ConfigurationError("bits must be >= 1")
        if any(int(f) < 1 for f in self.frames):
            raise ConfigurationError("frames must be >= 1")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.height, self.width, self.pitch, self.wavelength)

    def optim_config(self, method: str, frames: int) -> OptimConfig:
        opt_method, kind = SWEEP_METHODS[method]
        return OptimConfig(iterations=self.iterations, lr=self.lr, frames=frames, method=opt_method,
                           surrogate=SurrogateSpec(kind), gs_width=self.gs_width, gs_max_slope=self.gs_max_slope,
                           gs_fine_slope=self.gs_fine_slope, patience=None, seed=self.seed)


@dataclass
class Cell:
    method: str
    bits: int
    frames: int
    psnr: float
    ssim: float
    runs: tuple = ()
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and math.isfinite(self.psnr)


@dataclass
class SweepResult:
    bits: tuple
    frames: tuple
    methods: tuple
    cells: dict = field(default_factory=dict)  # (method, bits, frames) -> Cell

    def cell(self, method, bits, frames) -> Cell:
        return self.cells[(method, int(bits), int(frames))]

    def grid(self, method: str) -> np.ndarray:
        """PSNR array indexed ``[bits_index, frames_index]``."""
        return np.array([[self.cell(method, b, f).psnr for f in self.frames] for b in self.bits])

    def reference(self) -> float:
        """Naive PSNR at the highest bit depth and fewest frames (8 bits, 1 frame by default)."""
        if "naive" not in self.methods:
            raise ValueError("reference needs the naive method in the sweep")
        return self.cell("naive", max(self.bits), min(self.frames)).psnr

    def iso_cells(self, method: str, reference: float | None = None) -> list:
        ref = self.reference() if reference is None else reference
        return [(b, f) for b in self.bits for f in self.frames if self.cell(method, b, f).psnr >= ref]

    def frontier(self, method: str, reference: float | None = None) -> dict:
        """Fewest frames reaching the reference at each bit depth (None if never)."""
        ok = set(self.iso_cells(method, reference))
        return {b: next((f for f in sorted(self.frames) if (b, f) in ok), None) for b in self.bits}

    # -- CSV ----------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for m in self.methods:
            for b in self.bits:
                for f in self.frames:
                    c = self.cell(m, b, f)
                    w.writerow([m, b, f, repr(float(c.psnr)), repr(float(c.ssim)), len(c.runs),
                                ";".join(c.runs), c.error])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty sweep CSV")
        methods, bits, frames, cells = [], [], [], {}
        for r in rows:
            m, b, f = r["method"], int(r["bits"]), int(r["frames"])
            for lst, v in ((methods, m), (bits, b), (frames, f)):
                if v not in lst:
                    lst.append(v)
            runs = tuple(r["runs"].split(";")) if r["runs"] else ()
            cells[(m, b, f)] = Cell(m, b, f, float(r["psnr"]), float(r["ssim"]), runs, r["error"])
        return cls(tuple(bits), tuple(frames), tuple(methods), cells)


# ---------------------------------------------------------------------------
# execution


def load_target(name_or_path: str, shape) -> np.ndarray:
    if name_or_path in BUILTIN_TARGETS:
        return builtin_amplitude(name_or_path, shape)
    if not os.path.exists(name_or_path):
        raise FileNotFoundError(name_or_path)
    return load_amplitude(name_or_path, shape=shape)


def run_single(config: SweepConfig, method: str, bits: int, frames: int, target: str):
    """``(psnr, ssim)`` of one exported run."""
    grid = config.grid
    amp = load_target(target, grid.shape)
    tc = TargetContent("amp2d", amplitude=amp, distances=(config.z,))
    model = CalibratedModel.nominal(grid, distances=(config.z,))
    scheme = QuantScheme.uniform(int(bits))
    run = optimize(tc, model, scheme, config.optim_config(method, int(frames)))
    rec, _ = reconstruct(Problem(build_objective("2d", tc), model, scheme), export_phases(run, scheme))
    rec = np.clip(rec[0], 0.0, 1.0)
    return psnr(rec, amp), ssim(rec, amp)


def run_cell(config: SweepConfig, method: str, bits: int, frames: int) -> Cell:
    """Mean metrics over the target set; failures are recorded, not raised."""
    ps, ss, runs = [], [], []
    try:
        for t in config.targets:
            p, s = run_single(config, method, bits, frames, t)
            ps.append(p)
            ss.append(s)
            runs.append(f"{os.path.basename(str(t))}@seed{config.seed}")
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        return Cell(method, int(bits), int(frames), float("nan"), float("nan"), tuple(runs),
                    f"{type(exc).__name__}: {exc}")
    return Cell(method, int(bits), int(frames), float(np.mean(ps)), float(np.mean(ss)), tuple(runs))


def _cell_task(args):
    return run_cell(*args)


def run_sweep(config: SweepConfig, jobs: int = 1, progress=None) -> SweepResult:
    """Run every (method, bits, frames) cell; results do not depend on ``jobs``."""
    tasks = [(config, m, int(b), int(f)) for m in config.methods for b in config.bits for f in config.frames]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_cell_task, tasks))
    else:
        cells = []
        for t in tasks:
            cells.append(_cell_task(t))
            if progress is not None:
                progress(cells[-1])
    result = SweepResult(tuple(int(b) for b in config.bits), tuple(int(f) for f in config.frames),
                         tuple(config.methods))
    for c in cells:
        result.cells[(c.method, c.bits, c.frames)] = c
    return result
