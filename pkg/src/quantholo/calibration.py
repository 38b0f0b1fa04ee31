"""
Fitting the parametric display model to captured pattern/intensity pairs.

A dataset holds P level-index patterns, each captured at every plane. Entries
are (pattern, plane) pairs; patterns are split 8:1:1 into train/val/test and
one plane is held out of all three. Fitting minimizes the mean squared error
between predicted and captured amplitudes, each entry normalized by its
captured peak amplitude.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .citl import PhysicalDisplay
from .field import GridSpec, fft2c, ifft2c
from .io import BUILTIN_TARGETS, builtin_amplitude
from .metrics import PSNR_CAP
from .optimizer import OptimConfig, optimize
from .propagation import HELD_OUT_DISTANCE, CalibratedModel, build_transfer, lut_gradient
from .quantization import ConfigurationError
from .supervision import EPS, TargetContent

GROUPS = ("a_src", "phi_src", "a_f", "phi_f", "lut")
# ablation order: each rung adds one group
LADDER = ((), ("a_src",), ("a_src", "phi_src"), ("a_src", "phi_src", "phi_f"),
          ("a_src", "phi_src", "phi_f", "a_f"), ("a_src", "phi_src", "phi_f", "a_f", "lut"))
SPLITS = ("train", "val", "test", "held_out")
DATASET_FORMAT = 1


@dataclass
class CaptureDataset:
    """Captured intensities ``captures[p, j]`` of level-index ``patterns[p]`` at plane ``j``."""

    grid: GridSpec
    patterns: np.ndarray  # (P, M, N) level indices
    captures: np.ndarray  # (P, J, M, N) float32 intensities
    plane_distances: tuple
    levels: np.ndarray  # nominal phase of each level index
    pattern_split: np.ndarray  # (P,) in {"train", "val", "test"}
    held_out: int  # plane index never used for train/val/test entries
    recipes: tuple = ()

    def __post_init__(self):
        p, j = self.captures.shape[:2]
        if self.patterns.shape[0] != p or j != len(self.plane_distances):
            raise ValueError("patterns, captures and plane distances disagree")
        if not 0 <= self.held_out < j:
            raise ValueError(f"held-out plane index {self.held_out} out of range")

    def __len__(self):
        return self.captures.shape[0] * self.captures.shape[1]

    @property
    def n_levels(self) -> int:
        return int(self.levels.size)

    def entries(self, split: str | None = None) -> list:
        """``(pattern, plane)`` pairs of a split (all pairs when ``split`` is None)."""
        p, j = self.captures.shape[:2]
        if split is None:
            return [(a, b) for a in range(p) for b in range(j)]
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if split == "held_out":
            return [(a, self.held_out) for a in range(p) if self.pattern_split[a] == "test"]
        return [(a, b) for a in range(p) if self.pattern_split[a] == split
                for b in range(j) if b != self.held_out]


def split_patterns(count: int, rng) -> np.ndarray:
    """8:1:1 train/val/test assignment of ``count`` patterns."""
    n_train = max(1, int(round(0.8 * count)))
    n_val = min(int(round(0.1 * count)), count - n_train)
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val))
    return labels[rng.permutation(count)]


def generate_dataset(display: PhysicalDisplay, count: int, seed: int = 0, optimized_fraction: float = 0.5,
                     opt_iterations: int = 40, held_out_distance: float = HELD_OUT_DISTANCE) -> CaptureDataset:
    """Capture ``count`` patterns at every plane of ``display``.

    A ``1 - optimized_fraction`` share are uniformly random level indices; the
    rest are quantized phases optimized (with the nominal model) for a random
    built-in target at a random plane.
    """
    if count < 1:
        raise ConfigurationError("dataset count must be >= 1")
    grid = display.grid
    distances = display.truth_model.distances
    held = int(np.argmin(np.abs(np.asarray(distances) - held_out_distance)))
    rng = np.random.default_rng(seed)
    n_opt = int(round(optimized_fraction * count))
    recipes = ["random"] * (count - n_opt) + ["optimized"] * n_opt
    recipes = [recipes[i] for i in rng.permutation(count)]
    nominal = CalibratedModel.nominal(grid, distances)
    patterns = np.empty((count,) + grid.shape, dtype=np.int64)
    for p, recipe in enumerate(recipes):
        if recipe == "random":
            patterns[p] = rng.integers(0, display.scheme.n_levels, size=grid.shape)
            continue
        name = BUILTIN_TARGETS[rng.integers(len(BUILTIN_TARGETS))]
        z = float(distances[rng.integers(len(distances))])
        target = TargetContent("amp2d", amplitude=builtin_amplitude(name, grid.shape), distances=(z,))
        cfg = OptimConfig(iterations=opt_iterations, method="naive", patience=None,
                          seed=int(rng.integers(2 ** 31)))
        run = optimize(target, nominal.with_params(distances=(z,)), display.scheme, cfg)
        patterns[p] = run.quantized[0]
    captures = np.stack([display.capture(patterns[p][None], distances, index=p) for p in range(count)])
    return CaptureDataset(grid, patterns, captures.astype(np.float32), tuple(distances),
                          np.array(display.scheme.levels, dtype=np.float64),
                          split_patterns(count, rng), held, tuple(recipes))


# ---------------------------------------------------------------------------
# model evaluation and gradients


class _Batch:
    def __init__(self, dataset: CaptureDataset, entries):
        pi = np.array([e[0] for e in entries])
        self.plane = np.array([e[1] for e in entries])
        self.idx = dataset.patterns[pi]
        amp = np.sqrt(dataset.captures[pi, self.plane].astype(np.float64))
        self.peak = np.maximum(amp.reshape(len(entries), -1).max(axis=1), EPS)[:, None, None]
        self.amp = amp


def _kernels(dataset: CaptureDataset) -> np.ndarray:
    return np.stack([build_transfer(dataset.grid, z).h_values for z in dataset.plane_distances])


def _lut_of(model: CalibratedModel, dataset: CaptureDataset) -> np.ndarray:
    lut = model.lut if model.lut is not None else dataset.levels
    if lut.size != dataset.n_levels:
        raise ConfigurationError(f"model lut has {lut.size} entries, dataset uses {dataset.n_levels} levels")
    return lut


def _forward(model, lut, base, batch: _Batch):
    psi = model.phi_src + lut[batch.idx]
    v = model.a_src * np.exp(1j * psi)
    spec = fft2c(v) * base[batch.plane]
    f = model.a_f * np.exp(1j * model.phi_f)
    u = ifft2c(spec * f)
    return psi, v, spec, f, u


def _loss_and_grads(model, lut, base, batch: _Batch, groups):
    psi, v, spec, f, u = _forward(model, lut, base, batch)
    amp = np.abs(u)
    r = (amp - batch.amp) / batch.peak
    n = r.size
    loss = float(np.sum(r * r)) / n
    d_amp = 2.0 * r / (batch.peak * n)
    g_u = d_amp * u / (amp + EPS)
    g_U = fft2c(g_u)
    grads = {}
    if "a_f" in groups or "phi_f" in groups:
        g_f = np.sum(g_U * np.conj(spec), axis=0)
        grads["a_f"] = np.real(np.conj(g_f) * np.exp(1j * model.phi_f))
        grads["phi_f"] = np.imag(g_f * np.conj(f))
    if groups & {"a_src", "phi_src", "lut"}:
        g_v = ifft2c(g_U * np.conj(f) * np.conj(base[batch.plane]))
        d_psi = np.imag(g_v * np.conj(v))
        grads["a_src"] = np.sum(np.real(np.conj(g_v) * np.exp(1j * psi)), axis=0)
        grads["phi_src"] = np.sum(d_psi, axis=0)
        # one-hot encoded lookup: d lut = onehot^T d psi
        grads["lut"] = lut_gradient(batch.idx, d_psi, lut.size)
    return loss, grads


def split_loss(model: CalibratedModel, dataset: CaptureDataset, split: str, chunk: int = 32) -> float:
    """Mean normalized squared amplitude error over a split."""
    entries = dataset.entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    lut = _lut_of(model, dataset)
    base = _kernels(dataset)
    total = 0.0
    for i in range(0, len(entries), chunk):
        b = _Batch(dataset, entries[i:i + chunk])
        u = _forward(model, lut, base, b)[4]
        r = (np.abs(u) - b.amp) / b.peak
        total += float(np.sum(r * r))
    return total / (len(entries) * dataset.grid.height * dataset.grid.width)


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def eval_model(model: CalibratedModel, dataset: CaptureDataset, split: str) -> dict:
    """PSNR between predicted and captured amplitudes on a split.

    ``psnr`` pools the normalized squared error over all entries of the split;
    ``psnr_mean`` averages per-entry PSNRs. Both are capped at 100 dB.
    """
    entries = dataset.entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    lut = _lut_of(model, dataset)
    base = _kernels(dataset)
    per = []
    for i in range(0, len(entries), 32):
        b = _Batch(dataset, entries[i:i + 32])
        u = _forward(model, lut, base, b)[4]
        r = (np.abs(u) - b.amp) / b.peak
        per.extend(np.mean(r * r, axis=(1, 2)).tolist())
    mse = float(np.mean(per))
    return {"split": split, "count": len(entries), "mse": mse, "psnr": _psnr_from_mse(mse),
            "psnr_mean": float(np.mean([_psnr_from_mse(m) for m in per]))}


# ---------------------------------------------------------------------------
# fitting

_B1, _B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def _params(model: CalibratedModel, lut) -> dict:
    return {"a_src": np.array(model.a_src), "phi_src": np.array(model.phi_src), "a_f": np.array(model.a_f),
            "phi_f": np.array(model.phi_f), "lut": np.array(lut)}


def _assemble(init: CalibratedModel, params: dict, groups) -> CalibratedModel:
    kw = {g: params[g] for g in groups}
    return init.with_params(**kw)


def fit_model(dataset: CaptureDataset, init: CalibratedModel, epochs: int = 10, lr: float = 4e-4,
              groups=GROUPS, batch_size: int = 2, seed: int = 0, history: list | None = None) -> CalibratedModel:
    """Adam fit of the enabled parameter ``groups`` on the training split.

    Each epoch visits the training entries in a seeded random order in
    batches of ``batch_size``. Train and validation losses are recorded per
    epoch in ``history`` (if given); the returned model is the checkpoint with
    the lowest training loss, the initial model included, so a fit never ends
    worse than its starting point. Disabled groups are returned untouched.
    """
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ConfigurationError(f"unknown parameter groups {sorted(unknown)}")
    groups = tuple(g for g in GROUPS if g in set(groups))
    if not groups:
        raise ConfigurationError("fit_model needs at least one enabled parameter group")
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    train = dataset.entries("train")
    if not train:
        raise ValueError("training split is empty")
    if init.grid.shape != dataset.grid.shape:
        raise ConfigurationError("model grid does not match the dataset")
    lut0 = _lut_of(init, dataset)
    if epochs == 0:
        return init
    if "lut" in groups and init.lut is None:
        init = init.with_params(lut=lut0)
    base = _kernels(dataset)
    params = _params(init, lut0)
    m = {g: np.zeros_like(params[g]) for g in groups}
    s2 = {g: np.zeros_like(params[g]) for g in groups}
    rng = np.random.default_rng(seed)
    has_val = bool(dataset.entries("val"))
    best_model = init
    best = split_loss(init, dataset, "train")
    if history is not None:
        history.append({"epoch": 0, "train": best, "val": split_loss(init, dataset, "val") if has_val else None})
    step = 0
    gset = set(groups)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch_size):
            batch = _Batch(dataset, [train[k] for k in order[i:i + batch_size]])
            _, grads = _loss_and_grads(_assemble(init, params, groups), params["lut"], base, batch, gset)
            step += 1
            for g in groups:
                m[g] = _B1 * m[g] + (1 - _B1) * grads[g]
                s2[g] = _B2 * s2[g] + (1 - _B2) * grads[g] ** 2
                upd = lr * (m[g] / (1 - _B1 ** step)) / (np.sqrt(s2[g] / (1 - _B2 ** step)) + _ADAM_EPS)
                params[g] = params[g] - upd
                if g.startswith("a_"):
                    np.maximum(params[g], 0.0, out=params[g])
                elif g == "lut":
                    w = np.mod(params[g], 2 * np.pi)
                    params[g] = np.where(w >= 2 * np.pi, 0.0, w)  # mod can round up to 2 pi
        current = _assemble(init, params, groups)
        tl = split_loss(current, dataset, "train")
        if history is not None:
            history.append({"epoch": epoch, "train": tl,
                            "val": split_loss(current, dataset, "val") if has_val else None})
        if tl < best:
            best, best_model = tl, current
    return best_model


def ladder_name(groups) -> str:
    return "identity" if not groups else "+" + " +".join(groups)


def fit_ladder(dataset: CaptureDataset, init: CalibratedModel, ladder=LADDER, epochs: int = 10,
               lr: float = 4e-4, batch_size: int = 2, seed: int = 0) -> list:
    """Ablation ladder: ``(row, model)`` per rung of ``ladder``, where
    ``row`` maps each non-empty split to its PSNR.

    Rungs are fitted in order, each warm-started from the previous rung's
    model, so enabling more groups never increases the training loss.
    """
    rows, model = [], init
    for groups in ladder:
        if groups:
            model = fit_model(dataset, model, epochs, lr, groups, batch_size, seed)
        row = {"groups": "+".join(groups) if groups else "identity"}
        for split in SPLITS:
            if dataset.entries(split):
                row[split] = eval_model(model, dataset, split)["psnr"]
        rows.append((row, model))
    return rows


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: CaptureDataset, directory):
    """Write ``manifest.json`` plus one little-endian raw file per pattern and per entry."""
    os.makedirs(directory, exist_ok=True)
    pats, entries = [], []
    for p in range(dataset.patterns.shape[0]):
        name = f"pattern_{p:05d}.i32"
        dataset.patterns[p].astype("<i4").tofile(os.path.join(directory, name))
        pats.append({"file": name, "split": str(dataset.pattern_split[p]),
                     "recipe": dataset.recipes[p] if dataset.recipes else "unknown"})
        for j in range(dataset.captures.shape[1]):
            cname = f"capture_{p:05d}_{j}.f32"
            dataset.captures[p, j].astype("<f4").tofile(os.path.join(directory, cname))
            entries.append({"pattern": p, "plane": j, "file": cname})
    manifest = {"format_version": DATASET_FORMAT, "grid": dataset.grid.to_dict(),
                "plane_distances": list(dataset.plane_distances), "held_out": dataset.held_out,
                "levels": [float(x) for x in dataset.levels], "patterns": pats, "entries": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(directory) -> CaptureDataset:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        man = json.load(fh)
    if man.get("format_version") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format_version {man.get('format_version')!r}")
    grid = GridSpec.from_dict(man["grid"])
    shape = grid.shape
    pats = np.stack([np.fromfile(os.path.join(directory, e["file"]), dtype="<i4").reshape(shape)
                     for e in man["patterns"]]).astype(np.int64)
    caps = np.zeros((len(pats), len(man["plane_distances"])) + shape, dtype=np.float32)
    for e in man["entries"]:
        caps[e["pattern"], e["plane"]] = np.fromfile(os.path.join(directory, e["file"]), dtype="<f4").reshape(shape)
    return CaptureDataset(grid, pats, caps, tuple(man["plane_distances"]), np.array(man["levels"]),
                          np.array([e["split"] for e in man["patterns"]]), int(man["held_out"]),
                          tuple(e["recipe"] for e in man["patterns"]))
