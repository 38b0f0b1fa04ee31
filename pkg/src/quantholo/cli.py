"""
Command-line entry point: ``quantholo {optimize,sweep,citl,calibrate,metrics}``.

Every command reads one JSON config (``--config``), applies ``--seed`` and
``--override KEY=VALUE`` (dotted keys, JSON values), echoes the effective
config into ``--out`` and writes its artifacts there. Exit status is 1 for
configuration errors and 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import io as qio
from .calibration import (GROUPS, LADDER, SPLITS, eval_model, fit_ladder, generate_dataset, load_dataset,
                          save_dataset)
from .citl import CITL_VARIANTS, PhysicalDisplay, canonical_display, run_citl
from .field import GridSpec, InvalidFieldError
from .metrics import psnr, ssim
from .optimizer import AnnealSchedule, OptimConfig, Problem, export_phases, optimize, reconstruct
from .pipeline import NumericalError
from .plotting import heatmap, loss_curve
from .propagation import PITCH, WAVELENGTHS, CalibratedModel, DimensionError
from .quantization import ConfigurationError, QuantScheme, SurrogateSpec
from .scenes import layered_light_field, two_plane_focal_stack
from .supervision import StftSpec, SupervisionError, TargetContent, build_objective, depth_to_masks
from .sweep import SweepConfig, run_sweep

log = logging.getLogger("quantholo")

DEFAULT_LOSS = {"amp2d": "2d", "rgbd": "2.5d", "focal_stack": "3d", "light_field": "4d"}
CONFIG_ERRORS = (ConfigurationError, SupervisionError, DimensionError, InvalidFieldError, FileNotFoundError)


class ConfigError(ConfigurationError):
    """Invalid or unreadable run configuration."""


# ---------------------------------------------------------------------------
# config plumbing


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def apply_override(cfg: dict, item: str) -> dict:
    """Set dotted ``KEY=VALUE`` in ``cfg``; VALUE is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.setdefault(p, {}), dict):
            raise ConfigError(f"override {key!r}: '{p}' is not an object")
        node = node[p]
    node[parts[-1]] = value
    return cfg


def load_config(path, overrides=(), seed=None) -> dict:
    cfg = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _section(cfg: dict, key: str, allowed=None) -> dict:
    val = cfg.get(key, {})
    if val is None:
        val = {}
    if not isinstance(val, dict):
        raise ConfigError(f"field '{key}' must be an object")
    if allowed is not None:
        extra = sorted(set(val) - set(allowed))
        if extra:
            raise ConfigError(f"unknown field '{key}.{extra[0]}'")
    return val


def _typed(section: dict, name: str, key: str, kind, default):
    val = section.get(name, default)
    if val is None:
        return None
    try:
        return kind(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{key}.{name}' has invalid value {val!r}") from exc


def grid_from(cfg: dict) -> GridSpec:
    g = _section(cfg, "grid", ("height", "width", "pitch", "wavelength", "channel"))
    channel = g.get("channel", "g")
    if channel not in WAVELENGTHS:
        raise ConfigError(f"field 'grid.channel' must be one of {sorted(WAVELENGTHS)}")
    try:
        return GridSpec(_typed(g, "height", "grid", int, 64), _typed(g, "width", "grid", int, 64),
                        _typed(g, "pitch", "grid", float, PITCH),
                        _typed(g, "wavelength", "grid", float, WAVELENGTHS[channel]))
    except InvalidFieldError as exc:
        raise ConfigError(f"field 'grid': {exc}") from exc


def scheme_from(cfg: dict) -> QuantScheme:
    s = _section(cfg, "scheme", ("bits", "levels", "wrap"))
    try:
        return QuantScheme.from_dict(s or {"bits": 4})
    except (ConfigurationError, ValueError, TypeError) as exc:
        raise ConfigError(f"field 'scheme': {exc}") from exc


OPTIM_FIELDS = ("iterations", "lr", "frames", "method", "surrogate", "anneal", "gs_width", "gs_max_slope",
                "gs_fine_slope", "scale_mode", "optimizer", "patience", "tolerance")


def optim_from(cfg: dict, defaults: dict | None = None) -> OptimConfig:
    o = dict(defaults or {})
    o.update(_section(cfg, "optim", OPTIM_FIELDS))
    kw = {k: v for k, v in o.items() if k not in ("surrogate", "anneal")}
    try:
        if "surrogate" in o:
            sur = o["surrogate"]
            kw["surrogate"] = SurrogateSpec(sur) if isinstance(sur, str) else SurrogateSpec(**sur)
        if "anneal" in o:
            kw["anneal"] = AnnealSchedule(**o["anneal"])
        return OptimConfig(seed=int(cfg.get("seed", 0)), **kw)
    except TypeError as exc:
        raise ConfigError(f"field 'optim': {exc}") from exc
    except ConfigurationError as exc:
        raise ConfigError(f"field 'optim': {exc}") from exc


def stft_from(cfg: dict) -> StftSpec:
    s = _section(cfg, "stft", ("window_size", "hop", "window"))
    try:
        return StftSpec(**s)
    except (SupervisionError, TypeError) as exc:
        raise ConfigError(f"field 'stft': {exc}") from exc


def _path(section: dict, key: str, name: str = "path") -> str:
    p = section.get(name)
    if not isinstance(p, str):
        raise ConfigError(f"field '{key}.{name}' must be a path string")
    if not os.path.exists(p):
        raise ConfigError(f"field '{key}.{name}': file not found: {p}")
    return p


def target_from(cfg: dict, grid: GridSpec, stft: StftSpec) -> TargetContent:
    t = _section(cfg, "target")
    kind = t.get("kind", "amp2d")
    gamma = float(t.get("gamma", qio.DEFAULT_GAMMA))
    if kind == "amp2d":
        z = float(t.get("z", 0.01))
        if "path" in t:
            amp = qio.load_amplitude(_path(t, "target"), gamma, grid.shape)
        else:
            name = t.get("builtin", "camera")
            if name not in qio.BUILTIN_TARGETS:
                raise ConfigError(f"field 'target.builtin': unknown image {name!r}")
            amp = qio.builtin_amplitude(name, grid.shape, gamma)
        return TargetContent("amp2d", amplitude=amp, distances=(z,))
    if kind == "rgbd":
        amp = qio.load_amplitude(_path(t, "target"), gamma, grid.shape)
        depth = qio.load_depth(_path(t, "target", "depth"), grid.shape)
        dist = tuple(float(z) for z in t.get("distances", (0.009, 0.01, 0.011)))
        lo, hi = min(dist), max(dist)
        dmin, dmax = float(depth.min()), float(depth.max())
        span = dmax - dmin if dmax > dmin else 1.0
        return TargetContent("rgbd", amplitude=amp, depth=lo + (depth - dmin) / span * (hi - lo), distances=dist)
    if kind == "focal_stack":
        if t.get("synthetic"):
            return two_plane_focal_stack(grid.shape, tuple(t.get("distances", (0.009, 0.011))))
        return qio.load_focal_stack(_path(t, "target"), gamma, grid.shape)
    if kind == "light_field":
        if t.get("synthetic"):
            return layered_light_field(grid.shape, stft, float(t.get("z", 0.01)))
        return qio.load_light_field(_path(t, "target"), gamma)
    raise ConfigError(f"field 'target.kind': unknown target kind {kind!r}")


def model_from(cfg: dict, grid: GridSpec, distances) -> CalibratedModel:
    path = cfg.get("model")
    if path is None:
        return CalibratedModel.nominal(grid, distances)
    if not isinstance(path, str) or not os.path.exists(path):
        raise ConfigError(f"field 'model': file not found: {path}")
    model = CalibratedModel.load(path)
    if model.grid.shape != grid.shape:
        raise ConfigError(f"field 'model': grid {model.grid.shape} does not match {grid.shape}")
    return model.with_params(distances=tuple(distances))


def display_from(cfg: dict, grid: GridSpec, scheme: QuantScheme, distances=None) -> PhysicalDisplay:
    d = cfg.get("display", {})
    if isinstance(d, str):
        if not os.path.exists(d):
            raise ConfigError(f"field 'display': file not found: {d}")
        return PhysicalDisplay.load(d)
    if not isinstance(d, dict):
        raise ConfigError("field 'display' must be a path or an object")
    extra = sorted(set(d) - {"seed", "noise"})
    if extra:
        raise ConfigError(f"unknown field 'display.{extra[0]}'")
    return canonical_display(grid, scheme, distances, int(d.get("seed", 0)), float(d.get("noise", 1e-3)))


# ---------------------------------------------------------------------------
# artifact helpers


def _write(path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _loss_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("iteration", "loss"))
    for i, v in enumerate(history):
        w.writerow((i, repr(float(v))))
    return buf.getvalue()


def _finish(out, cfg, metrics: dict, payload: bytes = b"") -> dict:
    """Write config echo and metrics.json (with the content hash)."""
    echo = canonical_json(cfg)
    _write(os.path.join(out, "config.json"), echo)
    body = canonical_json(metrics).encode()
    metrics = dict(metrics)
    metrics["content_hash"] = git_blob_hash(echo.encode() + body + payload)
    _write(os.path.join(out, "metrics.json"), canonical_json(metrics))
    return metrics


def _save_phases(out, indices, prefix="phases") -> bytes:
    data = b""
    for t, frame in enumerate(indices):
        qio.save_index_png(os.path.join(out, f"{prefix}_frame{t}.png"), frame)
        data += np.ascontiguousarray(frame, dtype="<u2").tobytes()
    return data


def view_mosaic(views) -> np.ndarray:
    """(Py, Px, W, W) views tiled into a (W*Py, W*Px) image, view (a, b) at tile (a, b)."""
    py, px, w, _ = views.shape
    return views.transpose(2, 0, 3, 1).reshape(w * py, w * px)


def _quality(target: TargetContent, recon, masks=None) -> dict:
    recon = np.clip(recon, 0.0, 1.0)
    if target.kind == "light_field":
        ref = target.views
        per = [psnr(recon[..., a, b], ref[..., a, b]) for a in range(ref.shape[2]) for b in range(ref.shape[3])]
        return {"psnr": float(np.mean(per)), "ssim": ssim(view_mosaic(recon), view_mosaic(ref)),
                "per_view_psnr": per}
    if target.kind == "focal_stack":
        per = [psnr(recon[j], target.planes[j]) for j in range(len(recon))]
        return {"psnr": float(np.mean(per)), "ssim": ssim(recon, target.planes), "per_plane_psnr": per}
    if target.kind == "rgbd" and masks is not None:
        comp = np.sum(masks.masks * recon, axis=0)
        return {"psnr": psnr(comp, target.amplitude), "ssim": ssim(comp, target.amplitude),
                "per_plane_psnr": [psnr(r, target.amplitude) for r in recon]}
    return {"psnr": psnr(recon[0], target.amplitude), "ssim": ssim(recon[0], target.amplitude)}


def _save_recon(out, target: TargetContent, recon, prefix="recon"):
    if target.kind == "light_field":
        for a in range(recon.shape[2]):
            for b in range(recon.shape[3]):
                qio.save_amplitude_png(os.path.join(out, f"{prefix}_view{a}_{b}.png"), recon[..., a, b])
        qio.save_amplitude_png(os.path.join(out, f"{prefix}_views.png"), view_mosaic(recon))
        return
    for j, r in enumerate(recon):
        qio.save_amplitude_png(os.path.join(out, f"{prefix}_plane{j}.png"), r)


# ---------------------------------------------------------------------------
# commands


def cmd_optimize(cfg: dict, out: str, jobs: int = 1) -> dict:
    grid = grid_from(cfg)
    scheme = scheme_from(cfg)
    stft = stft_from(cfg)
    target = target_from(cfg, grid, stft)
    loss_kind = cfg.get("loss", DEFAULT_LOSS[target.kind])
    optim = optim_from(cfg, {"iterations": 500, "frames": 8, "surrogate": "gumbel_softmax"})
    reg = float(cfg.get("reg_weight", 0.0))
    try:
        objective = build_objective(loss_kind, target, stft_spec=stft, reg_weight=reg)
    except SupervisionError as exc:
        raise ConfigError(f"field 'loss': {exc}") from exc
    model = model_from(cfg, grid, objective.distances)
    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    run = optimize(objective, model, scheme, optim,
                   callback=lambda k, r: log.debug("iter %d loss %.6g", k, r.loss_history[-1]))
    log.info("optimized %d iterations in %.1f s", len(run.loss_history), time.time() - t0)
    recon, s = reconstruct(Problem(objective, model, scheme), export_phases(run, scheme))
    masks = None
    if target.kind == "rgbd":
        masks = depth_to_masks(target.depth, target.distances)
    metrics = {"command": "optimize", "loss_kind": loss_kind, "scale": s,
               "iterations": len(run.loss_history), "stopped_early": run.stopped_early,
               "final_loss": run.loss_history[-1]}
    metrics.update(_quality(target, recon, masks))
    payload = _save_phases(out, run.quantized)
    loss_text = _loss_csv(run.loss_history)
    _write(os.path.join(out, "loss.csv"), loss_text)
    _save_recon(out, target, recon)
    return _finish(out, cfg, metrics, payload + loss_text.encode())


SWEEP_FIELDS = ("bits", "frames", "methods", "targets", "z", "iterations", "lr", "gs_width", "gs_max_slope",
                "gs_fine_slope")


def sweep_from(cfg: dict) -> SweepConfig:
    extra = sorted(set(cfg) - set(SWEEP_FIELDS) - {"grid", "seed"})
    if extra:
        raise ConfigError(f"unknown field '{extra[0]}'")
    grid = grid_from(cfg)
    kw = {k: cfg[k] for k in SWEEP_FIELDS if k in cfg}
    for k in ("bits", "frames", "methods", "targets"):
        if k in kw:
            if not isinstance(kw[k], list):
                raise ConfigError(f"field '{k}' must be a list")
            kw[k] = tuple(kw[k])
    for t in kw.get("targets", ()):
        if t not in qio.BUILTIN_TARGETS and not os.path.exists(t):
            raise ConfigError(f"field 'targets': file not found: {t}")
    try:
        return SweepConfig(height=grid.height, width=grid.width, pitch=grid.pitch, wavelength=grid.wavelength,
                           seed=int(cfg.get("seed", 0)), **kw)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigError(f"sweep config: {exc}") from exc


def cmd_sweep(cfg: dict, out: str, jobs: int = 1) -> dict:
    sc = sweep_from(cfg)
    os.makedirs(out, exist_ok=True)
    result = run_sweep(sc, jobs=jobs, progress=lambda c: log.info(
        "cell %s bits=%d frames=%d psnr=%.2f", c.method, c.bits, c.frames, c.psnr))
    text = result.to_csv()
    _write(os.path.join(out, "sweep.csv"), text)
    metrics = {"command": "sweep", "cells": len(result.cells),
               "failed_cells": sum(not c.ok for c in result.cells.values())}
    if "naive" in result.methods:
        ref = result.reference()
        metrics["reference_psnr"] = ref
        metrics["frontier"] = {m: {str(b): f for b, f in result.frontier(m, ref).items()} for m in result.methods}
        metrics["iso_cells"] = {m: [list(c) for c in result.iso_cells(m, ref)] for m in result.methods}
    for m in result.methods:
        heatmap(result, m, os.path.join(out, f"heatmap_{m}.png"))
    return _finish(out, cfg, metrics, text.encode())


def cmd_citl(cfg: dict, out: str, jobs: int = 1) -> dict:
    grid = grid_from(cfg)
    scheme = scheme_from(cfg)
    t = _section(cfg, "target")
    if t.get("kind", "amp2d") != "amp2d":
        raise ConfigError("field 'target.kind': CITL supports amp2d targets only")
    target = target_from(cfg, grid, StftSpec())
    z = target.distances[0]
    display = display_from(cfg, grid, scheme, (z,))
    if display.grid.shape != grid.shape:
        raise ConfigError("field 'display': grid does not match")
    optim = optim_from(cfg, {"iterations": 500, "frames": 8, "surrogate": "gumbel_softmax"})
    variants = cfg.get("variants", ["naive", "surrogate"])
    if not isinstance(variants, list) or any(v not in CITL_VARIANTS for v in variants):
        raise ConfigError(f"field 'variants' must list names from {sorted(CITL_VARIANTS)}")
    model = model_from(cfg, grid, (z,))
    os.makedirs(out, exist_ok=True)
    display.save(os.path.join(out, "display.json"))
    metrics = {"command": "citl"}
    payload = b""
    histories = {}
    for v in variants:
        res = run_citl(display, model, target.amplitude, optim, v, z)
        metrics[v] = {"psnr": res.psnr, "ssim": ssim(np.clip(res.amplitude, 0, 1), target.amplitude),
                      "final_loss": res.run.loss_history[-1], "iterations": len(res.run.loss_history)}
        payload += _save_phases(out, res.run.quantized, f"phases_{v}")
        text = _loss_csv(res.run.loss_history)
        _write(os.path.join(out, f"loss_{v}.csv"), text)
        payload += text.encode()
        qio.save_amplitude_png(os.path.join(out, f"recon_{v}.png"), res.amplitude)
        histories[v] = res.run.loss_history
    if "naive" in metrics and "surrogate" in metrics:
        metrics["gain_db"] = metrics["surrogate"]["psnr"] - metrics["naive"]["psnr"]
    loss_curve(histories, os.path.join(out, "loss.png"))
    return _finish(out, cfg, metrics, payload)


def cmd_calibrate(cfg: dict, out: str, jobs: int = 1) -> dict:
    grid = grid_from(cfg)
    scheme = scheme_from(cfg)
    display = display_from(cfg, grid, scheme)
    dcfg = _section(cfg, "dataset", ("count", "seed", "opt_iterations", "path", "save"))
    fcfg = _section(cfg, "fit", ("epochs", "lr", "batch_size", "seed"))
    ladder = cfg.get("ladder", [list(r) for r in LADDER])
    if not isinstance(ladder, list) or any(not isinstance(r, list) or set(r) - set(GROUPS) for r in ladder):
        raise ConfigError(f"field 'ladder' must be a list of group lists drawn from {list(GROUPS)}")
    seed = int(cfg.get("seed", 0))
    if "path" in dcfg:
        dataset = load_dataset(_path(dcfg, "dataset"))
    else:
        count = _typed(dcfg, "count", "dataset", int, 200)
        if count < 1:
            raise ConfigError("field 'dataset.count' must be >= 1")
        dataset = generate_dataset(display, count, _typed(dcfg, "seed", "dataset", int, seed),
                                   opt_iterations=_typed(dcfg, "opt_iterations", "dataset", int, 40))
    if dataset.grid.shape != grid.shape:
        raise ConfigError("field 'dataset.path': dataset grid does not match")
    os.makedirs(out, exist_ok=True)
    if dcfg.get("save"):
        save_dataset(dataset, os.path.join(out, "dataset"))
    init = CalibratedModel.nominal(grid, dataset.plane_distances)
    rows = fit_ladder(dataset, init, [tuple(r) for r in ladder], _typed(fcfg, "epochs", "fit", int, 10),
                      _typed(fcfg, "lr", "fit", float, 4e-4), _typed(fcfg, "batch_size", "fit", int, 2),
                      _typed(fcfg, "seed", "fit", int, seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("groups",) + SPLITS)
    for row, _ in rows:
        w.writerow([row["groups"]] + [repr(float(row[s])) if s in row else "" for s in SPLITS])
    text = buf.getvalue()
    _write(os.path.join(out, "ablation.csv"), text)
    fitted = rows[-1][1]
    fitted.save(os.path.join(out, "model.json"))
    nominal = {s: eval_model(init, dataset, s)["psnr"] for s in SPLITS if dataset.entries(s)}
    final = {s: eval_model(fitted, dataset, s)["psnr"] for s in SPLITS if dataset.entries(s)}
    metrics = {"command": "calibrate", "entries": len(dataset), "nominal_psnr": nominal, "fitted_psnr": final,
               "ablation": [row for row, _ in rows]}
    return _finish(out, cfg, metrics, text.encode())


def cmd_metrics(cfg: dict, out: str, jobs: int = 1) -> dict:
    ref_path = cfg.get("reference")
    test_path = cfg.get("test")
    for key, p in (("reference", ref_path), ("test", test_path)):
        if not isinstance(p, str) or not os.path.exists(p):
            raise ConfigError(f"field '{key}': file not found: {p}")
    gamma = float(cfg.get("gamma", qio.DEFAULT_GAMMA))
    a = qio.load_amplitude(ref_path, gamma)
    b = qio.load_amplitude(test_path, gamma)
    if a.shape != b.shape:
        raise ConfigError(f"images differ in shape: {a.shape} vs {b.shape}")
    os.makedirs(out, exist_ok=True)
    return _finish(out, cfg, {"command": "metrics", "psnr": psnr(b, a), "ssim": ssim(b, a)})


COMMANDS = {"optimize": cmd_optimize, "sweep": cmd_sweep, "citl": cmd_citl, "calibrate": cmd_calibrate,
            "metrics": cmd_metrics}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantholo", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a dotted config key; VALUE is parsed as JSON when possible")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.override, args.seed)
        metrics = COMMANDS[args.command](cfg, args.out, args.jobs)
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        msg = str(exc)
        if isinstance(exc, FileNotFoundError) and exc.filename and str(exc.filename) not in msg:
            msg = f"{msg}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    summary = {k: v for k, v in metrics.items() if isinstance(v, (int, float, str)) and k != "command"}
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
