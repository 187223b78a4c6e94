"""Command-line entry point: train / trace / analyze / simulate / compare.

Runs are described by a sectioned key/value config file (INI syntax) with
three sections: [scene], [train], [sim]. Unknown keys are rejected so typos
fail loudly. Every flag that mirrors a config key overrides it. Exit codes:
0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import accel_sim, trace as trace_mod, trainer
from .errors import SceneLoadError, TraceFormatError, TrainingDiverged, UnsupportedTableSize
from .field_grid import HashConfig
from .scene_io import resolve_scene


class ConfigError(ValueError):
    pass


_SCENE_KEYS = {"source", "views", "image_size", "seed"}
_TRAIN_KEYS = {
    "iterations", "batch_size", "samples_per_ray", "learning_rate",
    "mlp_learning_rate", "density_table_size", "color_table_size",
    "density_update_freq", "color_update_freq", "levels", "resolution",
    "growth_factor", "features", "seed", "allow_inverted",
}
_SIM_KEYS = {
    "row_width", "frm_window", "bum_capacity", "bum_idle_evict", "systolic_dim",
    "tree_width", "pipeline_depth", "clock_hz", "dram_bandwidth", "frm_enabled",
    "bum_enabled", "half_precision", "host_overhead_cycles",
}


@dataclass
class RunConfig:
    scene_source: str
    scene_views: int
    scene_image_size: int
    scene_seed: int
    field: trainer.DecomposedFieldConfig
    sim: accel_sim.SimConfig
    seed: int


def _check_keys(parser: configparser.ConfigParser, section: str, allowed: set):
    if not parser.has_section(section):
        return
    unknown = set(parser[section]) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in [{section}]: {sorted(unknown)}")


def _get(parser, section, key, cast, default):
    if parser.has_section(section) and key in parser[section]:
        raw = parser[section][key]
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def load_run_config(path, overrides: dict | None = None,
                    allow_inverted: bool = False) -> RunConfig:
    overrides = overrides or {}
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
    known_sections = {"scene", "train", "sim"}
    unknown_sections = set(parser.sections()) - known_sections
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    _check_keys(parser, "scene", _SCENE_KEYS)
    _check_keys(parser, "train", _TRAIN_KEYS)
    _check_keys(parser, "sim", _SIM_KEYS)

    source = overrides.get("scene") or _get(parser, "scene", "source", str, None)
    if source is None:
        raise ConfigError("missing required field: scene.source")
    seed = overrides.get("seed")
    if seed is None:
        seed = _get(parser, "train", "seed", int, 0)
    levels = _get(parser, "train", "levels", int, 4)
    resolution = _get(parser, "train", "resolution", int, 16)
    growth = _get(parser, "train", "growth_factor", float, 2.0)
    features = _get(parser, "train", "features", int, 2)
    field_kwargs = dict(
        density_table=HashConfig(
            table_size=_get(parser, "train", "density_table_size", int, 2**14),
            features_per_entry=features, resolution=resolution, levels=levels,
            growth_factor=growth),
        color_table=HashConfig(
            table_size=_get(parser, "train", "color_table_size", int, 2**12),
            features_per_entry=features, resolution=resolution, levels=levels,
            growth_factor=growth),
        density_update_freq=Fraction(_get(parser, "train", "density_update_freq",
                                          str, "1")),
        color_update_freq=Fraction(_get(parser, "train", "color_update_freq",
                                        str, "1")),
        iterations=overrides.get("iterations")
        or _get(parser, "train", "iterations", int, 500),
        batch_size=_get(parser, "train", "batch_size", int, 1024),
        samples_per_ray=_get(parser, "train", "samples_per_ray", int, 64),
    )
    for key, cast in (("learning_rate", float), ("mlp_learning_rate", float)):
        value = _get(parser, "train", key, cast, None)
        if value is not None:
            field_kwargs[key] = value
    field = trainer.DecomposedFieldConfig(**field_kwargs)
    inverted_ok = allow_inverted or _get(parser, "train", "allow_inverted", bool, False)
    try:
        field.validate_decomposition(allow_inverted=inverted_ok)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if inverted_ok:
        if (field.density_table.table_size < field.color_table.table_size
                or field.density_update_freq < field.color_update_freq):
            print("warning: inverted decomposition (density branch smaller or "
                  "slower than color); quality will likely suffer", file=sys.stderr)
    sim = accel_sim.SimConfig(
        row_width=_get(parser, "sim", "row_width", int, 8),
        frm_window=_get(parser, "sim", "frm_window", int, 16),
        bum_capacity=_get(parser, "sim", "bum_capacity", int, 16),
        bum_idle_evict=_get(parser, "sim", "bum_idle_evict", int, 64),
        systolic_dim=_get(parser, "sim", "systolic_dim", int, 16),
        tree_width=_get(parser, "sim", "tree_width", int, 64),
        pipeline_depth=_get(parser, "sim", "pipeline_depth", int, 8),
        clock_hz=_get(parser, "sim", "clock_hz", float, 0.8e9),
        dram_bandwidth=_get(parser, "sim", "dram_bandwidth", float, 59.7e9),
        frm_enabled=_get(parser, "sim", "frm_enabled", bool, True),
        bum_enabled=_get(parser, "sim", "bum_enabled", bool, True),
        half_precision=_get(parser, "sim", "half_precision", bool, False),
        host_overhead_cycles=_get(parser, "sim", "host_overhead_cycles", int, 0),
    )
    return RunConfig(
        scene_source=source,
        scene_views=_get(parser, "scene", "views", int, 8),
        scene_image_size=_get(parser, "scene", "image_size", int, 64),
        scene_seed=_get(parser, "scene", "seed", int, 0),
        field=field, sim=sim, seed=seed)


def _load_scene(cfg: RunConfig):
    return resolve_scene(cfg.scene_source, n_views=cfg.scene_views,
                         image_size=cfg.scene_image_size, seed=cfg.scene_seed)


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, overrides={
        "scene": args.scene, "seed": args.seed, "iterations": args.iterations},
        allow_inverted=args.allow_inverted)
    scene = _load_scene(cfg)
    report, field_model = trainer.train(scene, cfg.field, seed=cfg.seed,
                                        progress=args.progress)
    out = Path(args.out)
    _write(out / "report.csv", report.to_csv())
    _write(out / "summary.txt", report.summary())
    if args.checkpoint:
        trainer.save_checkpoint(out / "checkpoint.i3d", field_model)
    print(report.summary(), end="")
    return 0


def cmd_trace(args) -> int:
    cfg = load_run_config(args.config, overrides={
        "scene": args.scene, "seed": args.seed, "iterations": args.iterations},
        allow_inverted=args.allow_inverted)
    scene = _load_scene(cfg)
    sink = trace_mod.TraceSink(path=args.out)
    report, _ = trainer.train(scene, cfg.field, trace_sink=sink, seed=cfg.seed)
    sink.close()
    print(f"wrote {len(sink)} records to {args.out}")
    if args.report:
        _write(args.report, report.to_csv())
    return 0


def cmd_analyze(args) -> int:
    tr = trace_mod.AccessTrace.load(args.trace)
    if args.report == "intra":
        deltas, frac = trace_mod.intra_group_distances(tr)
        values, counts = np.unique(deltas, return_counts=True)
        lines = ["delta,count"]
        lines += [f"{int(v)},{int(c)}" for v, c in zip(values, counts)]
        text = "\n".join(lines) + "\n"
        print(f"intra-group pairs: {len(deltas)}  fraction |delta|<=5: {frac:.4f}")
    elif args.report == "inter":
        dists, mean, median = trace_mod.inter_group_distances(tr)
        text = (f"statistic,value\ncount,{len(dists)}\nmean,{mean!r}\n"
                f"median,{median!r}\n")
        print(f"inter-group distances: mean {mean:.1f} median {median:.1f}")
    elif args.report == "window":
        fwd = trace_mod.unique_window_series(tr.filter(phase="forward"), args.window)
        bwd = trace_mod.unique_window_series(tr.filter(phase="backward"), args.window)
        lines = ["phase,window_index,unique_count"]
        lines += [f"forward,{i},{int(c)}" for i, c in enumerate(fwd)]
        lines += [f"backward,{i},{int(c)}" for i, c in enumerate(bwd)]
        text = "\n".join(lines) + "\n"
        fm = float(np.mean(fwd)) if len(fwd) else float("nan")
        bm = float(np.mean(bwd)) if len(bwd) else float("nan")
        print(f"mean unique per {args.window}-access window: forward {fm:.1f}, "
              f"backward {bm:.1f}")
    else:
        raise ConfigError(f"unknown report kind {args.report!r}")
    if args.out:
        _write(args.out, text)
    return 0


def cmd_simulate(args) -> int:
    tr = trace_mod.AccessTrace.load(args.trace)
    cfg = load_run_config(args.config) if args.config else None
    sim_cfg = cfg.sim if cfg else accel_sim.SimConfig()
    rep = accel_sim.simulate(tr, sim_cfg)
    _write(args.report, rep.to_csv())
    print(f"total cycles: {rep.total_cycles} "
          f"({rep.seconds_at(sim_cfg.clock_hz) * 1e3:.3f} ms at "
          f"{sim_cfg.clock_hz / 1e9:g} GHz)")
    return 0


def _compare_one(cfg: RunConfig, scene, label: str, sim_iterations: int):
    report, field_model = trainer.train(scene, cfg.field, seed=cfg.seed)
    row = {
        "config": label,
        "final_test_psnr": report.test_psnr[-1][1],
        "density_updates": report.density_updates,
        "color_updates": report.color_updates,
        "color_table_entries": cfg.field.color_table.total_entries,
        "grid_cycles": "",
    }
    if sim_iterations > 0:
        short = trainer.DecomposedFieldConfig(**{
            **cfg.field.__dict__, "iterations": sim_iterations})
        sink = trace_mod.TraceSink()
        trainer.train(scene, short, trace_sink=sink, seed=cfg.seed)
        rep = accel_sim.simulate(sink.close(), cfg.sim)
        row["grid_cycles"] = accel_sim.grid_phase_cycles(rep)
    return row


def cmd_compare(args) -> int:
    cfg_a = load_run_config(args.baseline, overrides={"seed": args.seed})
    cfg_b = load_run_config(args.decomposed, overrides={"seed": args.seed},
                            allow_inverted=args.allow_inverted)
    if (cfg_a.scene_source, cfg_a.scene_views, cfg_a.scene_image_size,
            cfg_a.scene_seed) != (cfg_b.scene_source, cfg_b.scene_views,
                                  cfg_b.scene_image_size, cfg_b.scene_seed):
        raise ConfigError("compare requires both configs to use the same scene")
    scene = _load_scene(cfg_a)
    rows = [_compare_one(cfg_a, scene, "baseline", args.sim_iterations),
            _compare_one(cfg_b, scene, "decomposed", args.sim_iterations)]
    cols = ["config", "final_test_psnr", "density_updates", "color_updates",
            "color_table_entries", "grid_cycles"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in cols))
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridnerf",
                                description="decomposed hash-grid field training, "
                                            "access tracing, and accelerator modeling")
    sub = p.add_subparsers(dest="command", required=True)

    def add_run_args(sp):
        sp.add_argument("--config", default=None, help="INI run config")
        sp.add_argument("--scene", default=None,
                        help="manifest path or toy:<preset>, overrides scene.source")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--iterations", type=int, default=None)
        sp.add_argument("--allow-inverted", action="store_true",
                        help="permit a color branch larger or faster than density")

    sp = sub.add_parser("train", help="run the training loop, write report CSVs")
    add_run_args(sp)
    sp.add_argument("--out", default="out/train")
    sp.add_argument("--checkpoint", action="store_true")
    sp.add_argument("--progress", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("trace", help="train while recording every table access")
    add_run_args(sp)
    sp.add_argument("--out", required=True, help="trace output path (.i3dt)")
    sp.add_argument("--report", default=None, help="optional training CSV path")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("analyze", help="address-pattern reports from a trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--report", required=True, choices=["intra", "inter", "window"])
    sp.add_argument("--window", type=int, default=1000)
    sp.add_argument("--out", default=None, help="CSV output path")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("simulate", help="replay a trace through the accelerator model")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--config", default=None, help="INI config ([sim] section)")
    sp.add_argument("--report", required=True, help="CSV output path")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="baseline vs decomposed side-by-side")
    sp.add_argument("--baseline", required=True, help="baseline run config")
    sp.add_argument("--decomposed", required=True, help="decomposed run config")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--sim-iterations", type=int, default=0,
                    help="also trace+simulate this many iterations per config")
    sp.add_argument("--allow-inverted", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (SceneLoadError, TraceFormatError, TrainingDiverged, UnsupportedTableSize,
            OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
