#!/usr/bin/env python3
"""Address-pattern study of a traced training run.

Prints the three access-pattern summaries: intra-pair address deltas (the
x-neighbour locality), inter-group distances (the y/z remoteness), and
distinct-address counts per 1000-access window split by phase.
"""

import argparse

import numpy as np

from gridnerf import scene_io, trace as trace_mod, trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--window", type=int, default=1000)
    args = ap.parse_args()

    scene = scene_io.generate_toy_scene(scene_io.TOY_PRESETS["sphere"], n_views=8,
                                        image_size=64, seed=0)
    config = trainer.desk_config(iterations=args.iterations,
                                 batch_size=args.batch_size)
    sink = trace_mod.TraceSink()
    trainer.train(scene, config, trace_sink=sink, seed=0)
    trace = sink.close()
    print(f"trace: {len(trace)} records\n")

    deltas, frac = trace_mod.intra_group_distances(trace)
    hist, edges = np.histogram(np.clip(deltas, -10, 10), bins=np.arange(-10, 12) - 0.5)
    print("intra-pair signed deltas (clipped to +-10):")
    for lo, count in zip(edges[:-1] + 0.5, hist):
        if count:
            print(f"  {int(lo):+3d}: {count}")
    print(f"fraction |delta| <= 5: {frac:.3f}\n")

    _, mean, median = trace_mod.inter_group_distances(trace)
    print(f"inter-group distance: mean {mean:.0f}, median {median:.0f}\n")

    for phase in ("forward", "backward"):
        series = trace_mod.unique_window_series(trace.filter(phase=phase),
                                                args.window)
        if len(series):
            print(f"{phase}: unique/{args.window} mean {series.mean():.0f} "
                  f"min {series.min()} max {series.max()} over {len(series)} windows")


if __name__ == "__main__":
    main()
