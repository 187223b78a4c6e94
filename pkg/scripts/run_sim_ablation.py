#!/usr/bin/env python3
"""Accelerator-model ablation on a freshly traced training run.

Replays one trace through the model with the read mapper and the update
merger toggled, printing grid-phase cycles for each combination (the
software analogue of the unit-ablation runtime study).
"""

import argparse

from gridnerf import accel_sim as sim
from gridnerf import scene_io, trace as trace_mod, trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=5)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    scene = scene_io.generate_toy_scene(scene_io.TOY_PRESETS["sphere"], n_views=8,
                                        image_size=64, seed=0)
    config = trainer.desk_config(iterations=args.iterations,
                                 batch_size=args.batch_size)
    sink = trace_mod.TraceSink()
    trainer.train(scene, config, trace_sink=sink, seed=args.seed)
    trace = sink.close()
    print(f"trace: {len(trace)} records over {args.iterations} iterations\n")

    combos = [("neither", False, False), ("mapper only", True, False),
              ("merger only", False, True), ("mapper + merger", True, True)]
    base = None
    print(f"{'units':<16}{'grid cycles':>12}{'total cycles':>14}{'reduction':>11}")
    for label, frm_on, bum_on in combos:
        rep = sim.simulate(trace, sim.SimConfig(frm_enabled=frm_on,
                                                bum_enabled=bum_on))
        grid = sim.grid_phase_cycles(rep)
        if base is None:
            base = grid
        print(f"{label:<16}{grid:>12}{rep.total_cycles:>14}"
              f"{1 - grid / base:>10.1%}")


if __name__ == "__main__":
    main()
