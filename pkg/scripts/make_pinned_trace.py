#!/usr/bin/env python3
"""Regenerate tests/data/pinned_trace.i3dt (the golden-cycle-count fixture).

The fixture is committed; rerun this only if the trace format or the trainer's
emission order changes intentionally, and update the golden value in
tests/test_acceptance.py to match.
"""

from pathlib import Path

from gridnerf import scene_io, trace, trainer

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "pinned_trace.i3dt"


def main():
    scene = scene_io.generate_toy_scene(scene_io.TOY_PRESETS["sphere"], n_views=2,
                                        image_size=16, seed=0)
    config = trainer.desk_config(
        iterations=2, batch_size=16, samples_per_ray=16,
        density_table=trainer.HashConfig(table_size=2**10, levels=2, resolution=8),
        color_table=trainer.HashConfig(table_size=2**8, levels=2, resolution=8),
    )
    sink = trace.TraceSink(path=OUT)
    trainer.train(scene, config, trace_sink=sink, seed=0)
    sink.close()
    loaded = trace.AccessTrace.load(OUT)
    from gridnerf.accel_sim import simulate

    rep = simulate(loaded)
    print(f"wrote {OUT} ({len(loaded)} records, {OUT.stat().st_size} bytes)")
    print(f"golden total cycles: {rep.total_cycles}")


if __name__ == "__main__":
    main()
