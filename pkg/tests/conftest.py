import numpy as np
import pytest

from gridnerf import scene_io, trace as trace_mod, trainer


def clustered_write_stream(n_blocks=5, uniques_per_block=200, repeats=5, spread=85,
                           seed=0, table_size=2**14):
    """Synthetic backward-style stream: per 1000-access block, 200 distinct
    addresses each repeated 5 times, repeats jittered within a bounded span so
    same-address updates cluster in time (the measured backward pattern).
    spread=85 is calibrated so the 16-entry merge buffer visibly degrades the
    ideal 0.2 merge ratio (measured ~0.30-0.32) while staying under 0.35."""
    rng = np.random.default_rng(seed)
    out = []
    for b in range(n_blocks):
        addrs = rng.choice(table_size, size=uniques_per_block, replace=False)
        base = rng.permutation(uniques_per_block) * repeats
        pos = (np.repeat(base, repeats)
               + rng.uniform(0, spread, uniques_per_block * repeats))
        block = np.repeat(addrs, repeats)[np.argsort(pos, kind="stable")]
        out.append(block)
    return np.concatenate(out)


@pytest.fixture(scope="session")
def toy_sphere_scene():
    return scene_io.generate_toy_scene(scene_io.TOY_PRESETS["sphere"], n_views=8,
                                       image_size=64, seed=0)


@pytest.fixture(scope="session")
def reference_trace(toy_sphere_scene):
    """Traced training run (~10^6 records) used by the trace-shape and
    simulator checks."""
    config = trainer.desk_config(iterations=5, batch_size=128)
    sink = trace_mod.TraceSink()
    trainer.train(toy_sphere_scene, config, trace_sink=sink, seed=0)
    return sink.close()
