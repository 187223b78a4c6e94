import numpy as np
import pytest

from gridnerf import cli, trace as trace_mod
from gridnerf.accel_sim import simulate


BASE_INI = """
[scene]
source = toy:sphere
views = 2
image_size = 16

[train]
iterations = 4
batch_size = 32
samples_per_ray = 8
density_table_size = 1024
color_table_size = 1024
levels = 2
resolution = 8
"""

DECOMP_INI = BASE_INI.replace("color_table_size = 1024",
                              "color_table_size = 256") + "color_update_freq = 1/2\n"


@pytest.fixture()
def base_cfg(tmp_path):
    p = tmp_path / "base.ini"
    p.write_text(BASE_INI)
    return p


@pytest.fixture()
def decomp_cfg(tmp_path):
    p = tmp_path / "decomp.ini"
    p.write_text(DECOMP_INI)
    return p


def test_missing_scene_source_exit_2(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text("[train]\niterations = 1\n")
    rc = cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "scene.source" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text("[scene]\nsource = toy:sphere\ntypo_key = 3\n")
    rc = cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "typo_key" in capsys.readouterr().err


def test_inverted_decomposition_rejected(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text(BASE_INI.replace("density_table_size = 1024",
                                  "density_table_size = 128"))
    rc = cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")])
    assert rc == 2
    out = tmp_path / "o2"
    rc = cli.main(["train", "--config", str(p), "--out", str(out),
                   "--allow-inverted"])
    assert rc == 0


def test_train_writes_reports_and_is_deterministic(base_cfg, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["train", "--config", str(base_cfg), "--seed", "7",
                     "--out", str(out1)]) == 0
    assert cli.main(["train", "--config", str(base_cfg), "--seed", "7",
                     "--out", str(out2)]) == 0
    csv1 = (out1 / "report.csv").read_bytes()
    csv2 = (out2 / "report.csv").read_bytes()
    assert csv1 == csv2
    assert csv1.splitlines()[0] == b"iteration,loss,psnr"


def test_trace_then_analyze_and_simulate(base_cfg, tmp_path):
    trace_path = tmp_path / "run.i3dt"
    assert cli.main(["trace", "--config", str(base_cfg), "--seed", "1",
                     "--out", str(trace_path)]) == 0
    assert trace_path.exists()

    intra_csv = tmp_path / "intra.csv"
    assert cli.main(["analyze", "--trace", str(trace_path), "--report", "intra",
                     "--out", str(intra_csv)]) == 0
    assert intra_csv.read_text().splitlines()[0] == "delta,count"

    inter_csv = tmp_path / "inter.csv"
    assert cli.main(["analyze", "--trace", str(trace_path), "--report", "inter",
                     "--out", str(inter_csv)]) == 0
    assert inter_csv.read_text().startswith("statistic,value")

    window_csv = tmp_path / "window.csv"
    assert cli.main(["analyze", "--trace", str(trace_path), "--report", "window",
                     "--window", "64", "--out", str(window_csv)]) == 0
    assert window_csv.read_text().splitlines()[0] == "phase,window_index,unique_count"

    sim_csv = tmp_path / "sim.csv"
    assert cli.main(["simulate", "--trace", str(trace_path),
                     "--report", str(sim_csv)]) == 0
    body = sim_csv.read_text()
    assert body.splitlines()[0] == \
        "phase,unit,cycles,reads,writes_naive,writes_merged,bank_util"
    assert body.splitlines()[-1].startswith("total,total,")


def test_analyze_window_all_identical_fixture(tmp_path):
    sink = trace_mod.TraceSink(path=tmp_path / "t.i3dt")
    sink.set_context(iteration=0, phase="backward", branch="density")
    sink.record_update_writes(0, np.full(3000, 42, dtype=np.uint32),
                              np.zeros(3000, dtype=np.uint32),
                              np.zeros(3000, dtype=np.uint32))
    sink.close()
    out = tmp_path / "w.csv"
    assert cli.main(["analyze", "--trace", str(tmp_path / "t.i3dt"),
                     "--report", "window", "--out", str(out)]) == 0
    rows = out.read_text().strip().splitlines()[1:]
    assert [r.split(",")[2] for r in rows] == ["1", "1", "1"]


def test_truncated_trace_exit_1(tmp_path, capsys):
    sink = trace_mod.TraceSink(path=tmp_path / "t.i3dt")
    sink.set_context(iteration=0, phase="forward", branch="density")
    sink.record_interp_reads(np.arange(8, dtype=np.uint32).reshape(1, 1, 8))
    sink.close()
    raw = (tmp_path / "t.i3dt").read_bytes()
    (tmp_path / "t.i3dt").write_bytes(raw[:-5])
    rc = cli.main(["analyze", "--trace", str(tmp_path / "t.i3dt"),
                   "--report", "window"])
    assert rc == 1
    assert "offset" in capsys.readouterr().err


def test_trace_deterministic_bytes(base_cfg, tmp_path):
    p1, p2 = tmp_path / "a.i3dt", tmp_path / "b.i3dt"
    cli.main(["trace", "--config", str(base_cfg), "--seed", "3", "--out", str(p1)])
    cli.main(["trace", "--config", str(base_cfg), "--seed", "3", "--out", str(p2)])
    assert p1.read_bytes() == p2.read_bytes()


def test_compare_identical_configs_identical_rows(base_cfg, tmp_path):
    out = tmp_path / "cmp.csv"
    rc = cli.main(["compare", "--baseline", str(base_cfg),
                   "--decomposed", str(base_cfg), "--seed", "2",
                   "--out", str(out)])
    assert rc == 0
    rows = out.read_text().strip().splitlines()
    a = rows[1].split(",")[1:]
    b = rows[2].split(",")[1:]
    assert a == b


def test_compare_halves_color_updates(base_cfg, decomp_cfg, tmp_path):
    out = tmp_path / "cmp.csv"
    rc = cli.main(["compare", "--baseline", str(base_cfg),
                   "--decomposed", str(decomp_cfg), "--seed", "2",
                   "--out", str(out)])
    assert rc == 0
    rows = [r.split(",") for r in out.read_text().strip().splitlines()]
    header = rows[0]
    iu = header.index("color_updates")
    ie = header.index("color_table_entries")
    assert int(rows[2][iu]) * 2 == int(rows[1][iu])
    assert int(rows[2][ie]) * 4 == int(rows[1][ie])


def test_compare_rejects_mismatched_scene(base_cfg, tmp_path, capsys):
    other = tmp_path / "other.ini"
    other.write_text(BASE_INI.replace("views = 2", "views = 3"))
    rc = cli.main(["compare", "--baseline", str(base_cfg),
                   "--decomposed", str(other)])
    assert rc == 2
    assert "same scene" in capsys.readouterr().err


def test_compare_with_simulation_lowers_decomposed_cycles(base_cfg, decomp_cfg,
                                                          tmp_path):
    out = tmp_path / "cmp.csv"
    rc = cli.main(["compare", "--baseline", str(base_cfg),
                   "--decomposed", str(decomp_cfg), "--seed", "0",
                   "--sim-iterations", "2", "--out", str(out)])
    assert rc == 0
    rows = [r.split(",") for r in out.read_text().strip().splitlines()]
    ic = rows[0].index("grid_cycles")
    base_cycles, decomp_cycles = int(rows[1][ic]), int(rows[2][ic])
    assert decomp_cycles < base_cycles
