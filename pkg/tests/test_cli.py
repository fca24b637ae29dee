import csv

import pytest

from taskcodec.cli import main
from taskcodec.harness import CSV_COLUMNS


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    world = root / "world.cfg"
    world.write_text(
        "cameras = 2\nagents = 2\nframes = 90\ngrid = 4\nheight = 16\n"
        "width = 16\nseed = 3\n")
    train = root / "train.cfg"
    train.write_text(
        "beta = 0.02\nr_bit = 50\ntau1 = 1\ntau2 = 1\nbatch_size = 4\n"
        "steps_phase1 = 25\nsteps_phase2 = 25\nlr = 0.003\nseed = 3\n")
    main(["gen-data", "--spec", str(world), "--out", str(root / "data")])
    main(["train", "--phase", "all", "--config", str(train),
          "--data", str(root / "data"), "--out", str(root / "run.tocp"),
          "--log", str(root / "train_log.csv")])
    return root


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestCli:
    def test_gen_data_writes_dataset(self, workspace):
        assert (workspace / "data" / "data.tocd").exists()

    def test_train_writes_checkpoint_and_log(self, workspace):
        assert (workspace / "run.tocp").read_bytes()[:4] == b"TOCP"
        header = _rows(workspace / "train_log.csv")[0]
        assert header == ["step", "phase", "loss_total", "distortion_nats",
                          "rate_bits", "lr", "seed"]

    def test_evaluate_produces_csv_and_reports(self, workspace):
        main(["evaluate", "--ckpt", str(workspace / "run.tocp"),
              "--data", str(workspace / "data"),
              "--csv", str(workspace / "eval.csv"),
              "--dump-bitmaps", str(workspace / "dumps"),
              "--figures", str(workspace / "figs")])
        rows = _rows(workspace / "eval.csv")
        assert rows[0] == CSV_COLUMNS
        assert len(rows) == 2
        assert any(p.suffix == ".pgm" for p in (workspace / "dumps").iterdir())
        assert any(p.suffix == ".png" for p in (workspace / "figs").iterdir())

    def test_forced_hierarchical_mode_costs_more_bits(self, workspace):
        main(["evaluate", "--ckpt", str(workspace / "run.tocp"),
              "--data", str(workspace / "data"),
              "--csv", str(workspace / "eval_hier.csv"), "--mode", "hierarchical"])
        auto = float(_rows(workspace / "eval.csv")[1][6])
        hier = float(_rows(workspace / "eval_hier.csv")[1][6])
        assert hier >= auto

    def test_baseline_csv(self, workspace):
        main(["baseline", "--data", str(workspace / "data"), "--q", "4",
              "--ckpt", str(workspace / "run.tocp"),
              "--csv", str(workspace / "baseline.csv")])
        rows = _rows(workspace / "baseline.csv")
        assert rows[0] == CSV_COLUMNS
        assert rows[1][0] == "baseline_q4"
        assert float(rows[1][6]) > 0

    def test_sweep_writes_records_and_figures(self, workspace):
        grid = workspace / "grid.cfg"
        grid.write_text(
            "tau1 = 1\ntau2 = 0,1\nbeta = 0.02\nr_bit = 50\nseeds = 3\n"
            "frames = 90\nheight = 16\nwidth = 16\ngrid = 4\nbatch_size = 4\n"
            "steps_phase1 = 25\nsteps_phase2 = 25\nlr = 0.003\n")
        main(["sweep", "--grid", str(grid), "--csv", str(workspace / "sweep.csv"),
              "--workdir", str(workspace / "work"),
              "--figures", str(workspace / "sweep_figs")])
        rows = _rows(workspace / "sweep.csv")
        assert rows[0] == CSV_COLUMNS
        assert len(rows) == 3                      # two grid points, one seed
        assert (workspace / "sweep_figs" / "rate_moda.png").exists()
        assert (workspace / "sweep_figs" / "bits_by_tau2.png").exists()

    def test_sweep_missing_checkpoint_error_names_grid_point(self, workspace, tmp_path):
        grid = workspace / "grid2.cfg"
        grid.write_text(
            "tau1 = 1\ntau2 = 1\nbeta = 0.05\nr_bit = 50\nseeds = 9\n"
            "frames = 90\nheight = 16\nwidth = 16\ngrid = 4\n"
            "train_missing = false\n")
        with pytest.raises(FileNotFoundError, match="t11_t21_b0.05_r50 seed 9"):
            main(["sweep", "--grid", str(grid), "--csv", str(tmp_path / "s.csv"),
                  "--workdir", str(tmp_path / "w")])
