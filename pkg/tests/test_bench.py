import math

import pytest

from dmsparse.bench import (
    FIELDS,
    BenchRecord,
    ConfigError,
    ExperimentConfig,
    coarse_betas,
    emit_beta_table,
    emit_csv,
    fine_betas,
    load_config,
    parse_config,
    read_csv,
    run_suite,
    summarize,
    tune_beta,
)


def small(**kw):
    base = dict(suite="vary-s", grid=(2, 3), trials=2, budget=5.0, m=20, n=50, max_iters=30, master_seed=7)
    base.update(kw)
    return ExperimentConfig(**base)


def test_parse_config_full_example():
    text = """
    # sparsity sweep
    suite = vary-s
    grid = 50, 100, 150
    trials = 10
    budget = 2      # seconds
    algorithms = DM, am, niht, sp, omp
    seed = 1000
    output = out.csv
    """
    cfg = parse_config(text)
    assert cfg.grid == (50, 100, 150) and cfg.trials == 10 and cfg.budget == 2.0
    assert cfg.algorithms == ("dm", "am", "niht", "sp", "omp")
    assert cfg.master_seed == 1000 and cfg.output_path == "out.csv"
    assert cfg.problem_specs()[0] == (400, 1000, 50, 20.0)


def test_vary_noise_and_size_grids():
    cfg = parse_config("suite = vary-noise\ngrid = 0, 10.5, inf\n")
    assert [spec[3] for spec in cfg.problem_specs()] == [0.0, 10.5, math.inf]
    assert all(spec[2] == 150 for spec in cfg.problem_specs())
    size = parse_config("suite = vary-size\ngrid = 200x500\n")
    assert size.problem_specs() == [(200, 500, 167, 20.0)]
    default = parse_config("suite = vary-size\n")
    assert [spec[:2] for spec in default.problem_specs()] == [(100, 250), (200, 500), (400, 1000)]


@pytest.mark.parametrize("text, message", [
    ("grid = 1\n", "suite"),
    ("suite = vary-s\n", "grid"),
    ("suite = vary-x\ngrid = 1\n", "unknown suite"),
    ("suite = vary-s\ngrid = 1\ncolour = red\n", "unknown key"),
    ("suite = vary-s\ngrid = 1\ntrials = 0\n", "trials"),
    ("suite = vary-s\ngrid = 1\ntrials = ten\n", ":3"),
    ("suite = vary-s\ngrid = 1\nalgorithms = dm, lasso\n", "lasso"),
    ("suite = vary-s\ngrid = 1\nalgorithms =\n", "algorithms"),
    ("suite = vary-s\ngrid = 1001\n", "sparsity"),
    ("suite = vary-size\ngrid = 500x500\n", "m=500"),
    ("suite = vary-size\ngrid = 500\n", "MxN"),
    ("suite = vary-s\ngrid = 1\nbeta = 0\n", "beta"),
    ("suite = vary-s\ngrid = 1\nbudget = -1\n", "budget"),
    ("suite = vary-s\ngrid = 1\ngrid = 2\n", "duplicate"),
    ("suite = vary-s\ngrid 1\n", "key = value"),
    ("suite = tune-beta\ngrid = 50, 100\n", "single"),
    ("suite = image\ngrid = 26\n", "image"),
])
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_beta_grids():
    coarse = coarse_betas()
    assert len(coarse) == 24 and 0 not in coarse
    assert min(coarse) == -1.2 and max(coarse) == 1.2
    fine = fine_betas(-0.2)
    assert len(fine) == 100 and 0 not in fine
    assert fine[0] == -0.7 and fine[-1] == 0.3
    assert len(fine_betas(-0.9)) == 101


def test_run_suite_covers_every_triple_once():
    cfg = small(grid=(2, 3, 4), trials=10, algorithms=("dm", "am", "niht", "sp", "omp"), max_iters=5)
    records = run_suite(cfg)
    assert len(records) == 150
    keys = {(r.algorithm, r.s, r.trial_seed) for r in records}
    assert len(keys) == 150
    assert [r.algorithm for r in records[:30]] == ["dm"] * 30
    assert {r.trial_seed for r in records} == set(range(7, 17))
    for r in records:
        assert math.isfinite(r.rel_mse) and math.isfinite(r.elapsed_s) and r.elapsed_s >= 0


def test_trace_mode_adds_snapshot_records():
    cfg = small(mode="trace", algorithms=("dm",), grid=(2,), trials=1)
    records = run_suite(cfg)
    assert records[-1].terminated_by != "snapshot"
    assert len(records) >= 2
    assert all(r.terminated_by == "snapshot" for r in records[:-1])
    assert len(summarize(records)) == 1 and summarize(records)[0].count == 1


def test_run_suite_is_deterministic_and_worker_independent():
    cfg = small(algorithms=("dm", "omp", "sp"), snr_db=30.0)
    strip = lambda recs: [tuple(getattr(r, f) for f in FIELDS if f != "elapsed_s") for r in recs]  # noqa: E731
    a = run_suite(cfg)
    b = run_suite(cfg)
    c = run_suite(small(algorithms=("dm", "omp", "sp"), snr_db=30.0, workers=3))
    assert strip(a) == strip(b) == strip(c)


def test_run_suite_rejects_tune_beta():
    with pytest.raises(ConfigError):
        run_suite(small(suite="tune-beta", grid=(3,)))


def test_csv_round_trip(tmp_path):
    records = [
        BenchRecord("vary-s", "dm", 40, 100, 5, 20.0, 3, 0.1 + 0.2, 1 / 3, math.pi, "converged"),
        BenchRecord("vary-noise", "omp", 40, 100, 5, math.inf, 4, 1e-300, 0.0, 2.5e-17, "budget"),
    ]
    path = tmp_path / "r.csv"
    emit_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(FIELDS)
    assert "0.30000000000000004" in lines[1]
    assert read_csv(path) == records


def test_empty_csv_is_header_only(tmp_path):
    emit_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(FIELDS) + "\n"
    assert read_csv(tmp_path / "e.csv") == []


def test_csv_errors(tmp_path):
    with pytest.raises(OSError, match="nodir"):
        emit_csv([], tmp_path / "nodir" / "x.csv")
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "bad.csv")


def test_summarize_mean_and_median():
    recs = [BenchRecord("vary-s", "dm", 4, 8, 2, 20.0, k, 0.0, v, 0.0, "budget") for k, v in enumerate([1.0, 2.0, 9.0])]
    (summary,) = summarize(recs)
    assert summary.count == 3 and summary.mean_rel_mse == 4.0 and summary.median_rel_mse == 2.0


def test_tune_beta_scans_both_stages(tmp_path):
    cfg = small(suite="tune-beta", grid=(2,), trials=1, max_iters=20)
    seen = []
    best, table = tune_beta(cfg, progress=lambda b, v: seen.append(b))
    betas = [b for b, _ in table]
    assert betas == seen
    assert betas[:24] == coarse_betas()
    assert 0 not in betas
    coarse_best = min(table[:24], key=lambda row: row[1])[0]
    assert betas[24:] == fine_betas(coarse_best)
    assert best == min(table, key=lambda row: row[1])[0]
    emit_beta_table(table, tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) == len(table) + 1


def test_image_suite_records(tmp_path):
    import numpy as np

    from dmsparse.imaging import GrayImage, write_dictionary, write_pgm
    from dmsparse.probgen import ProblemSpec, gen_dictionary

    write_pgm(GrayImage(np.random.default_rng(0).integers(0, 256, (8, 12)) / 255.0), tmp_path / "i.pgm")
    write_dictionary(gen_dictionary(ProblemSpec(16, 40, 3, seed=1)), tmp_path / "d.mat")
    cfg = parse_config(f"suite = image\ngrid = 3\ntrials = 1\nbudget = 0.01\nalgorithms = dm, omp\n"
                       f"image = {tmp_path / 'i.pgm'}\ndictionary = {tmp_path / 'd.mat'}\n")
    records = run_suite(cfg)
    assert [r.algorithm for r in records] == ["dm", "omp"]
    for r in records:
        assert (r.m, r.n, r.s) == (16, 40, 3) and r.terminated_by == "image"
        # the achieved SNR is reported in the target column
        assert np.isclose(r.snr_db_target, -10 * math.log10(r.rel_mse))
