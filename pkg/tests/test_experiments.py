import json

import numpy as np
import pytest

from scaledtucker import experiments as ex
from scaledtucker.errors import IllConditionedIterate, ParameterError
from scaledtucker.experiments import (
    ExperimentConfig,
    RunRecord,
    ms_per_iteration,
    noise_summary,
    run_convergence,
    run_experiment,
    run_kappa_sweep,
    run_phase_transition,
    run_trial,
)
from scaledtucker.solver import use_wall_clock


@pytest.fixture
def frozen_clock():
    use_wall_clock(False)
    yield
    use_wall_clock(True)


def test_config_validation():
    with pytest.raises(ParameterError):
        ExperimentConfig("nonsense")
    with pytest.raises(ParameterError):
        ExperimentConfig("kappa_sweep", seeds=())
    with pytest.raises(ParameterError):
        ExperimentConfig("kappa_sweep", kappa_list=(0.5,))
    with pytest.raises(ParameterError):
        ExperimentConfig("kappa_sweep", algorithms=("adam",))
    with pytest.raises(ParameterError):
        ExperimentConfig("kappa_sweep", init="warm")
    with pytest.raises(ParameterError):
        ExperimentConfig.from_json({"kind": "kappa_sweep", "bogus": 1})


def test_config_json_and_hash():
    cfg = ExperimentConfig("convergence", n=20, snr_db=(40, 60), seeds=[0, 1])
    back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg
    assert back.config_hash == cfg.config_hash and len(cfg.config_hash) == 16
    assert ExperimentConfig("convergence", n=21).config_hash != ExperimentConfig("convergence", n=20).config_hash
    # run-time knobs do not change the hash
    assert ExperimentConfig("convergence", threads=3).config_hash == ExperimentConfig("convergence").config_hash


def test_censored_median():
    assert ex._censored_median([3, 5, 7], 10) == (5.0, False)
    assert ex._censored_median([3, -1, -1], 10) == (11.0, True)


def test_ms_per_iteration_excludes_warmup():
    rec = RunRecord("h", "scaledgd", 1.0, 0, 0.1, iterations=[(0, 1.0, 50.0), (1, 0.5, 60.0), (4, 0.1, 90.0)])
    assert ms_per_iteration(rec) == pytest.approx(10.0)
    assert np.isnan(ms_per_iteration(RunRecord("h", "gd", 1.0, 0, 0.1, iterations=[(0, 1.0, 5.0)])))


def test_failures_become_records(monkeypatch):
    def boom(*a, **k):
        raise IllConditionedIterate(2, "test")

    monkeypatch.setattr(ex, "solve_completion", boom)
    cfg = ExperimentConfig("kappa_sweep", n=10, r=2, p=0.5, kappa_list=(1.0,), seeds=(0, 1), algorithms=("scaledgd",))
    table, records = run_kappa_sweep(cfg)
    assert len(records) == 2 and not any(r.success for r in records)
    assert all(r.stop_reason.startswith("error") for r in records)
    assert table[0]["censored"] and table[0]["successes"] == 0


def test_small_kappa_sweep(frozen_clock):
    cfg = ExperimentConfig("kappa_sweep", n=40, r=3, p=0.3, seeds=(0, 1, 2), max_iters=150)
    table, records = run_kappa_sweep(cfg)
    assert len(records) == 2 * 4 * 3
    sgd = {row["kappa"]: row["median_iters"] for row in table if row["algorithm"] == "scaledgd"}
    gd = {row["kappa"]: row for row in table if row["algorithm"] == "gd"}
    assert max(sgd.values()) - min(sgd.values()) <= 3
    assert gd[1.0]["median_iters"] <= 2 * sgd[1.0]
    assert gd[10.0]["median_iters"] >= 5 * gd[1.0]["median_iters"]


def test_phase_transition_extremes():
    cfg = ExperimentConfig("phase_transition", n=50, r=5, p_list=(0.005, 1.0), seeds=range(5), max_iters=100,
                           algorithms=("scaledgd",))
    table, _ = run_phase_transition(cfg)
    rates = {row["p"]: row["success_rate"] for row in table}
    assert rates[1.0] == 1.0
    assert rates[0.005] <= 0.1
    assert table[1]["scaled_sample_size"] == pytest.approx(50 ** 1.5 / 5)


def test_noise_levels_order_plateaus(frozen_clock):
    cfg = ExperimentConfig("convergence", n=40, r=3, p=0.3, snr_db=(40, 60, 80), seeds=(0,), max_iters=60,
                           algorithms=("scaledgd",))
    records = run_convergence(cfg)
    assert all(len(r.iterations) == 61 for r in records)
    rows = {row["snr_db"]: row for row in noise_summary(records)}
    p40, p60, p80 = (rows[s]["plateau"] for s in (40.0, 60.0, 80.0))
    assert p40 > p60 > p80
    assert 5 <= p40 / p60 <= 20 and 5 <= p60 / p80 <= 20
    commons = [rows[s]["iters_to_common"] for s in (40.0, 60.0, 80.0)]
    assert max(commons) - min(commons) <= 5


def test_random_init_convergence_curves(frozen_clock):
    cfg = ExperimentConfig("convergence", n=40, r=3, p=0.3, kappa_list=(10.0,), seeds=(0, 1), init="random",
                           max_iters=100, algorithms=("scaledgd",))
    table, records = run_experiment(cfg)
    assert all(r.success for r in records)
    assert table[0]["median_iters"] <= 100


def test_scaledgd_overhead_per_iteration():
    cfg = ExperimentConfig("convergence", n=100, r=5, p=0.1, seeds=(0,), max_iters=15)
    times = {"scaledgd": [], "gd": []}
    for _ in range(3):
        for alg in times:
            times[alg].append(ms_per_iteration(run_trial(cfg, alg, 0, kappa=10.0, rel_tol=0.0)))
    assert np.median(times["scaledgd"]) <= 1.5 * np.median(times["gd"])


def test_outputs_are_reproducible(tmp_path, frozen_clock):
    base = dict(kind="kappa_sweep", n=20, r=2, p=0.4, kappa_list=(1.0, 5.0), seeds=(0, 1), max_iters=40,
                algorithms=("scaledgd",))
    a = ExperimentConfig(**base, output_path=str(tmp_path / "a"))
    b = ExperimentConfig(**base, output_path=str(tmp_path / "b.csv"), threads=2)
    run_experiment(a)
    run_experiment(b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ja, jb = (json.loads((tmp_path / f).read_text()) for f in ("a.json", "b.json"))
    assert ja == jb
    assert ja["config_hash"] == a.config_hash and ja["version"]
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "kappa,algorithm,median_iters,censored,successes,runs"


def test_convergence_csv_columns(tmp_path, frozen_clock):
    cfg = ExperimentConfig("convergence", n=15, r=2, p=0.5, kappa_list=(2.0,), seeds=(3,), max_iters=5,
                           rel_tol=0.0, algorithms=("gd",), output_path=str(tmp_path / "c"))
    run_experiment(cfg)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "algorithm,kappa,snr_db,p,seed,iter,rel_err,wall_ms"
    assert len(lines) > 1 and lines[1].startswith("gd,2.0,,0.5,3,0,")


def test_kind_mismatch():
    with pytest.raises(ParameterError):
        run_kappa_sweep(ExperimentConfig("convergence"))
    with pytest.raises(ParameterError):
        run_phase_transition(ExperimentConfig("kappa_sweep"))
    with pytest.raises(ParameterError):
        run_convergence(ExperimentConfig("phase_transition"))


def test_trial_uses_requested_truth():
    cfg = ExperimentConfig("kappa_sweep", n=15, r=2, p=0.5, max_iters=3)
    rec = run_trial(cfg, "scaledgd", 0, kappa=2.0)
    assert rec.kappa == 2.0 and rec.iterations[0][0] == 0
    rec2 = run_trial(cfg, "scaledgd", 0)
    assert rec2.kappa is None
