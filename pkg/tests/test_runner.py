import json

import numpy as np
import pytest

import orl.runner as runner
from orl.agent import Td3bcConfig
from orl.datasets import generate_dataset, save_dataset
from orl.errors import NumericError
from orl.metrics import log_to_csv, read_log_csv
from orl.runner import (
    ExperimentConfig,
    curve_csv,
    curve_report,
    eval_base_seed,
    profile_training,
    run_experiment,
    stability_csv,
    suite_arms,
    write_artifacts,
)

TINY_AGENT = Td3bcConfig(hidden_sizes=(8, 8), batch_size=32)


def tiny(**kw):
    base = dict(env_name="lqr1d", tier="medium", size=1000, agent=TINY_AGENT, total_steps=100,
                eval_every=10, episodes_per_eval=2, seeds=(0, 1))
    return ExperimentConfig(**{**base, **kw})


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            tiny(eval_every=30)
        with pytest.raises(ValueError):
            tiny(seeds=(1, 1))
        with pytest.raises(ValueError):
            tiny(seeds=())

    def test_snapshot_carries_seed_and_agent(self):
        snap = tiny().snapshot(3)
        assert snap["seed"] == 3 and snap["agent"]["hidden_sizes"] == [8, 8]
        json.dumps(snap)

    def test_eval_seeds_never_collide(self):
        seen = set()
        for train_seed in range(3):
            for idx in range(20):
                base = eval_base_seed(train_seed, idx, 10)
                block = set(range(base, base + 10))
                assert not block & seen
                seen |= block

    def test_suites(self):
        assert set(suite_arms("ablation")) == {"td3_bc", "no_bc", "no_q", "no_norm"}
        assert [a["alpha"] for a in suite_arms("alpha").values()] == [1.0, 2.0, 2.5, 3.0, 4.0]
        with pytest.raises(ValueError):
            suite_arms("grid")


class TestRun:
    def test_logs_are_reproducible(self):
        texts = []
        for _ in range(2):
            results, report = run_experiment(tiny())
            texts.append([log_to_csv(r.log) for r in results])
        assert texts[0] == texts[1]
        assert texts[0][0] != texts[0][1]
        assert list(report.per_seed) == [0, 1]

    def test_record_grid_and_eval_seeds(self):
        results, _ = run_experiment(tiny(seeds=(2,)))
        recs = results[0].log.records
        assert [r.train_step for r in recs] == list(range(10, 101, 10))
        assert recs[3].episode_seeds == (2_000_006, 2_000_007)
        assert all(r.mean_abs_q is not None for r in recs)

    def test_bc_arm_has_no_q_diagnostics(self):
        exp = tiny(agent=Td3bcConfig(hidden_sizes=(8, 8), batch_size=32, use_q_term=False),
                   seeds=(0,))
        results, _ = run_experiment(exp)
        assert all(r.mean_abs_q is None for r in results[0].log.records)
        assert not results[0].diverged

    def test_failed_seed_is_isolated(self, monkeypatch):
        # Seeds train one after another; call 105 falls in seed 1 (100 steps each).
        real, calls = runner.train_step, []

        def flaky(state, data, cfg, rng):
            calls.append(1)
            if len(calls) == 105:
                raise NumericError("boom", step=state.step_count)
            return real(state, data, cfg, rng)

        monkeypatch.setattr(runner, "train_step", flaky)
        results, report = run_experiment(tiny())
        assert results[0].log is not None and results[1].log is None
        assert list(report.per_seed) == [0] and "boom" in report.failed[1]

    def test_dataset_path_must_match_env(self, tmp_path):
        path = tmp_path / "p.orld"
        save_dataset(generate_dataset("pendulum", "random", 1000, 0), path)
        with pytest.raises(ValueError):
            run_experiment(tiny(dataset_path=str(path)))

    def test_artifacts(self, tmp_path):
        exp = tiny()
        results, report = run_experiment(exp)
        paths = write_artifacts(exp, results, report, tmp_path)
        body = json.loads((tmp_path / "report.json").read_text())
        assert body["per_seed_final"].keys() == {"0", "1"}
        assert set(body["diagnostics"]["0"]) == {"max_mean_abs_q", "value_divergence"}
        assert set(json.loads((tmp_path / "timing.json").read_text())["1"]) == \
            {"train_seconds", "eval_seconds"}
        steps, _, _ = read_log_csv(paths["logs"][0])
        assert steps[-1] == 100
        assert (tmp_path / "seed_1.ckpt").stat().st_size > 0


class TestCurveReport:
    @pytest.fixture
    def logs(self, tmp_path):
        exp = tiny()
        results, report = run_experiment(exp)
        return list(write_artifacts(exp, results, report, tmp_path)["logs"].values())

    def test_order_independent(self, logs):
        a, ta = curve_report(logs)
        b, tb = curve_report(logs[::-1])
        assert curve_csv(a) == curve_csv(b) and stability_csv(ta) == stability_csv(tb)

    def test_mean_and_std(self, logs):
        curve, table = curve_report(logs)
        norms = np.stack([read_log_csv(p)[2] for p in sorted(logs)])
        np.testing.assert_allclose(curve["mean"], norms.mean(axis=0), rtol=1e-14)
        np.testing.assert_allclose(curve["std"], norms.std(axis=0), rtol=1e-14, atol=1e-14)
        assert table[0]["final_performance"] == pytest.approx(norms[0].mean(), rel=1e-12)

    def test_grid_mismatch(self, logs, tmp_path):
        text = open(logs[0]).read().replace("\n10,", "\n15,")
        odd = tmp_path / "odd.csv"
        odd.write_text(text)
        with pytest.raises(ValueError):
            curve_report([logs[1], str(odd)])


class TestProfile:
    def test_contract(self):
        raw = generate_dataset("lqr1d", "expert", 1000, 0)
        out = profile_training(raw, TINY_AGENT, steps=60, block=25)
        assert out["steps_per_arm"] == {"td3_bc": 60, "td3": 60, "bc": 60}
        assert set(out["per_step_seconds"]) == {"td3_bc", "td3", "bc"}
        ps = out["per_step_seconds"]
        assert out["overhead_td3_bc_vs_td3"] == pytest.approx(ps["td3_bc"] / ps["td3"] - 1)
        assert {"platform", "python", "numpy", "cpu_count"} <= set(out["machine"])
        json.dumps(out)
