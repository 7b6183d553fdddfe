"""Fixture logs whose statistics are worked out by hand in the comments."""

import numpy as np
import pytest

from orl.envs import get_spec
from orl.errors import DegenerateMeanError
from orl.metrics import (
    EvaluationRecord,
    RunLog,
    aggregate_over_seeds,
    evaluate_policy,
    final_performance,
    log_to_csv,
    normalized_score,
    percent_difference,
    read_log_csv,
    worst_episode_deviation,
    worst_evaluation_deviation,
)

TOL = 1e-12


def fixture_log(seed=0, shift=0.0, n=12):
    """random_ref -100, expert_ref 0, so normalized score = return + 100.

    Record k (k = 0..n-1) has episodes (-52 + k + shift, -50 + k + shift),
    mean -51 + k + shift.
    """
    records = [EvaluationRecord(100 * (k + 1), (-52.0 + k + shift, -50.0 + k + shift))
               for k in range(n)]
    return RunLog({"seed": seed, "alpha": 2.5}, records, -100.0, 0.0)


class TestScores:
    def test_normalized_score(self):
        assert normalized_score(-100.0, -100.0, 0.0) == 0.0
        assert normalized_score(0.0, -100.0, 0.0) == 100.0
        assert normalized_score(-25.0, -200.0, -50.0) == pytest.approx(100 * 175 / 150, abs=TOL)
        with pytest.raises(ValueError):
            normalized_score(0.0, 1.0, 1.0)

    def test_percent_difference(self):
        assert percent_difference(90.0, 100.0) == pytest.approx(-10.0, abs=TOL)
        assert percent_difference(-110.0, -100.0) == pytest.approx(-10.0, abs=TOL)
        assert percent_difference(-90.0, -100.0) == pytest.approx(10.0, abs=TOL)
        with pytest.raises(DegenerateMeanError):
            percent_difference(1.0, 1e-13)


class TestFixtureLog:
    def test_final_performance(self):
        # Last 10 records are k = 2..11; episode mean = mean(-51+k) = -51 + 6.5 = -44.5.
        assert final_performance(fixture_log()) == pytest.approx(55.5, abs=TOL)

    def test_worst_episode_deviation(self):
        # Last record k = 11: episodes (-41, -39), mean -40; 100 * (-41 + 40) / 40 = -2.5.
        assert worst_episode_deviation(fixture_log().records[-1]) == pytest.approx(-2.5, abs=TOL)

    def test_worst_evaluation_deviation(self):
        # Evaluation means -49..-40, average -44.5, worst -49: 100 * -4.5 / 44.5 = -900/89.
        assert worst_evaluation_deviation(fixture_log()) == pytest.approx(-900 / 89, abs=TOL)

    def test_window_must_fit(self):
        with pytest.raises(ValueError):
            final_performance(fixture_log(n=9))
        with pytest.raises(ValueError):
            worst_evaluation_deviation(fixture_log(n=4), window=5)

    def test_records_must_advance(self):
        rec = EvaluationRecord(10, (1.0,))
        with pytest.raises(ValueError):
            RunLog({}, [rec, rec], -1.0, 0.0)
        with pytest.raises(ValueError):
            EvaluationRecord(10, (np.nan,))


class TestAggregate:
    def test_two_seeds(self):
        # Finals 55.5 and 65.5: mean 60.5, population std 5.
        report = aggregate_over_seeds([fixture_log(1, shift=10.0), fixture_log(0)])
        assert list(report.per_seed) == [0, 1]
        assert report.per_seed[1] == pytest.approx(65.5, abs=TOL)
        assert report.mean == pytest.approx(60.5, abs=TOL)
        assert report.std == pytest.approx(5.0, abs=TOL)
        assert report.stability[0]["worst_episode_deviation"] == pytest.approx(-2.5, abs=TOL)
        # Shifted log: last episodes (-31, -29), mean -30, so -100/30.
        assert report.stability[1]["worst_episode_deviation"] == pytest.approx(-10 / 3, abs=TOL)

    def test_three_seeds_std(self):
        logs = [fixture_log(s, shift=d) for s, d in [(0, 0.0), (1, 3.0), (2, 9.0)]]
        report = aggregate_over_seeds(logs)
        finals = np.array([55.5, 58.5, 64.5])
        assert report.mean == pytest.approx(finals.mean(), abs=TOL)
        assert report.std == pytest.approx(np.sqrt(np.mean((finals - 59.5) ** 2)), abs=TOL)

    def test_rejects_mixed_configs_and_duplicate_seeds(self):
        other = fixture_log(1)
        other.config["alpha"] = 3.0
        with pytest.raises(ValueError):
            aggregate_over_seeds([fixture_log(0), other])
        with pytest.raises(ValueError):
            aggregate_over_seeds([fixture_log(0), fixture_log(0)])
        with pytest.raises(ValueError):
            aggregate_over_seeds([])

    def test_degenerate_baseline_reported_as_none(self):
        recs = [EvaluationRecord(k + 1, (-1.0, 1.0)) for k in range(10)]
        report = aggregate_over_seeds([RunLog({"seed": 0}, recs, -100.0, 0.0)])
        assert report.stability[0]["worst_episode_deviation"] is None

    def test_json_is_sorted(self):
        text = aggregate_over_seeds([fixture_log(2), fixture_log(0)]).to_json()
        assert text.index('"0"') < text.index('"2"')


class TestEvaluate:
    def test_seeds_and_mean(self):
        spec = get_spec("lqr1d")
        rec = evaluate_policy(lambda obs: np.zeros(1), spec, episodes=3, base_seed=40,
                              train_step=5, mean_abs_q=1.5)
        assert rec.episode_seeds == (40, 41, 42)
        assert rec.mean_return == pytest.approx(np.mean(rec.episode_returns), abs=TOL)
        again = evaluate_policy(lambda obs: np.zeros(1), spec, episodes=3, base_seed=40)
        assert again.episode_returns == rec.episode_returns


class TestCsv:
    def test_round_trip(self):
        log = fixture_log()
        text = log_to_csv(log)
        assert text.splitlines()[0] == "step,ep_return_0,ep_return_1,mean_return,normalized_mean"
        steps, returns, norm = read_log_csv(text)
        np.testing.assert_array_equal(steps, [100 * (k + 1) for k in range(12)])
        np.testing.assert_array_equal(returns[:, 0], [-52.0 + k for k in range(12)])
        np.testing.assert_array_equal(norm, [49.0 + k for k in range(12)])

    def test_rejects_foreign_csv(self):
        with pytest.raises(ValueError):
            read_log_csv("a,b\n1,2\n")
