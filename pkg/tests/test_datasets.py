import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orl.datasets import (
    DEFAULT_EPSILON,
    NormalizationStats,
    OfflineDataset,
    apply_normalization,
    compute_normalization,
    dataset_bytes,
    episode_returns,
    generate_dataset,
    load_dataset,
    mix_datasets,
    normalize_dataset,
    parse_dataset,
    sample_minibatch,
    save_dataset,
)
from orl.envs import get_spec, rollout, tier_policy
from orl.errors import FormatError, ShapeError, VersionError


@pytest.fixture(scope="module")
def medium():
    return generate_dataset(get_spec("pointmass"), "medium", 3000, seed=4)


def toy_dataset(n=6, obs=2, act=1, normalized=False, stats=None):
    rng = np.random.default_rng(n)
    return OfflineDataset("lqr1d", "random", rng.normal(size=(n, obs)), rng.normal(size=(n, act)),
                          rng.normal(size=n), rng.normal(size=(n, obs)),
                          np.arange(n) % 3 == 0, generator_seed=1, stats=stats,
                          normalized=normalized)


class TestGeneration:
    @pytest.mark.parametrize("tier", ["random", "medium", "medium_replay", "medium_expert",
                                      "expert"])
    def test_shapes_and_tier(self, tier):
        d = generate_dataset(get_spec("lqr1d"), tier, 1500, seed=0)
        assert len(d) == 1500 and d.obs_dim == 2 and d.act_dim == 1 and d.tier == tier
        assert not d.normalized and d.stats is None

    def test_same_seed_same_bytes(self):
        a = generate_dataset("pendulum", "medium", 1200, seed=9)
        b = generate_dataset("pendulum", "medium", 1200, seed=9)
        assert dataset_bytes(a) == dataset_bytes(b)
        assert a != generate_dataset("pendulum", "medium", 1200, seed=10)

    def test_transitions_chain_within_episodes(self, medium):
        # Consecutive rows continue the same trajectory unless a horizon ended.
        starts = np.flatnonzero(np.any(medium.next_states[:-1] != medium.states[1:], axis=1))
        assert np.all(np.diff(starts) == get_spec("pointmass").horizon)

    def test_timeouts_are_not_terminals(self, medium):
        assert not medium.terminals.any()

    def test_embedded_returns_match_fresh_rollouts_in_distribution(self):
        spec = get_spec("lqr1d")
        d = generate_dataset(spec, "expert", 5000, seed=1)
        embedded = episode_returns(d, spec.horizon)
        assert embedded.size == 50
        fresh = [rollout(spec, tier_policy(spec, "expert", s), s) for s in range(100)]
        assert abs(embedded.mean() - np.mean(fresh)) < 0.5 * abs(np.mean(fresh))

    def test_medium_expert_halves(self):
        spec = get_spec("lqr1d")
        me = generate_dataset(spec, "medium_expert", 2000, seed=3)
        med = generate_dataset(spec, "medium", 1000, seed=3)
        exp = generate_dataset(spec, "expert", 1000, seed=4)
        np.testing.assert_array_equal(me.actions, np.concatenate([med.actions, exp.actions]))

    def test_medium_replay_improves_over_collection(self):
        spec = get_spec("lqr1d")
        rets = episode_returns(generate_dataset(spec, "medium_replay", 10000, seed=2), spec.horizon)
        assert rets[-20:].mean() > rets[:20].mean()

    @pytest.mark.parametrize("tier,size", [("mixed", 2000), ("bogus", 2000), ("medium", 999)])
    def test_rejects_bad_requests(self, tier, size):
        with pytest.raises(ValueError):
            generate_dataset("lqr1d", tier, size, seed=0)

    def test_arrays_are_read_only(self, medium):
        with pytest.raises(ValueError):
            medium.states[0, 0] = 1.0


class TestNormalization:
    def test_stats_use_states_only(self, medium):
        stats = compute_normalization(medium)
        np.testing.assert_array_equal(stats.mu, medium.states.mean(axis=0))
        np.testing.assert_array_equal(stats.sigma, medium.states.std(axis=0, ddof=0))
        assert stats.epsilon == DEFAULT_EPSILON == 1e-3

    def test_formula(self):
        stats = NormalizationStats(np.array([1.0, -2.0]), np.array([0.5, 0.0]), 1e-3)
        out = apply_normalization(np.array([[2.0, -2.0]]), stats)
        np.testing.assert_allclose(out, [[1.0 / 0.501, 0.0]], rtol=1e-15)

    def test_dataset_rewrites_both_state_arrays(self, medium):
        n = normalize_dataset(medium)
        stats = compute_normalization(medium)
        assert n.normalized and n.stats == stats
        np.testing.assert_array_equal(n.next_states, (medium.next_states - stats.mu)
                                      / (stats.sigma + stats.epsilon))
        np.testing.assert_array_equal(n.actions, medium.actions)
        assert normalize_dataset(n) is n

    def test_moments_after_normalization(self, medium):
        n = normalize_dataset(medium)
        sigma = compute_normalization(medium).sigma
        assert np.max(np.abs(n.states.mean(axis=0))) < 1e-9
        # The standardized std is exactly sigma / (sigma + eps).
        np.testing.assert_allclose(n.states.std(axis=0), sigma / (sigma + 1e-3), rtol=1e-10)

    def test_constant_feature_stays_finite(self):
        d = toy_dataset()
        states = d.states.copy()
        states[:, 1] = 7.0
        d = OfflineDataset(d.env_name, d.tier, states, d.actions, d.rewards, states, d.terminals)
        n = normalize_dataset(d)
        np.testing.assert_array_equal(n.states[:, 1], 0.0)

    def test_shape_checked(self):
        stats = NormalizationStats(np.zeros(3), np.ones(3))
        with pytest.raises(ShapeError):
            apply_normalization(np.zeros((2, 2)), stats)


class TestMixing:
    def test_half_of_each(self):
        a = generate_dataset("lqr1d", "random", 1000, seed=0)
        b = generate_dataset("lqr1d", "expert", 1200, seed=1)
        m = mix_datasets(a, b, seed=5)
        assert len(m) == 500 + 600 and m.tier == "mixed"
        # Every mixed row is a row of its source.
        rows_a = {r.tobytes() for r in a.states}
        assert all(r.tobytes() in rows_a for r in m.states[:500])
        assert len({r.tobytes() for r in m.states[:500]}) == 500

    def test_refuses_normalized_or_mismatched(self):
        a = generate_dataset("lqr1d", "random", 1000, seed=0)
        with pytest.raises(ValueError):
            mix_datasets(a, normalize_dataset(a), seed=0)
        with pytest.raises(ValueError):
            mix_datasets(a, generate_dataset("pendulum", "random", 1000, seed=0), seed=0)


class TestSampling:
    def test_batch_fields_align(self, medium):
        batch = sample_minibatch(medium, 64, np.random.default_rng(0))
        np.testing.assert_array_equal(batch.states, medium.states[batch.indices])
        np.testing.assert_array_equal(batch.not_done, 1.0 - medium.terminals[batch.indices])
        assert len(batch) == 64

    def test_uniform_frequencies(self):
        d = toy_dataset(n=10)
        rng = np.random.default_rng(1)
        counts = np.zeros(10)
        for _ in range(2000):
            counts += np.bincount(sample_minibatch(d, 5, rng).indices, minlength=10)
        expected = 10000 / 10
        chi2 = np.sum((counts - expected) ** 2 / expected)
        assert chi2 < 27.9  # 99.9% quantile, 9 degrees of freedom

    def test_batch_larger_than_dataset(self):
        with pytest.raises(ValueError):
            sample_minibatch(toy_dataset(n=4), 5, np.random.default_rng())


class TestFileFormat:
    def test_round_trip(self, medium, tmp_path):
        for d in (medium, normalize_dataset(medium)):
            path = tmp_path / "d.orld"
            save_dataset(d, path)
            back = load_dataset(path)
            assert back == d
            assert back.stats == d.stats

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 20), obs=st.integers(1, 4), act=st.integers(1, 3),
           with_stats=st.booleans())
    def test_round_trip_property(self, n, obs, act, with_stats):
        d = toy_dataset(n, obs, act)
        if with_stats:
            d = apply_normalization(d, compute_normalization(d))
        assert parse_dataset(dataset_bytes(d)) == d

    def test_truncation_names_section(self, medium):
        blob = dataset_bytes(medium)
        with pytest.raises(FormatError) as info:
            parse_dataset(blob[:-1])
        assert info.value.section == "records"
        with pytest.raises(FormatError) as info:
            parse_dataset(blob[:10])
        assert info.value.section == "preamble"
        with pytest.raises(FormatError) as info:
            parse_dataset(blob[:40])
        assert info.value.section == "header"

    def test_bit_flip_detected(self, medium):
        blob = bytearray(dataset_bytes(medium))
        blob[-5] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            parse_dataset(bytes(blob))

    def test_magic_and_version(self, medium):
        blob = dataset_bytes(medium)
        with pytest.raises(VersionError):
            parse_dataset(b"XXXX" + blob[4:])
        with pytest.raises(VersionError):
            parse_dataset(blob[:4] + (2).to_bytes(4, "little") + blob[8:])

    def test_layout(self, medium):
        blob = dataset_bytes(medium)
        assert blob[:4] == b"ORLD"
        assert int.from_bytes(blob[4:8], "little") == 1
        hlen = int.from_bytes(blob[8:16], "little")
        record = 8 * (6 + 2 + 1 + 6) + 1
        assert len(blob) == 16 + hlen + record * len(medium)
        first = np.frombuffer(blob[16 + hlen:16 + hlen + 48], dtype="<f8")
        np.testing.assert_array_equal(first, medium.states[0])
