import numpy as np
import pytest

from eegfm.masking import (
    Action,
    aamp_mask,
    coarsen,
    corruption_plan,
    random_mask,
)
from eegfm.numerics import seeded_stream


def oracle_rank_window(values: np.ndarray, ratio: float, xi: np.ndarray) -> np.ndarray:
    """Brute-force amplitude-rank-window mask, written independently.

    Sorts (value, time) pairs per channel, slides a w-point window to the
    clamped centre, and marks the time indices it covers.
    """
    T, D = values.shape
    w = round(T * ratio)
    out = np.zeros((T, D), dtype=bool)
    for d in range(D):
        pairs = sorted((values[t, d], t) for t in range(T))
        centre = int(np.floor(xi[d] * T))
        centre = max(centre, w // 2)
        centre = min(centre, T - (w + 1) // 2)
        start = centre - w // 2
        for _, t in pairs[start : start + w]:
            out[t, d] = True
    return out


class TestAampMask:
    def test_lowest_percentile_masks_smallest_values(self):
        x = np.arange(10, dtype=float).reshape(10, 1)

        class FixedXi:
            def uniform(self, size=None):
                return np.zeros(size)

        spec = aamp_mask(x, 0.5, FixedXi())
        masked_values = set(x[spec.mask[:, 0], 0])
        assert masked_values == {0.0, 1.0, 2.0, 3.0, 4.0}

    def test_highest_percentile_masks_largest_values(self):
        x = np.arange(10, dtype=float).reshape(10, 1)

        class FixedXi:
            def uniform(self, size=None):
                return np.full(size, 0.999999)

        spec = aamp_mask(x, 0.5, FixedXi())
        assert set(x[spec.mask[:, 0], 0]) == {5.0, 6.0, 7.0, 8.0, 9.0}

    def test_cardinality_exact(self):
        rng = seeded_stream(11)
        for T in (5, 8, 17, 33, 64):
            for ratio in (0.2, 0.35, 0.5, 0.77):
                if round(T * ratio) < 1:
                    continue
                x = np.asarray(rng.normal(size=(T, 3)))
                spec = aamp_mask(x, ratio, rng)
                assert (spec.n_masked_per_channel == round(T * ratio)).all()

    def test_matches_oracle_with_ties(self):
        x = np.array([3, 1, 4, 1, 5, 9, 2, 6], dtype=float).reshape(8, 1)

        class FixedXi:
            def uniform(self, size=None):
                return np.full(size, 0.6)

        spec = aamp_mask(x, 0.25, FixedXi())
        expected = oracle_rank_window(x, 0.25, np.array([0.6]))
        np.testing.assert_array_equal(spec.mask, expected)

    def test_matches_oracle_randomized(self):
        rng = seeded_stream(520)
        for trial in range(300):
            T = int(rng.integers(4, 65))
            ratio = [0.2, 0.35, 0.5][int(rng.integers(0, 3))]
            if round(T * ratio) < 1:
                continue
            D = int(rng.integers(1, 5))
            x = np.asarray(rng.normal(size=(T, D)))
            if trial % 3 == 0:
                x = np.round(x)  # force ties
            draw = seeded_stream(1000 + trial)
            spec = aamp_mask(x, ratio, draw)
            expected = oracle_rank_window(x, ratio, spec.per_channel_percentile)
            np.testing.assert_array_equal(spec.mask, expected)

    def test_masked_ranks_contiguous_in_sorted_order(self):
        rng = seeded_stream(3)
        x = np.asarray(rng.normal(size=(32, 2)))
        spec = aamp_mask(x, 0.25, rng)
        for d in range(2):
            order = np.argsort(x[:, d], kind="stable")
            flags = spec.mask[order, d]
            runs = np.flatnonzero(np.diff(flags.astype(int)) != 0)
            assert len(runs) <= 2  # one contiguous run of True

    def test_all_ranks_reachable(self):
        T, ratio = 32, 0.25
        x = np.asarray(seeded_stream(0).normal(size=(T, 1)))
        order = np.argsort(x[:, 0], kind="stable")
        covered = np.zeros(T, dtype=bool)
        for s in range(1000):
            spec = aamp_mask(x, ratio, seeded_stream(s))
            covered |= spec.mask[order, 0]
        assert covered.all()

    def test_bad_ratio_rejected(self):
        x = np.zeros((10, 1))
        for ratio in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                aamp_mask(x, ratio, seeded_stream(0))

    def test_rounding_to_zero_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            aamp_mask(np.zeros((4, 1)), 0.05, seeded_stream(0))


class TestRandomMask:
    def test_contiguous_window(self):
        rng = seeded_stream(5)
        spec = random_mask(np.zeros((10, 4)), 0.5, rng)
        assert (spec.n_masked_per_channel == 5).all()
        for d in range(4):
            idx = np.flatnonzero(spec.mask[:, d])
            assert (np.diff(idx) == 1).all()

    def test_near_full_ratio_masks_everything(self):
        spec = random_mask(np.zeros((10, 2)), 0.9999, seeded_stream(0))
        assert spec.mask.all()

    def test_deterministic_given_seed(self):
        a = random_mask(np.zeros((16, 3)), 0.35, seeded_stream(9)).mask
        b = random_mask(np.zeros((16, 3)), 0.35, seeded_stream(9)).mask
        np.testing.assert_array_equal(a, b)


class TestCorruptionPlan:
    def test_fraction_concentration(self):
        x = np.zeros((200, 50))
        spec = random_mask(x, 0.999, seeded_stream(1))
        plan = corruption_plan(spec, seeded_stream(2))
        fr = plan.fractions()
        assert fr["MASK_TOKEN"] == pytest.approx(0.8, abs=0.02)
        assert fr["RANDOM_REPLACE"] == pytest.approx(0.1, abs=0.02)
        assert fr["KEEP"] == pytest.approx(0.1, abs=0.02)

    def test_single_masked_point(self):
        mask = random_mask(np.zeros((4, 1)), 0.26, seeded_stream(3))
        assert mask.mask.sum() == 1
        plan = corruption_plan(mask, seeded_stream(4))
        assert (plan.action >= 0).sum() == 1

    def test_actions_only_on_masked_points(self):
        spec = aamp_mask(np.asarray(seeded_stream(5).normal(size=(16, 4))), 0.35, seeded_stream(6))
        plan = corruption_plan(spec, seeded_stream(7))
        np.testing.assert_array_equal(plan.action >= 0, spec.mask)

    def test_donors_within_grid(self):
        spec = random_mask(np.zeros((32, 8)), 0.5, seeded_stream(8))
        plan = corruption_plan(spec, seeded_stream(9))
        repl = plan.action == int(Action.RANDOM_REPLACE)
        assert (plan.donor_t[repl] >= 0).all() and (plan.donor_t[repl] < 32).all()
        assert (plan.donor_d[repl] >= 0).all() and (plan.donor_d[repl] < 8).all()


class TestCoarsen:
    def test_all_reduction(self):
        spec = random_mask(np.zeros((4, 1)), 0.5, seeded_stream(0))
        spec.mask[:, 0] = [True, True, True, False]
        layers = coarsen(spec, [1, 2])
        np.testing.assert_array_equal(layers.masks[1][:, 0], [True, False])

    def test_layer_lengths_match_merge_schedule(self):
        spec = random_mask(np.zeros((256, 2)), 0.5, seeded_stream(0))
        layers = coarsen(spec, [1, 4, 1, 2, 1, 2])
        assert [m.shape[0] for m in layers.masks] == [256, 64, 64, 32, 32, 16]

    def test_first_layer_is_input_mask(self):
        spec = aamp_mask(np.asarray(seeded_stream(1).normal(size=(12, 3))), 0.5, seeded_stream(2))
        layers = coarsen(spec, [1, 3])
        np.testing.assert_array_equal(layers.masks[0], spec.mask)

    def test_partial_trailing_group(self):
        spec = random_mask(np.zeros((5, 1)), 0.2, seeded_stream(0))
        spec.mask[:, 0] = [False, False, False, False, True]
        layers = coarsen(spec, [1, 2])
        # groups: (0,1), (2,3), (4,) -> last group all-masked
        np.testing.assert_array_equal(layers.masks[1][:, 0], [False, False, True])

    def test_nonpositive_factor_rejected(self):
        spec = random_mask(np.zeros((8, 1)), 0.5, seeded_stream(0))
        with pytest.raises(ValueError):
            coarsen(spec, [1, 0])
