import numpy as np
import pytest

from xkv.cache import KVCacheLayer
from xkv.config import StreamConfig
from xkv.errors import BudgetInfeasibleError, DimensionError, ParameterError
from xkv.pruning import (
    ImportanceScores,
    build_pooled_query,
    prune_step,
    score_matrix,
    score_tokens,
    select_keep_indices,
    summarize_prunable_keys,
)


def keep_oracle(scores, T, t_first, t_current, L_max):
    """Brute force: sort middle scores descending, lower index wins ties."""
    k = L_max - t_first - t_current
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))[:k]
    middle = sorted(t_first + j for j in order)
    return list(range(t_first)) + middle + list(range(T - t_current, T))


class TestBuildPooledQuery:
    def test_whole_patch_group_is_global_mean(self):
        rng = np.random.default_rng(0)
        Q = rng.standard_normal((3, 10, 4))
        pooled = build_pooled_query(Q, n_special=2, g=8)
        head_avg = Q.mean(axis=0)
        # special rows pass through bit-identically, never pooled
        assert np.array_equal(pooled.matrix[:2], head_avg[:2])
        assert np.allclose(pooled.matrix[2], head_avg[2:].mean(axis=0))
        assert pooled.matrix.shape == (3, 4)

    def test_g_one_is_head_average(self):
        rng = np.random.default_rng(1)
        Q = rng.standard_normal((2, 6, 3))
        pooled = build_pooled_query(Q, n_special=1, g=1)
        assert np.allclose(pooled.matrix, Q.mean(axis=0))

    def test_opposite_heads_cancel(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((1, 8, 4))
        Q = np.concatenate([q, -q], axis=0)
        pooled = build_pooled_query(Q, n_special=2, g=3)
        assert np.allclose(pooled.matrix, 0.0)

    def test_pooled_row_count(self):
        Q = np.zeros((2, 1 + 4 + 13, 4))
        pooled = build_pooled_query(Q, n_special=5, g=4)
        assert pooled.matrix.shape[0] == 5 + -(-13 // 4)

    def test_no_patches_rejected(self):
        with pytest.raises(ParameterError):
            build_pooled_query(np.zeros((1, 3, 2)), n_special=3, g=2)


class TestSummarizePrunableKeys:
    def test_single_head_is_verbatim_slice(self):
        rng = np.random.default_rng(3)
        K = rng.standard_normal((1, 10, 4))
        out = summarize_prunable_keys(K, t_first=3, t_current=3)
        assert np.array_equal(out, K[0, 3:7])

    def test_degenerate_slice_is_empty(self):
        K = np.zeros((2, 6, 4))
        out = summarize_prunable_keys(K, t_first=3, t_current=3)
        assert out.shape == (0, 4)

    def test_matches_elementwise_mean_oracle(self):
        rng = np.random.default_rng(4)
        K = rng.standard_normal((3, 12, 5))
        out = summarize_prunable_keys(K, t_first=4, t_current=2)
        expect = np.zeros((6, 5))
        for i in range(6):
            for c in range(5):
                expect[i, c] = sum(K[h, 4 + i, c] for h in range(3)) / 3
        assert np.max(np.abs(out - expect)) <= 1e-6


class TestScoring:
    def test_basis_inner_products(self):
        from xkv.pruning import PooledQuery

        pooled = PooledQuery(matrix=np.array([[1.0, 0.0]]), n_special=0)
        scores = score_tokens(pooled, np.array([[2.0, 9.0], [0.0, 3.0]]))
        assert scores.scores.tolist() == [2.0, 0.0]

    def test_zero_key_scores_zero(self):
        from xkv.pruning import PooledQuery

        rng = np.random.default_rng(5)
        pooled = PooledQuery(matrix=rng.standard_normal((4, 3)), n_special=1)
        keys = rng.standard_normal((5, 3))
        keys[2] = 0.0
        assert score_tokens(pooled, keys).scores[2] == 0.0

    def test_matches_double_loop_oracle(self):
        from xkv.pruning import PooledQuery

        rng = np.random.default_rng(6)
        pooled = PooledQuery(matrix=rng.standard_normal((4, 6)), n_special=2)
        keys = rng.standard_normal((9, 6))
        got = score_tokens(pooled, keys).scores
        expect = np.zeros(9)
        for j in range(9):
            for i in range(4):
                expect[j] += pooled.matrix[i] @ keys[j]
        expect /= 4
        assert np.max(np.abs(got - expect)) <= 1e-6
        matrix = score_matrix(pooled, keys)
        assert matrix.shape == (4, 9)

    def test_channel_mismatch_rejected(self):
        from xkv.pruning import PooledQuery

        pooled = PooledQuery(matrix=np.zeros((2, 3)), n_special=0)
        with pytest.raises(DimensionError):
            score_tokens(pooled, np.zeros((4, 5)))


class TestSelectKeepIndices:
    def test_worked_example(self):
        scores = ImportanceScores(np.array([0.2, 0.9, 0.1, 0.5]), offset=3)
        sel = select_keep_indices(scores, T=10, t_first=3, t_current=3, L_max=8)
        assert sel.keep_indices.tolist() == [0, 1, 2, 4, 6, 7, 8, 9]

    def test_equal_scores_keep_lowest_indices(self):
        scores = ImportanceScores(np.zeros(4), offset=3)
        sel = select_keep_indices(scores, T=10, t_first=3, t_current=3, L_max=8)
        assert sel.middle_indices.tolist() == [3, 4]

    def test_budget_exactly_protected_frames_evicts_middle(self):
        scores = ImportanceScores(np.array([5.0, 6.0]), offset=3)
        sel = select_keep_indices(scores, T=8, t_first=3, t_current=3, L_max=6)
        assert sel.middle_indices.size == 0
        assert sel.keep_indices.tolist() == [0, 1, 2, 5, 6, 7]

    def test_infeasible_budget_rejected(self):
        with pytest.raises(BudgetInfeasibleError):
            select_keep_indices(ImportanceScores(np.zeros(2), 3), 8, 3, 3, 5)

    def test_under_budget_rejected(self):
        with pytest.raises(ParameterError):
            select_keep_indices(ImportanceScores(np.zeros(2), 3), 8, 3, 3, 9)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            t_first = int(rng.integers(1, 8))
            t_current = int(rng.integers(1, 8))
            middle = int(rng.integers(1, 30))
            T = t_first + t_current + middle
            L_max = int(rng.integers(t_first + t_current, T))
            scores = rng.choice([-1.0, 0.0, 0.25, 0.25, 1.5], size=middle)
            sel = select_keep_indices(
                ImportanceScores(scores, t_first), T, t_first, t_current, L_max
            )
            assert sel.keep_indices.tolist() == keep_oracle(
                scores, T, t_first, t_current, L_max
            )


def small_config(**kw):
    base = dict(heads=2, d_head=4, d_model=8, registers=1, patches=4,
                pool_size=2, budget=12, bits=4, group_size=4, frames=5,
                redundancy=0.5, outlier_channels=0, outlier_amp=1.0, seed=0,
                layers=1)
    base.update(kw)
    return StreamConfig(**base)


class TestPruneStep:
    def test_noop_below_budget(self):
        rng = np.random.default_rng(8)
        config = small_config(budget=2048)
        layer = KVCacheLayer(heads=2, d_head=4, budget=config.budget)
        K = rng.standard_normal((2, 6, 4))
        layer.append(K, K.copy(), 1)
        K0, V0 = layer.read_full_precision()
        sel = prune_step(layer, rng.standard_normal((2, 6, 4)), config)
        assert sel is None
        K1, V1 = layer.read_full_precision()
        assert np.array_equal(K0, K1) and np.array_equal(V0, V1)

    def test_directional_keys_survive(self):
        # middle token whose key lies along the mean query direction outlives
        # orthogonal-key middle tokens
        config = small_config(budget=13)  # 6 tokens/frame, keep 1 middle token
        layer = KVCacheLayer(heads=2, d_head=4, budget=13)
        rng = np.random.default_rng(9)
        Q_t = np.zeros((2, 6, 4))
        Q_t[:, :, 0] = 1.0  # every pooled query points along e0
        frame1 = rng.standard_normal((2, 6, 4))
        middle_K = np.zeros((2, 6, 4))
        middle_K[:, 2, 0] = 5.0   # aligned with the query direction
        middle_K[:, 3, 1] = 50.0  # huge but orthogonal
        middle_K[:, 4, 0] = -5.0  # anti-aligned
        layer.append(frame1, frame1.copy(), 1)
        layer.append(middle_K, middle_K.copy(), 2)
        current = rng.standard_normal((2, 6, 4))
        layer.append(current, current.copy(), 3)
        sel = prune_step(layer, Q_t, config)
        assert sel is not None
        assert sel.middle_indices.tolist() == [8]  # token 2 of frame 2

    def test_budget_fixed_point_over_steps(self):
        config = small_config(budget=12)
        layer = KVCacheLayer(heads=2, d_head=4, budget=12)
        rng = np.random.default_rng(10)
        for frame in range(1, 5):
            K = rng.standard_normal((2, 6, 4))
            layer.append(K, K.copy(), frame)
            prune_step(layer, rng.standard_normal((2, 6, 4)), config)
            if frame * 6 > 12:
                assert layer.total_tokens == 12

    def test_scale_invariance_of_selection(self):
        config = small_config(budget=14)
        rng = np.random.default_rng(11)
        frames = [rng.standard_normal((2, 6, 4)) for _ in range(3)]
        Q_t = rng.standard_normal((2, 6, 4))

        def run(scale):
            layer = KVCacheLayer(heads=2, d_head=4, budget=14)
            layer.append(frames[0], frames[0].copy(), 1)
            scaled = frames[1] * scale  # middle keys scaled by a positive constant
            layer.append(scaled, scaled.copy(), 2)
            layer.append(frames[2], frames[2].copy(), 3)
            return prune_step(layer, Q_t, config)

        assert run(1.0).keep_indices.tolist() == run(7.5).keep_indices.tolist()

    def test_score_sink_sees_matrix(self):
        config = small_config(budget=12)
        layer = KVCacheLayer(heads=2, d_head=4, budget=12)
        rng = np.random.default_rng(12)
        captured = []
        for frame in range(1, 4):
            K = rng.standard_normal((2, 6, 4))
            layer.append(K, K.copy(), frame)
            prune_step(layer, rng.standard_normal((2, 6, 4)), config,
                       score_sink=captured.append)
        # first prune at frame 3 (18 tokens > 12): middle = frame 2's 6 tokens
        assert len(captured) == 1
        n_pooled = 2 + -(-4 // 2)  # specials + patch groups
        assert captured[0].shape == (n_pooled, 6)

    def test_mismatched_query_rejected(self):
        config = small_config(budget=12)
        layer = KVCacheLayer(heads=2, d_head=4, budget=12)
        rng = np.random.default_rng(13)
        for frame in range(1, 4):
            K = rng.standard_normal((2, 6, 4))
            layer.append(K, K.copy(), frame)
        with pytest.raises(DimensionError):
            prune_step(layer, rng.standard_normal((2, 5, 4)), config)
