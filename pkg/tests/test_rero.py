"""Token importance, top-K selection, visible subsampling, heatmap export."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from everest import rero
from everest.embedding import TubeEmbedConfig, tube_embed
from everest.rero import MetricKind, round_half_up
from everest.video import gen_moving_square, normalize


def brute_force_topk(imp, k, order="descending"):
    """Independent oracle: full sort by (key, flat index)."""
    flat = imp.reshape(-1)
    sign = -1.0 if order == "descending" else 1.0
    ranked = sorted(range(flat.size), key=lambda i: (sign * flat[i], i))
    return ranked[:k]


class TestRoundHalfUp:
    @pytest.mark.parametrize("x,want", [(0.4, 0), (0.5, 1), (1.5, 2), (2.5, 3), (51.2, 51), (153.6, 154)])
    def test_values(self, x, want):
        assert round_half_up(x) == want


class TestDistance:
    def test_identical_vectors(self):
        v = np.array([1.0, 2.0, 3.0])
        assert rero.distance(v, v, MetricKind.L2) == 0.0
        assert rero.distance(v, v, MetricKind.L1) == 0.0
        assert rero.distance(v, v, MetricKind.NEG_COSINE) == -1.0

    def test_orthogonal(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert abs(rero.distance(a, b, MetricKind.L2) - np.sqrt(2)) < 1e-12
        assert abs(rero.distance(a, b, MetricKind.NEG_COSINE)) < 1e-12

    def test_matches_high_precision_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            assert abs(rero.distance(a, b, "l2") - np.sqrt(((a - b) ** 2).sum())) < 1e-10
            assert abs(rero.distance(a, b, "l1") - np.abs(a - b).sum()) < 1e-10
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert abs(rero.distance(a, b, "neg_cosine") + cos) < 1e-10
            ac, bc = a - a.mean(), b - b.mean()
            cka = (ac @ bc) ** 2 / (ac @ ac) / (bc @ bc)
            assert abs(rero.distance(a, b, "neg_linear_cka") + cka) < 1e-10

    def test_zero_vector_cosine_convention(self):
        assert rero.distance(np.zeros(4), np.ones(4), MetricKind.NEG_COSINE) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            rero.distance(np.ones(3), np.ones(4), MetricKind.L2)


class TestImportanceMap:
    def test_static_grid_all_zero(self):
        grid = np.tile(np.random.default_rng(1).standard_normal((1, 5, 7)), (4, 1, 1))
        for metric in (MetricKind.L2, MetricKind.L1):
            assert not rero.importance_map(grid, metric).any()

    def test_elementwise_matches_scalar_distance(self):
        rng = np.random.default_rng(2)
        grid = rng.standard_normal((3, 4, 6))
        for metric in MetricKind:
            imp = rero.importance_map(grid, metric)
            for i in range(1, 3):
                for j in range(4):
                    want = rero.distance(grid[i, j], grid[i - 1, j], metric)
                    assert abs(imp[i, j] - want) < 1e-9, (metric, i, j)
            np.testing.assert_array_equal(imp[0], imp[1])

    def test_requires_two_pairs(self):
        with pytest.raises(ValueError):
            rero.importance_map(np.zeros((1, 4, 8)))

    def test_moving_square_importance_lands_on_motion(self):
        clip, mask = gen_moving_square(16, 16, 8, 5, (0, 1), noise_amp=0.0, seed=3)
        cfg = TubeEmbedConfig(patch_size=4, embed_dim=12)
        rng = np.random.default_rng(0)
        w = rng.uniform(-0.1, 0.1, size=(12, cfg.block_dim(3))).astype(np.float32)
        grid = tube_embed(normalize(clip, 0.45, 0.225), w, np.zeros(12, np.float32), cfg)
        imp = rero.importance_map(grid)
        # the most important patch of each pair i >= 1 must cover changed pixels
        for i in range(1, 4):
            j = int(imp[i].argmax())
            r, c = grid.patch_of(j)
            window = mask[2 * i - 1 : 2 * i + 2, r * 4 : (r + 1) * 4, c * 4 : (c + 1) * 4]
            assert window.any()


class TestSelectRero:
    def test_rho_one_selects_all(self):
        imp = np.random.default_rng(4).standard_normal((3, 5))
        mask = rero.select_rero(imp, 1.0)
        assert mask.grid.all()
        assert mask.count == 15

    def test_spec_example(self):
        imp = np.array([[8.0, 1.0, 1.0, 1.0], [9.0, 1.0, 1.0, 7.0]])
        mask = rero.select_rero(imp, 0.375)
        assert mask.count == 3
        assert mask.selected.tolist() == [4, 0, 7]

    def test_tie_break_ascending_index(self):
        imp = np.ones((2, 4))
        mask = rero.select_rero(imp, 0.5)
        assert mask.selected.tolist() == [0, 1, 2, 3]

    def test_static_selects_first_k(self):
        imp = np.zeros((4, 8))
        mask = rero.select_rero(imp, 0.25)
        assert mask.selected.tolist() == list(range(8))

    def test_dynamic_per_frame_counts(self):
        imp = np.array([[0.0, 0.0], [5.0, 6.0]])
        mask = rero.select_rero(imp, 0.5)
        assert mask.per_pair_counts().tolist() == [0, 2]

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            rero.select_rero(np.ones((2, 2)), 0.1)

    @pytest.mark.parametrize("rho", [round(0.1 * k, 1) for k in range(1, 11)])
    def test_count_contract_over_rho_grid(self, rho):
        imp = np.random.default_rng(5).standard_normal((8, 64))
        assert rero.select_rero(imp, rho).count == round_half_up(8 * 64 * rho)

    @settings(max_examples=60, deadline=None)
    @given(tau=st.integers(2, 6), j=st.integers(1, 12),
           seed=st.integers(0, 10_000), rho=st.floats(0.05, 1.0))
    def test_matches_brute_force_with_ties(self, tau, j, seed, rho):
        rng = np.random.default_rng(seed)
        imp = rng.integers(0, 4, size=(tau, j)).astype(np.float64)  # heavy ties
        k = round_half_up(tau * j * rho)
        if k == 0:
            return
        mask = rero.select_rero(imp, rho)
        assert mask.selected.tolist() == brute_force_topk(imp, k)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        imp = rng.integers(0, 50, size=(4, 9)).astype(np.float64)
        base = set(rero.select_rero(imp, 0.3).selected.tolist())
        for transform in (lambda x: 2.0 * x + 1.0, lambda x: x**3, np.expm1):
            assert set(rero.select_rero(transform(imp), 0.3).selected.tolist()) == base

    def test_ascending_order_selects_least_important(self):
        imp = np.array([[5.0, 1.0, 3.0, 2.0], [4.0, 0.0, 6.0, 7.0]])
        mask = rero.select_rero(imp, 0.5, order="ascending")
        assert mask.selected.tolist() == brute_force_topk(imp, 4, "ascending")
        assert set(mask.selected.tolist()) == {1, 5, 3, 2}


class TestSubsampleVisible:
    def _mask(self, rho_pre=0.3, tau=8, j=64, seed=6):
        imp = np.random.default_rng(seed).standard_normal((tau, j))
        return rero.select_rero(imp, rho_pre)

    def test_rho_post_one_is_identity(self):
        mask = self._mask()
        vis = rero.subsample_visible(mask, 1.0, seed=0, allow_ratio_override=True)
        assert set(vis.indices.tolist()) == set(mask.selected.tolist())

    def test_two_stage_budget_sizes(self):
        mask = self._mask(0.3)
        vis = rero.subsample_visible(mask, 1.0 / 3.0, seed=1)
        assert mask.count == round_half_up(512 * 0.3)
        assert vis.count == round_half_up(mask.count / 3.0)
        assert vis.count == round_half_up(0.1 * 512)

    def test_subset_and_determinism(self):
        mask = self._mask()
        a = rero.subsample_visible(mask, 1.0 / 3.0, seed=42)
        b = rero.subsample_visible(mask, 1.0 / 3.0, seed=42)
        assert np.array_equal(a.indices, b.indices)
        assert np.isin(a.indices, mask.selected).all()

    def test_ratio_constraint_enforced(self):
        mask = self._mask(0.5)
        with pytest.raises(rero.RatioConstraintError):
            rero.subsample_visible(mask, 0.5, seed=0)
        rero.subsample_visible(mask, 0.5, seed=0, allow_ratio_override=True)

    def test_inclusion_frequency_binomial(self):
        mask = self._mask(0.3, tau=4, j=10, seed=7)  # K = 12
        n_trials = 20_000
        rho_post = 1.0 / 3.0
        counts = np.zeros(40)
        for t in range(n_trials):
            vis = rero.subsample_visible(mask, rho_post, seed=t, allow_ratio_override=True)
            counts[vis.indices] += 1
        p_hat = counts[mask.selected] / n_trials
        p = rero.round_half_up(mask.count * rho_post) / mask.count
        sigma = np.sqrt(p * (1 - p) / n_trials)
        assert (np.abs(p_hat - p) < 3.5 * sigma).all()


class TestBaselineMask:
    def test_rho_one_full(self):
        for kind in ("random", "tube"):
            assert rero.baseline_mask(kind, 16, 4, 1.0, seed=0).all()

    def test_tube_rows_identical(self):
        grid = rero.baseline_mask("tube", 16, 6, 0.4, seed=1)
        assert all(np.array_equal(grid[0], grid[i]) for i in range(6))

    def test_random_per_pair_counts(self):
        for seed in range(100):
            grid = rero.baseline_mask("random", 16, 4, 0.3, seed=seed)
            assert (grid.sum(axis=1) == round_half_up(16 * 0.3)).all()

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            rero.baseline_mask("diagonal", 4, 2, 0.5, seed=0)


def read_pgm(path):
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n")
    header, rest = raw.split(b"255\n", 1)
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


class TestHeatmapExport:
    def test_constant_map_is_black(self, tmp_path):
        files = rero.export_heatmap(np.full((2, 4), 3.3), (2, 2), 4, tmp_path)
        assert len(files) == 2
        img = read_pgm(tmp_path / "pair_000.pgm")
        assert img.shape == (8, 8)
        assert not img.any()

    def test_single_hot_patch(self, tmp_path):
        imp = np.zeros((1, 4))
        imp[0, 2] = 9.0
        rero.export_heatmap(imp, (2, 2), 3, tmp_path)
        img = read_pgm(tmp_path / "pair_000.pgm")
        assert img[3:, :3].min() == 255  # patch (1, 0) upscaled 3x
        assert img[:3].max() == 0

    def test_masked_variant_zeroes_unselected(self, tmp_path):
        imp = np.arange(8.0).reshape(2, 4)
        mask = rero.select_rero(imp, 0.5)
        rero.export_heatmap(imp, (2, 2), 2, tmp_path, mask=mask)
        plain = read_pgm(tmp_path / "pair_000.pgm")
        masked = read_pgm(tmp_path / "pair_000_masked.pgm")
        assert (masked[~np.repeat(np.repeat(mask.grid[0].reshape(2, 2), 2, 0), 2, 1)] == 0).all()
        assert masked.sum() <= plain.sum()

    def test_moving_square_brightest_patch_in_motion(self, tmp_path):
        clip, mask = gen_moving_square(16, 16, 8, 5, (1, 0), noise_amp=0.0, seed=12)
        cfg = TubeEmbedConfig(patch_size=4, embed_dim=8)
        rng = np.random.default_rng(1)
        w = rng.uniform(-0.1, 0.1, size=(8, cfg.block_dim(3))).astype(np.float32)
        grid = tube_embed(normalize(clip, 0.45, 0.225), w, np.zeros(8, np.float32), cfg)
        imp = rero.importance_map(grid)
        rero.export_heatmap(imp, grid.grid_shape, 4, tmp_path)
        img = read_pgm(tmp_path / "pair_002.pgm")
        y, x = np.unravel_index(img.argmax(), img.shape)
        assert mask[3:6, (y // 4) * 4 : (y // 4) * 4 + 4, (x // 4) * 4 : (x // 4) * 4 + 4].any()

    def test_mask_json_dump(self, tmp_path):
        imp = np.arange(8.0).reshape(2, 4)
        mask = rero.select_rero(imp, 0.5)
        vis = rero.subsample_visible(mask, 0.5, seed=0, allow_ratio_override=True)
        payload = rero.dump_mask_json(mask, vis, tmp_path / "m.json")
        assert payload["rho_pre"] == 0.5
        assert len(payload["selected"]) == 4
        assert set(payload["visible"]) <= set(payload["selected"])
