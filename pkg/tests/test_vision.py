import math

import numpy as np
import pytest

from structobs import engine, vision
from structobs.engine import Array, ShapeError, grad_check
from structobs.vision import (ParameterError, PatchEmbedder, PatchGrid, StructureQuerySet,
                              extract_patches, observe, select_patches)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def tiny_setup(seed=0, n_structures=3, n_patches=5, d=8):
    r = rng(seed)
    grid = PatchGrid("s", Array(r.standard_normal((n_patches, d))), (n_patches, 1, 1))
    queries = StructureQuerySet(n_structures, d, d, d, d, seed=seed + 1, init_scale=0.3)
    return grid, queries


class TestEmbedVolume:
    def test_patch_count_arithmetic(self):
        emb = PatchEmbedder((4, 4, 4), d_v=8, seed=0)
        grid = emb.embed_volume("s", np.zeros((16, 16, 8)))
        assert grid.features.shape == (4 * 4 * 2, 8)
        assert grid.grid == (4, 4, 2)

    def test_zero_volume_gives_bias(self):
        emb = PatchEmbedder((4, 4, 4), d_v=8, seed=1)
        emb.bias.data[:] = rng(2).standard_normal(8)
        grid = emb.embed_volume("s", np.zeros((8, 8, 4)))
        assert np.allclose(grid.features.data, np.tile(emb.bias.data, (4, 1)), atol=1e-15)

    def test_matches_per_patch_affine_oracle(self):
        emb = PatchEmbedder((2, 2, 2), d_v=6, seed=3)
        vol = rng(4).standard_normal((4, 4, 2))
        grid = emb.embed_volume("s", vol)
        idx = 0
        for ix in range(2):
            for iy in range(2):
                for iz in range(1):
                    patch = vol[2 * ix:2 * ix + 2, 2 * iy:2 * iy + 2, 2 * iz:2 * iz + 2].reshape(-1)
                    expected = patch @ emb.weight.data + emb.bias.data
                    assert np.max(np.abs(grid.features.data[idx] - expected)) <= 1e-12
                    idx += 1

    def test_indivisible_extents_rejected(self):
        emb = PatchEmbedder((4, 4, 4), d_v=8, seed=0)
        with pytest.raises(ShapeError):
            emb.embed_volume("s", np.zeros((10, 8, 8)))

    def test_patches_round_trip_order(self):
        vol = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
        patches, grid = extract_patches(vol, (2, 2, 2))
        assert grid == (2, 2, 1)
        assert np.array_equal(patches[0], vol[0:2, 0:2, 0:2].reshape(-1))
        assert np.array_equal(patches[1], vol[0:2, 2:4, 0:2].reshape(-1))
        assert np.array_equal(patches[2], vol[2:4, 0:2, 0:2].reshape(-1))


class TestObserve:
    def test_paper_scale_shapes(self):
        grid = PatchGrid("s", Array(rng(5).standard_normal((4096, 16))), (16, 16, 16))
        queries = StructureQuerySet(10, 16, 16, 16, 16, seed=6)
        result = observe(grid, queries)
        assert result.weights.shape == (10, 4096)
        assert result.tokens.shape == (10, 16)

    def test_rows_are_distributions(self):
        grid, queries = tiny_setup(7)
        result = observe(grid, queries)
        assert np.max(np.abs(result.weights.data.sum(axis=1) - 1.0)) <= 1e-9
        assert np.all(result.weights.data >= 0)

    def test_identical_patches_convexity(self):
        patch = rng(8).standard_normal(8)
        grid = PatchGrid("s", Array(np.tile(patch, (6, 1))), (6, 1, 1))
        queries = StructureQuerySet(3, 8, 8, 8, 8, seed=9, init_scale=0.3)
        result = observe(grid, queries)
        expected = patch @ queries.w_value.data
        for row in result.tokens.data:
            assert np.max(np.abs(row - expected)) <= 1e-12

    def test_matches_explicit_loop_oracle(self):
        grid, queries = tiny_setup(10)
        result = observe(grid, queries)
        F = grid.features.data
        Q = queries.queries.data
        scores = (Q @ queries.w_query.data) @ (F @ queries.w_key.data).T
        for i in range(Q.shape[0]):
            row = np.exp(scores[i] - scores[i].max())
            row /= row.sum()
            token = np.zeros(queries.w_value.data.shape[1])
            for j in range(F.shape[0]):
                token += row[j] * (F[j] @ queries.w_value.data)
            assert np.max(np.abs(result.weights.data[i] - row)) <= 1e-10
            assert np.max(np.abs(result.tokens.data[i] - token)) <= 1e-10

    def test_permutation_equivariance(self):
        grid, queries = tiny_setup(11)
        result = observe(grid, queries)
        perm = rng(12).permutation(grid.features.shape[0])
        grid_p = PatchGrid("s", Array(grid.features.data[perm]), grid.grid)
        result_p = observe(grid_p, queries)
        assert np.max(np.abs(result_p.weights.data - result.weights.data[:, perm])) <= 1e-10
        assert np.max(np.abs(result_p.tokens.data - result.tokens.data)) <= 1e-10

    @pytest.mark.parametrize("target", ["queries", "w_query", "w_key", "w_value", "features"])
    def test_gradients(self, target):
        grid, queries = tiny_setup(13)
        w = rng(14).standard_normal((3, 8))

        def f(x):
            g = PatchGrid("s", x if target == "features" else grid.features, grid.grid)
            result = observe(g, queries)
            return engine.total(engine.mul(result.tokens, Array(w)))

        if target == "features":
            x = Array(grid.features.data.copy(), requires_grad=True)
        else:
            x = getattr(queries, target)
        assert grad_check(f, x) <= 1e-3


class TestSelectPatches:
    def test_paper_scale_counts(self):
        grid = PatchGrid("s", Array(rng(15).standard_normal((4096, 16))), (16, 16, 16))
        queries = StructureQuerySet(10, 16, 16, 16, 16, seed=16)
        selected = select_patches(observe(grid, queries), grid, k=10)
        assert selected.features.shape == (100, 16)
        assert len(selected.provenance) == 100

    def test_uniform_row_tie_break(self):
        grid, _ = tiny_setup(17)
        weights = Array(np.full((2, 5), 0.2))
        tokens = Array(np.zeros((2, 8)))
        selected = select_patches(vision.AttentionResult(weights, tokens), grid, k=3)
        assert [p for _, p in selected.provenance[:3]] == [0, 1, 2]

    def test_matches_sort_oracle(self):
        r = rng(18)
        grid, queries = tiny_setup(19, n_patches=12)
        result = observe(grid, queries)
        selected = select_patches(result, grid, k=4)
        for s in range(3):
            row = result.weights.data[s]
            oracle = sorted(range(12), key=lambda j: (-row[j], j))[:4]
            got = [p for struct, p in selected.provenance if struct == s]
            assert got == oracle
            assert np.array_equal(selected.features.data[4 * s:4 * s + 4], grid.features.data[oracle])

    def test_descending_weight_order(self):
        grid, queries = tiny_setup(20, n_patches=9)
        result = observe(grid, queries)
        selected = select_patches(result, grid, k=5)
        for s in range(3):
            ws = [result.weights.data[s][p] for struct, p in selected.provenance if struct == s]
            assert all(a >= b for a, b in zip(ws, ws[1:]))

    def test_logit_shift_invariance(self):
        r = rng(21)
        logits = r.standard_normal(10)
        a1 = engine.softmax_rows(Array(logits)).data
        a2 = engine.softmax_rows(Array(logits + 7.5)).data
        order1 = np.argsort(-a1, kind="stable")[:4]
        order2 = np.argsort(-a2, kind="stable")[:4]
        assert np.array_equal(order1, order2)

    def test_k_bounds(self):
        grid, queries = tiny_setup(22)
        result = observe(grid, queries)
        with pytest.raises(ParameterError):
            select_patches(result, grid, k=6)
        with pytest.raises(ParameterError):
            select_patches(result, grid, k=0)
