"""Structural patch machinery: SLIC partitions, patch hashing, Hamming
graphs against a nested-loop oracle, and the learned pair aggregation."""

import numpy as np
import pytest

from chexgraph import autodiff as ad
from chexgraph.gradcheck import relative_gradient_error
from chexgraph.nn import Linear
from chexgraph.structure import (HASH_BITS, PatchGraph, PatchHashes,
                                 aggregate_patch_graph, hamming, hash_patches,
                                 intra_image_loss, pairwise_weight_matrix,
                                 patch_graph, patch_hash, rebalance_patches,
                                 slic_superpixels)

RNG = np.random.default_rng(77)


def _check_partition(patches, h, w):
    lm = patches.label_map
    assert lm.shape == (h, w)
    values = np.unique(lm)
    np.testing.assert_array_equal(values, np.arange(patches.m))
    counts = np.bincount(lm.ravel(), minlength=patches.m)
    assert (counts > 0).all()


class TestSLIC:
    def test_single_patch(self):
        img = RNG.random((32, 32))
        p = slic_superpixels(img, 1)
        assert p.m == 1
        _check_partition(p, 32, 32)

    def test_uniform_image_quadrants(self):
        img = np.full((64, 64), 0.5)
        p = slic_superpixels(img, 4)
        assert p.m == 4
        _check_partition(p, 64, 64)
        counts = np.bincount(p.label_map.ravel())
        # near-equal contiguous regions: each within 20% of 1024 px
        assert all(abs(c - 1024) <= 0.2 * 1024 for c in counts)

    def test_deterministic(self):
        img = RNG.random((48, 48))
        a = slic_superpixels(img, 9)
        b = slic_superpixels(img, 9)
        np.testing.assert_array_equal(a.label_map, b.label_map)

    def test_patch_count_within_factor_two(self):
        for _ in range(10):
            img = RNG.random((64, 64))
            m = int(RNG.integers(4, 25))
            p = slic_superpixels(img, m)
            assert m / 2 <= p.m <= 2 * m
            _check_partition(p, 64, 64)

    def test_m_larger_than_pixels(self):
        with pytest.raises(ValueError):
            slic_superpixels(np.zeros((4, 4)), 17)

    def test_follows_intensity_structure(self):
        # Sharp vertical step: boundaries should hug the step, so almost no
        # patch straddles it by much.
        img = np.zeros((40, 40))
        img[:, 20:] = 1.0
        p = slic_superpixels(img, 8, compactness=0.1)
        for value in range(p.m):
            region = img[p.label_map == value]
            assert region.std() < 0.3

    def test_labels_sorted_by_centroid(self):
        img = RNG.random((48, 48))
        p = slic_superpixels(img, 9)
        ys, xs = np.mgrid[0:48, 0:48]
        cents = [(ys[p.label_map == v].mean(), xs[p.label_map == v].mean())
                 for v in range(p.m)]
        assert cents == sorted(cents)


class TestRebalance:
    def test_exact_count_merge(self):
        img = RNG.random((64, 64))
        p = slic_superpixels(img, 20)
        q = rebalance_patches(p, 16)
        assert q.m == 16
        _check_partition(q, 64, 64)

    def test_exact_count_split(self):
        img = RNG.random((64, 64))
        p = slic_superpixels(img, 6)
        q = rebalance_patches(p, 16)
        assert q.m == 16
        _check_partition(q, 64, 64)

    def test_noop_when_already_exact(self):
        img = np.full((64, 64), 0.5)
        p = slic_superpixels(img, 4)
        q = rebalance_patches(p, 4)
        np.testing.assert_array_equal(p.label_map, q.label_map)


class TestPatchHash:
    def test_identical_patches_equal_codes(self):
        img = RNG.random((32, 32))
        mask = np.zeros((32, 32), dtype=bool)
        mask[4:12, 4:12] = True
        assert patch_hash(img, mask) == patch_hash(img.copy(), mask.copy())

    def test_constant_patch_canonical_code(self):
        # Regression anchor: a constant patch thresholds to all zeros.
        img = np.full((16, 16), 0.3)
        mask = np.zeros((16, 16), dtype=bool)
        mask[2:10, 3:11] = True
        assert patch_hash(img, mask) == np.uint64(0)

    def test_translation_invariance(self):
        img = np.zeros((40, 40))
        patch = RNG.random((8, 8))
        img[4:12, 4:12] = patch
        img[20:28, 25:33] = patch
        m1 = np.zeros_like(img, dtype=bool)
        m1[4:12, 4:12] = True
        m2 = np.zeros_like(img, dtype=bool)
        m2[20:28, 25:33] = True
        assert hamming(patch_hash(img, m1), patch_hash(img, m2)) == 0

    def test_empty_patch_rejected(self):
        with pytest.raises(ValueError):
            patch_hash(np.zeros((8, 8)), np.zeros((8, 8), dtype=bool))

    def test_stability_across_runs(self):
        img = RNG.random((64, 64))
        p = rebalance_patches(slic_superpixels(img, 16), 16)
        h1 = hash_patches(img, p)
        h2 = hash_patches(img, p)
        np.testing.assert_array_equal(h1.codes, h2.codes)


class TestHamming:
    def test_equal_zero(self):
        assert hamming(np.uint64(12345), np.uint64(12345)) == 0

    def test_small_example(self):
        assert hamming(np.uint64(0b1010), np.uint64(0b1001)) == 2

    def test_symmetry(self):
        for _ in range(100):
            a = np.uint64(RNG.integers(0, 2 ** 63))
            b = np.uint64(RNG.integers(0, 2 ** 63))
            assert hamming(a, b) == hamming(b, a)

    def test_range(self):
        assert hamming(np.uint64(0), np.uint64(2 ** 64 - 1)) == 64


class TestPatchGraph:
    def test_same_image_zero_diagonal(self):
        codes = PatchHashes(codes=RNG.integers(0, 2 ** 63, size=8).astype(np.uint64))
        g = patch_graph(codes, codes)
        np.testing.assert_array_equal(np.diag(g.values), np.zeros(8))

    def test_all_identical_zero_matrix(self):
        codes = PatchHashes(codes=np.full(5, 77, dtype=np.uint64))
        np.testing.assert_array_equal(patch_graph(codes, codes).values, np.zeros((5, 5)))

    def test_hand_popcounts(self):
        a = PatchHashes(codes=np.array([0b00, 0b11], dtype=np.uint64))
        b = PatchHashes(codes=np.array([0b00, 0b01], dtype=np.uint64))
        np.testing.assert_array_equal(patch_graph(a, b).values, [[0, 1], [2, 1]])

    def test_matches_nested_loop_oracle(self):
        for _ in range(20):
            m = int(RNG.integers(2, 12))
            a = PatchHashes(codes=RNG.integers(0, 2 ** 63, size=m).astype(np.uint64))
            b = PatchHashes(codes=RNG.integers(0, 2 ** 63, size=m).astype(np.uint64))
            got = patch_graph(a, b).values
            want = np.array([[bin(int(a.codes[i]) ^ int(b.codes[j])).count("1")
                              for j in range(m)] for i in range(m)], dtype=np.float64)
            np.testing.assert_array_equal(got, want)

    def test_size_mismatch(self):
        a = PatchHashes(codes=np.zeros(3, dtype=np.uint64))
        b = PatchHashes(codes=np.zeros(4, dtype=np.uint64))
        with pytest.raises(ValueError):
            patch_graph(a, b)

    def test_entries_in_range(self):
        a = PatchHashes(codes=RNG.integers(0, 2 ** 63, size=6).astype(np.uint64))
        b = PatchHashes(codes=RNG.integers(0, 2 ** 63, size=6).astype(np.uint64))
        v = patch_graph(a, b).values
        assert v.min() >= 0 and v.max() <= HASH_BITS
        np.testing.assert_array_equal(v, np.round(v))


class TestAggregation:
    def test_zero_weights_give_zero(self):
        agg = Linear(9, 1, init="zeros", dtype=np.float64)
        g = PatchGraph(values=RNG.integers(0, 65, size=(3, 3)).astype(float))
        assert aggregate_patch_graph(g, agg).item() == 0.0

    def test_uniform_weights_saturated_graph(self):
        # weight row all 1/m^2, bias 0, all entries 64 (normalized 1) -> 1.0
        m = 3
        agg = Linear(m * m, 1, init="zeros", dtype=np.float64)
        agg.w.data[:] = 1.0 / (m * m)
        g = PatchGraph(values=np.full((m, m), 64.0))
        assert aggregate_patch_graph(g, agg).item() == pytest.approx(1.0, rel=1e-12)

    def test_flatten_size_mismatch(self):
        agg = Linear(16, 1, init="zeros", dtype=np.float64)
        with pytest.raises(ValueError):
            aggregate_patch_graph(PatchGraph(values=np.zeros((3, 3))), agg)

    def test_pairwise_matrix_matches_per_pair(self):
        m = 4
        agg = Linear(m * m, 1, init="zeros", dtype=np.float64)
        agg.w.data[:] = RNG.standard_normal((m * m, 1))
        agg.b.data[:] = 0.3
        hashes = [PatchHashes(codes=RNG.integers(0, 2 ** 63, size=m).astype(np.uint64))
                  for _ in range(3)]
        mat = pairwise_weight_matrix(hashes, agg).data
        for u in range(3):
            for v in range(3):
                want = aggregate_patch_graph(patch_graph(hashes[u], hashes[v]), agg)
                assert mat[u, v] == pytest.approx(want.item(), rel=1e-12)


class TestIntraImageLoss:
    def _setup(self, n=2, m=4):
        agg = Linear(m * m, 1, init="zeros", dtype=np.float64)
        agg.w.data[:] = 0.05 * RNG.standard_normal((m * m, 1))
        hashes = [PatchHashes(codes=RNG.integers(0, 2 ** 63, size=m).astype(np.uint64))
                  for _ in range(n)]
        feats = [ad.parameter(RNG.standard_normal((2, 2, 2))) for _ in range(n)]
        return agg, hashes, feats

    def test_identical_features_zero(self):
        agg, hashes, _ = self._setup()
        f = RNG.standard_normal((2, 3))
        feats = [ad.tensor(f.copy()), ad.tensor(f.copy())]
        raw = pairwise_weight_matrix(hashes, agg)
        assert intra_image_loss(raw, feats).item() == 0.0

    def test_uniform_weights_hand_value(self):
        agg = Linear(16, 1, init="zeros", dtype=np.float64)  # zeros -> uniform softmax
        hashes = [PatchHashes(codes=RNG.integers(0, 2 ** 63, size=4).astype(np.uint64))
                  for _ in range(2)]
        a = ad.tensor(RNG.standard_normal((3, 4)))
        b = ad.tensor(RNG.standard_normal((3, 4)))
        d = float(np.linalg.norm(a.data - b.data))
        raw = pairwise_weight_matrix(hashes, agg)
        got = intra_image_loss(raw, [a, b]).item()
        assert got == pytest.approx(d / 4, rel=1e-12)

    def test_gradients_wrt_aggregator_and_features(self):
        agg, hashes, feats = self._setup()

        def f():
            raw = pairwise_weight_matrix(hashes, agg)
            return intra_image_loss(raw, feats)

        err = relative_gradient_error(f, [agg.w, agg.b, *feats])
        assert err < 1e-6

    def test_loss_nonnegative(self):
        for _ in range(20):
            agg, hashes, feats = self._setup(n=3)
            raw = pairwise_weight_matrix(hashes, agg)
            assert intra_image_loss(raw, feats).item() >= 0.0


class TestHashCache:
    def test_cache_round_trip_and_reuse(self, tmp_path):
        from chexgraph.model import ChexGraphModel, ModelConfig
        model = ChexGraphModel(ModelConfig(), np.random.default_rng(0))
        img = RNG.random((3, 64, 64)).astype(np.float32)
        p1, h1 = model.image_patch_hashes(img, cache_dir=tmp_path, image_id="a.png")
        files = list(tmp_path.glob("*.npz"))
        assert len(files) == 1
        p2, h2 = model.image_patch_hashes(img, cache_dir=tmp_path, image_id="a.png")
        np.testing.assert_array_equal(p1.label_map, p2.label_map)
        np.testing.assert_array_equal(h1.codes, h2.codes)

    def test_cache_key_tracks_config(self, tmp_path):
        from chexgraph.model import ChexGraphModel, ModelConfig
        a = ChexGraphModel(ModelConfig(), np.random.default_rng(0))
        b = ChexGraphModel(ModelConfig(patch_count=9), np.random.default_rng(0))
        img = RNG.random((3, 64, 64)).astype(np.float32)
        a.image_patch_hashes(img, cache_dir=tmp_path, image_id="a.png")
        b.image_patch_hashes(img, cache_dir=tmp_path, image_id="a.png")
        assert len(list(tmp_path.glob("*.npz"))) == 2
