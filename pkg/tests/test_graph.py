import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msgm.graph import (
    GraphConfigError,
    MixParams,
    RegionMap,
    batch_mean_mix,
    build_global_adjacency,
    build_local_adjacency,
    init_prior,
    load_region_table,
    region_map_for,
)
from msgm.tensor import Tensor

SHIPPED = ("seed62_7", "seed62_10", "seed62_17", "std32_7")


def hand_percentile(values, q):
    """Linear interpolation between closest ranks, written out by hand."""
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def hand_pearson(a, b):
    a = (a - a.mean()) / (a.std() + 1e-6)
    b = (b - b.mean()) / (b.std() + 1e-6)
    return float(np.mean(a * b))


class TestMixing:
    def test_zero_mix(self, rng):
        mix = MixParams(Tensor(np.zeros((14, 2))), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(batch_mean_mix(rng.random((2, 2, 2, 7)), mix), 0)

    def test_delta_selector(self, rng):
        feats = rng.random((2, 2, 2, 7))  # b, n_k, c, f
        W = np.zeros((14, 2))
        W[0, 0] = 1.0  # segment 0, delta
        W[7, 1] = 1.0  # segment 1, delta
        out = batch_mean_mix(feats, MixParams(Tensor(W), Tensor(np.zeros((2, 2)))))
        np.testing.assert_allclose(out, feats.mean(axis=0)[:, :, 0].T, atol=1e-15)

    def test_singleton_batch(self, rng):
        feats = rng.random((1, 3, 4, 7))
        mix = MixParams.init(4, 3, 7, rng)
        twice = np.concatenate([feats, feats])
        np.testing.assert_allclose(batch_mean_mix(feats, mix), batch_mean_mix(twice, mix), atol=1e-15)

    def test_shape_mismatch(self, rng):
        with pytest.raises(GraphConfigError):
            batch_mean_mix(rng.random((2, 3, 4, 7)), MixParams.init(4, 2, 7, rng))


class TestGlobalAdjacency:
    def test_identical_rows(self):
        w, _ = build_global_adjacency(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(w, [[0, 1], [1, 0]])

    def test_percentile_convention(self):
        assert hand_percentile([0.1, 0.2, 0.3, 0.4], 75) == pytest.approx(0.325)
        assert np.percentile([0.1, 0.2, 0.3, 0.4], 75) == pytest.approx(0.325)

    def test_thresholds_match_hand_oracle(self, rng):
        u = rng.standard_normal((6, 5))
        _, stats = build_global_adjacency(u)
        pairs = [(i, j) for i in range(6) for j in range(i + 1, 6)]
        kappas = [hand_pearson(u[i], u[j]) for i, j in pairs]
        dists = [np.abs(u[i] - u[j]).sum() for i, j in pairs]
        eu = np.array([np.linalg.norm(u[i] - u[j]) for i, j in pairs])
        assert stats.kappa_threshold == pytest.approx(hand_percentile(kappas, 75), abs=1e-12)
        assert stats.dist_threshold == pytest.approx(hand_percentile(dists, 25), abs=1e-12)
        assert stats.sigma == pytest.approx((eu.mean() + eu.std()) / 2, abs=1e-12)

    def test_weights_match_hand_oracle(self, rng):
        u = rng.standard_normal((7, 4))
        w, st_ = build_global_adjacency(u)
        for i in range(7):
            for j in range(7):
                if i == j:
                    assert w[i, j] == 0
                    continue
                gate = hand_pearson(u[i], u[j]) >= st_.kappa_threshold - 1e-12 and \
                    np.abs(u[i] - u[j]).sum() <= st_.dist_threshold + 1e-12
                ref = np.exp(-np.sum((u[i] - u[j]) ** 2) / (2 * st_.sigma**2)) if gate else 0.0
                assert w[i, j] == pytest.approx(ref, abs=1e-12)

    def test_properties_over_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c, m = rng.integers(4, 16), rng.integers(3, 12)
            w, _ = build_global_adjacency(rng.standard_normal((c, m)))
            off = w[~np.eye(c, dtype=bool)]
            assert np.array_equal(w, w.T)
            assert np.all(np.diag(w) == 0)
            assert np.all((w >= 0) & (w <= 1))
            assert np.mean(off == 0) >= 0.25

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
    def test_shift_invariance(self, seed, shift):
        u = np.random.default_rng(seed).standard_normal((8, 6))
        w0, _ = build_global_adjacency(u)
        w1, _ = build_global_adjacency(u + shift)
        assert np.max(np.abs(w0 - w1)) < 1e-9

    def test_too_few_rows(self):
        with pytest.raises(GraphConfigError):
            build_global_adjacency(np.ones((1, 3)))


class TestLocalAdjacency:
    def test_single_region_keeps_global(self, rng):
        w, _ = build_global_adjacency(rng.standard_normal((5, 4)))
        regions = RegionMap(tuple("abcde"), (0,) * 5)
        np.testing.assert_array_equal(build_local_adjacency(w, regions), w)

    def test_singleton_regions_empty(self, rng):
        w, _ = build_global_adjacency(rng.standard_normal((5, 4)))
        regions = RegionMap(tuple("abcde"), tuple(range(5)))
        np.testing.assert_array_equal(build_local_adjacency(w, regions), 0)

    def test_two_regions(self):
        w = np.ones((4, 4)) - np.eye(4)
        out = build_local_adjacency(w, RegionMap(tuple("abcd"), (0, 0, 1, 1)))
        nz = {(i, j) for i, j in zip(*np.nonzero(out)) if i < j}
        assert nz == {(0, 1), (2, 3)}

    def test_local_implies_global_and_same_region(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            c = int(rng.integers(4, 12))
            regions = RegionMap(tuple(str(i) for i in range(c)), tuple(int(r) for r in rng.integers(0, 3, c)))
            w, _ = build_global_adjacency(rng.standard_normal((c, 5)))
            wl = build_local_adjacency(w, regions)
            nz = wl != 0
            assert np.all(w[nz] != 0)
            assert np.all(regions.mask()[nz])


class TestPriors:
    def test_copies_identical_and_shape(self, rng):
        table = load_region_table("seed62_7")
        names = tuple(ch for chans in table.values() for ch in chans)
        assert len(names) == 62
        regions = region_map_for(names, table)
        feats = rng.random((3, 2, 62, 7))
        prior = init_prior(feats, MixParams.init(62, 2, 7, rng), regions)
        assert prior.G_global.shape == prior.G_local.shape == (2, 62, 62)
        assert np.array_equal(prior.G_global.data[0], prior.G_global.data[1])
        assert np.array_equal(prior.G_local.data[0], prior.G_local.data[1])

    def test_copies_may_diverge_after_step(self, rng):
        regions = RegionMap(tuple("abcdef"), (0, 0, 0, 1, 1, 1))
        prior = init_prior(rng.random((4, 3, 6, 7)), MixParams.init(6, 3, 7, rng), regions)
        step = np.zeros((2, 6, 6))
        step[0] = 0.1 * rng.random((6, 6))
        prior.G_global.assign(prior.G_global.data + step)
        prior.project()
        assert not np.array_equal(prior.G_global.data[0], prior.G_global.data[1])

    def test_project_restores_constraints(self, rng):
        regions = RegionMap(tuple("abcd"), (0, 0, 1, 1))
        prior = init_prior(rng.random((4, 2, 4, 7)), MixParams.init(4, 2, 7, rng), regions)
        prior.G_local.assign(rng.standard_normal((2, 4, 4)))
        prior.G_global.assign(rng.standard_normal((2, 4, 4)))
        prior.project()
        for G in (prior.G_local.data, prior.G_global.data):
            assert np.all(G >= 0)
            assert np.all(G[:, np.arange(4), np.arange(4)] == 0)
        assert np.all(prior.G_local.data[:, ~regions.mask()] == 0)


class TestRegionMaps:
    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_maps_partition(self, name):
        table = load_region_table(name)
        chans = [c.upper() for v in table.values() for c in v]
        assert len(chans) == len(set(chans))
        assert len(chans) == (32 if name.startswith("std32") else 62)

    def test_region_counts(self):
        assert [len(load_region_table(n)) for n in SHIPPED] == [7, 10, 17, 7]

    def test_unmapped_channel_named(self):
        with pytest.raises(GraphConfigError, match="XYZ"):
            region_map_for(["FP1", "XYZ"], "std32_7")

    def test_case_insensitive(self):
        assert region_map_for(["fp1", "Fp2"], "std32_7").region_ids == region_map_for(["FP1", "FP2"], "std32_7").region_ids

    def test_custom_file(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"name": "m", "regions": {"x": ["A", "B"], "y": ["C"]}}))
        assert region_map_for(["C", "A"], str(p)).region_ids == (1, 0)

    def test_unknown_map(self):
        with pytest.raises(GraphConfigError):
            load_region_table("nope")
