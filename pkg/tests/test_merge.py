import numpy as np
import pytest

from oracles import grid_barycenter_diag, nelder_mead_mean
from splatc.core import DegenerateCovarianceError, GaussianPrimitive, SplatMap, axis_angle_quat, covariance_from_qs
from splatc.merge import (
    CHI2_3DOF_95,
    EVD_OFFSETS,
    GRAD_TAU,
    SLERP_T,
    MergeCandidate,
    MergeConfig,
    bin_voxels,
    enumerate_candidates,
    gate,
    mahalanobis_sq,
    merge_attributes,
    merge_covariance,
    merge_mean,
    merge_pass,
    stability_mask,
    w2_objective,
    w2_sq,
)
from splatc.optim import check_gradient


def prim(mean=(0, 0, 0), q=(1, 0, 0, 0), s=(0.01, 0.01, 0.01), idx=0, **kw):
    base = dict(opacity=0.8, color=[0.1, 0.2, 0.3], grad_stat=0.0, keyframe_index=0)
    base.update(kw)
    return GaussianPrimitive(mean=mean, rotation=q, scale=s, insertion_index=idx, **base)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_constants():
    assert GRAD_TAU == 0.001
    assert CHI2_3DOF_95 == 7.815
    assert SLERP_T == 0.5
    assert EVD_OFFSETS == (0.001, 0.002, 0.003)


class TestStabilityMask:
    cfg = MergeConfig(kf_window=(0, 10))

    def test_stable(self):
        assert stability_mask(SplatMap([prim(grad_stat=0.0005, keyframe_index=3)]), self.cfg).tolist() == [True]

    def test_threshold_is_strict(self):
        assert stability_mask(SplatMap([prim(grad_stat=0.001, keyframe_index=3)]), self.cfg).tolist() == [False]

    def test_outside_window(self):
        assert stability_mask(SplatMap([prim(grad_stat=0.0, keyframe_index=11)]), self.cfg).tolist() == [False]

    def test_empty(self):
        assert stability_mask(SplatMap([]), self.cfg).shape == (0,)


class TestBinVoxels:
    def bins(self, *means):
        m = SplatMap([prim(mean, idx=k) for k, mean in enumerate(means)])
        return bin_voxels(m, np.ones(len(m), bool), 0.05)

    def test_same_voxel(self):
        assert self.bins((0.01, 0, 0), (0.04, 0, 0)) == {(0, 0, 0): [0, 1]}

    def test_adjacent_voxels(self):
        assert self.bins((0.01, 0, 0), (0.06, 0, 0)) == {(0, 0, 0): [0], (1, 0, 0): [1]}

    def test_floor_for_negatives(self):
        assert list(self.bins((-0.01, 0, 0))) == [(-1, 0, 0)]

    def test_mask_respected(self):
        m = SplatMap([prim(idx=0), prim(idx=1)])
        assert bin_voxels(m, [True, False], 0.05) == {(0, 0, 0): [0]}

    def test_members_sorted_by_insertion_index(self):
        m = SplatMap([prim(idx=7), prim(idx=2), prim(idx=5)])
        assert bin_voxels(m, np.ones(3, bool), 0.05)[(0, 0, 0)] == [1, 2, 0]


class TestCandidates:
    @pytest.mark.parametrize("n, pairs", [(1, 0), (2, 1), (3, 3), (4, 6)])
    def test_pair_counts(self, n, pairs):
        assert len(enumerate_candidates([prim(idx=k) for k in range(n)])) == pairs

    def test_uses_earlier_covariance(self):
        gi = prim(s=(2, 1, 1), idx=0)
        gj = prim(mean=(2, 0, 0), s=(1, 1, 1), idx=1)
        (c,) = enumerate_candidates([gi, gj])
        assert (c.index_i, c.index_j) == (0, 1)
        assert c.d2 == pytest.approx(1.0)
        (sym,) = enumerate_candidates([gi, gj], symmetric=True)
        assert sym.d2 == pytest.approx(1.0)


class TestMahalanobis:
    def test_zero(self):
        assert mahalanobis_sq([1, 2, 3], [1, 2, 3], np.eye(3)) == 0.0

    def test_identity(self):
        assert mahalanobis_sq([1, 2, 2], [0, 0, 0], np.eye(3)) == pytest.approx(9.0)

    def test_diagonal(self):
        assert mahalanobis_sq([2, 0, 0], [0, 0, 0], np.diag([4.0, 1, 1])) == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateCovarianceError):
            mahalanobis_sq([1, 0, 0], [0, 0, 0], np.diag([1.0, 1.0, 0.0]))


@pytest.mark.parametrize("d2, ok", [(3.0, True), (7.815, False), (9.0, False)])
def test_gate(d2, ok):
    assert gate(MergeCandidate(0, 1, d2), 7.815) is ok


class TestMergeMean:
    def test_equal_covariances_midpoint(self, rng):
        cov = covariance_from_qs([0.9, 0.1, 0.3, 0.2], [0.3, 0.2, 0.1])
        a, b = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(merge_mean(a, cov, b, cov), (a + b) / 2, atol=1e-12)

    def test_precision_weighting(self):
        mu = merge_mean([0, 0, 0], np.eye(3), [5, 0, 0], 4 * np.eye(3))
        np.testing.assert_allclose(mu, [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(nelder_mead_mean([0, 0, 0], np.eye(3), [5, 0, 0], 4 * np.eye(3)), [1, 0, 0], atol=1e-6)

    def test_coincident_means_exact(self):
        mu = np.array([0.1, -0.7, 3.3])
        out = merge_mean(mu, np.diag([1.0, 2, 3]), mu, np.diag([0.5, 0.1, 9]))
        np.testing.assert_allclose(out, mu, rtol=1e-14)

    def test_symmetric_in_arguments(self, rng):
        ci = covariance_from_qs(rng.normal(size=4), rng.uniform(0.1, 1, 3))
        cj = covariance_from_qs(rng.normal(size=4), rng.uniform(0.1, 1, 3))
        a, b = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(merge_mean(a, ci, b, cj), merge_mean(b, cj, a, ci), atol=1e-12)


class TestW2:
    def test_zero(self):
        cov = np.diag([1.0, 2, 3])
        assert w2_sq(cov, cov) == pytest.approx(0.0, abs=1e-12)

    def test_isotropic(self):
        assert w2_sq(4 * np.eye(3), np.eye(3)) == pytest.approx(3.0, abs=1e-12)

    def test_diagonal_closed_form(self, rng):
        for _ in range(20):
            lam, mu = rng.uniform(0.01, 4, 3), rng.uniform(0.01, 4, 3)
            ref = np.sum((np.sqrt(lam) - np.sqrt(mu)) ** 2)
            assert w2_sq(np.diag(lam), np.diag(mu)) == pytest.approx(ref, abs=1e-10)

    def test_symmetric(self, rng):
        a = covariance_from_qs(rng.normal(size=4), rng.uniform(0.1, 1, 3))
        b = covariance_from_qs(rng.normal(size=4), rng.uniform(0.1, 1, 3))
        assert w2_sq(a, b) == pytest.approx(w2_sq(b, a), abs=1e-12)

    def test_gradient(self, rng):
        targets = [covariance_from_qs(rng.normal(size=4), rng.uniform(0.5, 2, 3)) for _ in range(2)]
        x = np.concatenate([rng.normal(size=4), rng.uniform(0.5, 2, 3)])
        assert check_gradient(lambda p: w2_objective(p, targets), x, 1e-6) < 1e-4


class TestMergeCovariance:
    def test_coincident(self):
        q, s = axis_angle_quat([1, 1, 0], 0.7), np.array([0.03, 0.02, 0.01])
        cov = covariance_from_qs(q, s)
        cm = merge_covariance(cov, cov, q, s, q, s)
        assert not cm.fallback
        assert rel_fro(cm.covariance, cov) < 1e-3

    def test_diagonal_barycenter(self):
        q = np.array([1.0, 0, 0, 0])
        ci, cj = np.eye(3), np.diag([9.0, 1, 1])
        cm = merge_covariance(ci, cj, q, [1, 1, 1], q, [3, 1, 1])
        assert rel_fro(cm.covariance, np.diag([4.0, 1, 1])) < 1e-3
        grid = grid_barycenter_diag(np.array([1.0, 1, 1]), np.array([9.0, 1, 1]))
        assert rel_fro(grid, np.diag([4.0, 1, 1])) < 1e-3

    def test_monotone_vs_initialization(self, rng):
        for _ in range(20):
            qi, qj = rng.normal(size=4), rng.normal(size=4)
            si, sj = rng.uniform(0.005, 0.05, 3), rng.uniform(0.005, 0.05, 3)
            cm = merge_covariance(covariance_from_qs(qi, si), covariance_from_qs(qj, sj), qi, si, qj, sj)
            assert cm.objective <= cm.initial_objective + 1e-15

    def test_scale_invariance(self):
        q = np.array([1.0, 0, 0, 0])
        small = merge_covariance(np.eye(3) * 1e-4, np.diag([9e-4, 1e-4, 1e-4]), q, [0.01] * 3, q, [0.03, 0.01, 0.01])
        assert rel_fro(small.covariance, np.diag([4e-4, 1e-4, 1e-4])) < 1e-3


class TestMergeAttributes:
    def test_older_wins(self):
        red = prim(color=[1, 0, 0], opacity=0.9, idx=0)
        blue = prim(color=[0, 0, 1], opacity=0.1, idx=1)
        color, opacity, _, _ = merge_attributes(red, blue)
        np.testing.assert_array_equal(color, [1, 0, 0])
        assert opacity == 0.9

    def test_identical(self):
        a, b = prim(idx=0, grad_stat=0.0003, keyframe_index=2), prim(idx=1, grad_stat=0.0003, keyframe_index=2)
        color, opacity, grad, kf = merge_attributes(a, b)
        np.testing.assert_array_equal(color, a.color)
        assert (opacity, grad, kf) == (a.opacity, 0.0003, 2)

    def test_max_gradient_min_keyframe(self):
        _, _, grad, kf = merge_attributes(
            prim(idx=0, grad_stat=0.0002, keyframe_index=5), prim(idx=1, grad_stat=0.0009, keyframe_index=3)
        )
        assert grad == 0.0009 and kf == 3

    def test_order_enforced(self):
        with pytest.raises(ValueError):
            merge_attributes(prim(idx=2), prim(idx=1))


class TestMergePass:
    def test_duplicate_collapse(self):
        q, s = axis_angle_quat([0, 0, 1], 0.3), (0.02, 0.01, 0.005)
        m = SplatMap([prim((0.02, 0.02, 0.02), q, s, idx=0), prim((0.02, 0.02, 0.02), q, s, idx=1)])
        out, rep = merge_pass(m)
        assert len(out) == 1 and rep.merges_performed == 1
        assert rel_fro(out[0].covariance, m[0].covariance) < 1e-3
        assert out[0].insertion_index == 2

    def test_far_apart_unchanged(self):
        m = SplatMap([prim((0.02, 0.02, 0.02), idx=0), prim((0.52, 0.02, 0.02), idx=1)])
        out, rep = merge_pass(m)
        assert len(out) == 2 and rep.merges_performed == 0
        np.testing.assert_array_equal(out[1].mean, m[1].mean)

    def test_unstable_not_merged(self):
        m = SplatMap([prim((0.02,) * 3, idx=0, grad_stat=0.01), prim((0.02,) * 3, idx=1)])
        assert len(merge_pass(m)[0]) == 2

    def test_jittered_duplicates(self, rng):
        prims = []
        for k in range(100):
            centre = (rng.integers(-20, 20, 3) + 0.5) * 0.05
            prims.append(prim(centre, idx=k, s=(0.01, 0.01, 0.01)))
        for k in range(100):
            base = prims[k]
            # offset of 0.5 sigma per axis gives d2 = 0.75 by construction
            offset = 0.005 * rng.choice([-1, 1], 3)
            assert mahalanobis_sq(base.mean + offset, base.mean, base.covariance) == pytest.approx(0.75)
            prims.append(prim(base.mean + offset, idx=100 + k, s=(0.01, 0.01, 0.01)))
        out, rep = merge_pass(SplatMap(prims))
        assert len(out) <= 110
        assert rep.max_merged_d2 < 7.815

    def test_greedy_picks_closest(self):
        a = prim((0.025, 0.025, 0.025), idx=0)
        b = prim((0.035, 0.025, 0.025), idx=1)
        c = prim((0.026, 0.025, 0.025), idx=2)
        _, rep = merge_pass(SplatMap([a, b, c]))
        assert rep.merges_performed == 1
        assert (rep.merges[0]["index_i"], rep.merges[0]["index_j"]) == (0, 2)

    def test_output_order_and_fresh_indices(self):
        m = SplatMap(
            [prim((0.02,) * 3, idx=0), prim((0.3, 0.3, 0.3), idx=1), prim((0.02,) * 3, idx=2)],
            next_insertion_index=10,
        )
        out, _ = merge_pass(m)
        assert [p.insertion_index for p in out] == [1, 10]

    def test_thread_count_does_not_change_result(self, rng):
        prims = [prim(rng.uniform(-0.2, 0.2, 3), idx=k, s=(0.02, 0.02, 0.02)) for k in range(200)]
        a, _ = merge_pass(SplatMap(prims), threads=1)
        b, _ = merge_pass(SplatMap(prims), threads=4)
        assert [p.insertion_index for p in a] == [p.insertion_index for p in b]
        np.testing.assert_array_equal(a.arrays().means, b.arrays().means)

    def test_empty(self):
        out, rep = merge_pass(SplatMap([]))
        assert len(out) == 0 and rep.primitives_after == 0
