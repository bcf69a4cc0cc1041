"""Loss functions: closed-form identities, invariances, gradient checks."""

import math

import numpy as np
import pytest

from duosent.errors import InputError
from duosent.losses import (
    LossConfig,
    align_loss,
    generative_loss,
    kl_divergence,
    mlm_loss,
    sim_loss,
    smlm_loss,
    total_loss,
)
from duosent.tensor import Tensor

from helpers import check_gradient


def brute_force_align(u: np.ndarray, v: np.ndarray) -> float:
    """Scalar oracle: plain-python evaluation of the pairwise objective."""
    b = u.shape[0]
    scores = np.array([[float(u[i] @ v[j]) for j in range(b)] for i in range(b)])
    loss = 0.0
    for j in range(b):
        row = np.exp(scores[j] - scores[j].max())
        loss -= math.log(row[j] / row.sum())
        col = np.exp(scores[:, j] - scores[:, j].max())
        loss -= math.log(col[j] / col.sum())
    return loss


def brute_force_sim(u: np.ndarray, v: np.ndarray) -> float:
    def row_softmax(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    a = row_softmax(u @ u.T)
    b = row_softmax(v @ v.T)
    loss = 0.0
    for j1 in range(u.shape[0]):
        for j2 in range(u.shape[0]):
            loss -= math.log(max(math.cos(math.pi / 2 * (a[j1, j2] - b[j1, j2])), 1e-7))
    return loss


class TestKlDivergence:
    def test_zero_when_label_equals_model(self):
        logits = Tensor(np.zeros((2, 6)), dtype=np.float64)
        q = np.full((2, 6), 1 / 6)
        assert abs(kl_divergence(q, logits).item()) < 1e-12

    def test_uniform3_vs_uniform5(self):
        # closed form: 3 terms of (1/3) log((1/3)/(1/5)) = log(5/3)
        logits = Tensor(np.zeros((1, 5)), dtype=np.float64)
        q = np.array([[1 / 3, 1 / 3, 1 / 3, 0.0, 0.0]])
        assert abs(kl_divergence(q, logits).item() - math.log(5 / 3)) <= 1e-9

    def test_matching_half_mass_contributes_zero(self):
        # a label entry of 1/2 facing a model probability of 1/2 adds nothing
        logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25]])), dtype=np.float64)
        q = np.array([[0.5, 0.25, 0.25]])
        assert abs(kl_divergence(q, logits).item()) < 1e-12

    def test_unnormalized_label_rejected(self):
        logits = Tensor(np.zeros((1, 4)), dtype=np.float64)
        with pytest.raises(InputError):
            kl_divergence(np.array([[0.5, 0.2, 0.1, 0.1]]), logits)

    def test_non_negative_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            v = int(rng.integers(2, 9))
            logits = Tensor(rng.normal(size=(3, v)), dtype=np.float64)
            q = rng.random((3, v))
            q /= q.sum(axis=1, keepdims=True)
            assert kl_divergence(q, logits).item() >= -1e-9

    def test_gradient(self):
        rng = np.random.default_rng(1)
        q = rng.random((3, 7))
        q /= q.sum(axis=1, keepdims=True)
        check_gradient(lambda x: kl_divergence(q, x), rng.normal(size=(3, 7)))


class TestGenerativeLoss:
    def test_equals_sum_of_two_kl_terms(self):
        rng = np.random.default_rng(2)
        ls = Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
        lt = Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
        q_src = [{1: 0.5, 2: 0.5}, {0: 1.0}]
        q_tgt = [{3: 1.0}, {4: 0.25, 5: 0.75}]
        out = generative_loss(ls, lt, q_src, q_tgt).item()
        from duosent.corpus import densify_labels

        expected = (
            kl_divergence(densify_labels(q_src, 8, np.float64), ls).item()
            + kl_divergence(densify_labels(q_tgt, 8, np.float64), lt).item()
        )
        assert abs(out - expected) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(3)
        q_src = [{1: 0.5, 2: 0.5}, {0: 1.0}]
        q_tgt = [{3: 1.0}, {4: 0.25, 5: 0.75}]
        lt = Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
        check_gradient(
            lambda x: generative_loss(x, lt, q_src, q_tgt), rng.normal(size=(2, 8))
        )


class TestSmlmLoss:
    def test_perfect_prediction_gives_zero(self):
        big = np.full((1, 5), -1e9)
        big[0, 2] = 0.0
        loss = smlm_loss(Tensor(big, dtype=np.float64), Tensor(big, dtype=np.float64), np.array([2]))
        assert abs(loss.item()) < 1e-9

    def test_uniform_prediction_gives_2_log_v(self):
        logits = Tensor(np.zeros((3, 7)), dtype=np.float64)
        loss = smlm_loss(logits, logits, np.array([1, 2, 3]))
        assert abs(loss.item() - 2 * math.log(7)) < 1e-12

    def test_equivalence_with_point_mass_generative_path(self):
        rng = np.random.default_rng(4)
        ls = rng.normal(size=(4, 9))
        lt = rng.normal(size=(4, 9))
        w_t = np.array([0, 3, 8, 5])
        direct = smlm_loss(Tensor(ls, dtype=np.float64), Tensor(lt, dtype=np.float64), w_t).item()
        point = [{int(t): 1.0} for t in w_t]
        via_kl = generative_loss(
            Tensor(ls, dtype=np.float64), Tensor(lt, dtype=np.float64), point, point
        ).item()
        assert abs(direct - via_kl) <= 1e-10

    def test_gradient(self):
        rng = np.random.default_rng(5)
        lt = Tensor(rng.normal(size=(2, 6)), dtype=np.float64)
        check_gradient(
            lambda x: smlm_loss(x, lt, np.array([1, 4])), rng.normal(size=(2, 6))
        )


class TestMlmLoss:
    def test_perfect_logits_give_zero(self):
        big = np.full((2, 5), -1e9)
        big[0, 1] = 0.0
        big[1, 3] = 0.0
        assert abs(mlm_loss(Tensor(big, dtype=np.float64), np.array([1, 3])).item()) < 1e-9

    def test_uniform_logits_give_log_v(self):
        logits = Tensor(np.zeros((4, 11)), dtype=np.float64)
        assert abs(mlm_loss(logits, np.array([0, 1, 2, 3])).item() - math.log(11)) < 1e-12

    def test_two_positions_average(self):
        rng = np.random.default_rng(6)
        l1 = rng.normal(size=(1, 5))
        l2 = rng.normal(size=(1, 5))
        a = mlm_loss(Tensor(l1, dtype=np.float64), np.array([2])).item()
        b = mlm_loss(Tensor(l2, dtype=np.float64), np.array([4])).item()
        both = mlm_loss(Tensor(np.vstack([l1, l2]), dtype=np.float64), np.array([2, 4])).item()
        assert abs(both - (a + b) / 2) < 1e-12

    def test_no_positions_contribute_zero(self):
        out = mlm_loss(Tensor(np.zeros((0, 5))), np.zeros(0, dtype=np.int64))
        assert out.item() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(7)
        check_gradient(lambda x: mlm_loss(x, np.array([0, 2, 4])), rng.normal(size=(3, 6)))


class TestAlignLoss:
    def test_single_pair_batch_is_zero(self):
        u = Tensor(np.array([[1.0, 2.0]]), dtype=np.float64)
        v = Tensor(np.array([[0.5, -1.0]]), dtype=np.float64)
        assert align_loss(u, v).item() == 0.0

    def test_orthonormal_two_pair_value(self):
        # hand evaluation: every softmax is e/(e+1), four terms total,
        # 4 * -log(e/(e+1)) = 4 * log(1 + 1/e) = 1.2530481...
        eye = np.eye(2)
        u = Tensor(eye, dtype=np.float64)
        v = Tensor(eye, dtype=np.float64)
        value = align_loss(u, v).item()
        assert abs(value - 1.25305) <= 1e-5
        assert abs(value - brute_force_align(eye, eye)) < 1e-12

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            b, d = int(rng.integers(1, 6)), int(rng.integers(2, 8))
            u = rng.normal(size=(b, d))
            v = rng.normal(size=(b, d))
            got = align_loss(Tensor(u, dtype=np.float64), Tensor(v, dtype=np.float64)).item()
            assert abs(got - brute_force_align(u, v)) < 1e-9

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(9)
        u = rng.normal(size=(4, 5))
        v = rng.normal(size=(4, 5))
        perm = [2, 0, 3, 1]
        a = align_loss(Tensor(u, dtype=np.float64), Tensor(v, dtype=np.float64)).item()
        b = align_loss(Tensor(u[perm], dtype=np.float64), Tensor(v[perm], dtype=np.float64)).item()
        assert abs(a - b) < 1e-9

    def test_strictly_decreases_when_positives_strengthen(self):
        # with u = identity the score matrix IS v^T: bump the diagonal only,
        # negatives frozen, and the loss must drop
        rng = np.random.default_rng(10)
        m = rng.normal(size=(3, 3))
        u = np.eye(3)
        base = align_loss(Tensor(u, dtype=np.float64), Tensor(m.T, dtype=np.float64)).item()
        bumped = align_loss(
            Tensor(u, dtype=np.float64), Tensor((m + 0.5 * np.eye(3)).T, dtype=np.float64)
        ).item()
        assert bumped < base

    def test_empty_batch_rejected(self):
        with pytest.raises(InputError):
            align_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(11)
        v = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        check_gradient(lambda u: align_loss(u, v), rng.normal(size=(3, 4)))
        u = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        check_gradient(lambda x: align_loss(u, x), rng.normal(size=(3, 4)))


class TestSimLoss:
    def test_zero_when_geometries_match(self):
        rng = np.random.default_rng(12)
        u = rng.normal(size=(4, 6))
        loss = sim_loss(Tensor(u, dtype=np.float64), Tensor(u.copy(), dtype=np.float64))
        assert loss.item() == 0.0

    def test_half_gap_closed_form(self):
        # a softmax-probability gap of 0.5 costs -log cos(pi/4) = 0.34657
        assert abs(-math.log(math.cos(math.pi / 4)) - 0.34657) <= 1e-5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            b, d = int(rng.integers(2, 6)), int(rng.integers(2, 8))
            u = rng.normal(size=(b, d))
            v = rng.normal(size=(b, d))
            got = sim_loss(Tensor(u, dtype=np.float64), Tensor(v, dtype=np.float64)).item()
            assert abs(got - brute_force_sim(u, v)) < 1e-9

    def test_symmetric_in_u_and_v(self):
        rng = np.random.default_rng(14)
        u = rng.normal(size=(3, 5))
        v = rng.normal(size=(3, 5))
        a = sim_loss(Tensor(u, dtype=np.float64), Tensor(v, dtype=np.float64)).item()
        b = sim_loss(Tensor(v, dtype=np.float64), Tensor(u, dtype=np.float64)).item()
        assert abs(a - b) < 1e-12

    def test_clamp_keeps_saturated_batches_finite(self):
        # huge norms saturate the softmax: gaps hit +-1 and cos -> 0
        u = Tensor(np.array([[100.0, 0.0], [0.0, 100.0]]), dtype=np.float64)
        v = Tensor(np.array([[0.0, 100.0], [100.0, 0.0]]), dtype=np.float64)
        assert math.isfinite(sim_loss(u, v).item())

    def test_gradient(self):
        rng = np.random.default_rng(15)
        v = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        check_gradient(lambda u: sim_loss(u, v), rng.normal(size=(3, 4)))


class TestTotalLoss:
    def _scalars(self, g, a, s):
        return (
            Tensor(np.array(g), dtype=np.float64),
            Tensor(np.array(a), dtype=np.float64),
            Tensor(np.array(s), dtype=np.float64),
        )

    def test_weighted_arithmetic(self):
        g, a, s = self._scalars(1.0, 0.5, 0.25)
        cfg = LossConfig(weights=(1.0, 2.0, 2.0), reduction="paper_sum")
        total, report = total_loss(g, a, s, cfg, batch_size=1)
        assert abs(total.item() - 2.5) < 1e-12
        assert report.total == report.generative * 1 + report.align * 2 + report.sim * 2

    def test_disabled_components_report_zero(self):
        g, a, s = self._scalars(1.0, 0.5, 0.25)
        cfg = LossConfig(use_align=False, use_sim=False)
        total, report = total_loss(g, a, s, cfg, batch_size=2)
        assert report.align == 0.0 and report.sim == 0.0
        assert abs(total.item() - 1.0) < 1e-12

    def test_generative_only_weights(self):
        g, a, s = self._scalars(0.7, 0.5, 0.25)
        cfg = LossConfig(weights=(1.0, 0.0, 0.0))
        total, _ = total_loss(g, a, s, cfg, batch_size=4)
        assert abs(total.item() - 0.7) < 1e-12

    def test_mean_reduction_divides_contrastive_by_batch(self):
        g, a, s = self._scalars(0.0, 8.0, 4.0)
        cfg = LossConfig(weights=(1.0, 1.0, 1.0), reduction="mean")
        _, report = total_loss(g, a, s, cfg, batch_size=4)
        assert report.align == 2.0 and report.sim == 1.0

    def test_weight_scaling_is_linear(self):
        g, a, s = self._scalars(1.0, 1.0, 1.0)
        cfg1 = LossConfig(weights=(1.0, 1.0, 1.0), reduction="paper_sum")
        cfg2 = LossConfig(weights=(1.0, 3.0, 1.0), reduction="paper_sum")
        _, r1 = total_loss(g, a, s, cfg1, batch_size=1)
        _, r2 = total_loss(g, a, s, cfg2, batch_size=1)
        assert abs((r2.total - r1.total) - 2.0 * r1.align) < 1e-12

    def test_invalid_configs_rejected(self):
        with pytest.raises(InputError):
            LossConfig(weights=(1.0, -1.0, 0.0))
        with pytest.raises(InputError):
            LossConfig(generative_mode="nope")
        with pytest.raises(InputError):
            LossConfig(reduction="median")
