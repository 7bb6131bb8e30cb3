import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dsareid.fusion import (ClassifierHead, ConcatFC, FeatureBundle, LOSS_COLUMNS, combine, fuse,
                            hard_mining, id_loss, pairwise_euclidean, smoothed_cross_entropy,
                            total_loss, triplet_batch_hard)
from dsareid.model import DSAReID, ModelConfig
from oracles import finite_difference, rel_error, smoothed_ce, triplet_exhaustive

torch.set_default_dtype(torch.float32)


class TestFuse:
    def test_zero_partner(self):
        f = torch.randn(3, 8)
        assert torch.equal(fuse(f, torch.zeros_like(f)), f)

    def test_cancellation(self):
        f = torch.randn(3, 8)
        assert torch.all(fuse(f, -f) == 0)

    def test_elementwise(self):
        f, d = torch.randn(5), torch.randn(5)
        z = fuse(f, d)
        for k in range(5):
            assert z[k] == f[k] + d[k]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            fuse(torch.zeros(4), torch.zeros(5))


class TestConcatFC:
    def test_length_preserved(self):
        assert ConcatFC(6)(torch.randn(2, 6), torch.randn(2, 6)).shape == (2, 6)

    def test_zero_weights(self):
        m = ConcatFC(4)
        with torch.no_grad():
            m.fc.weight.zero_()
            m.fc.bias.zero_()
        assert torch.all(m(torch.randn(3, 4), torch.randn(3, 4)) == 0)

    def test_matrix_vector_oracle(self):
        m = ConcatFC(3).double()
        f, d = torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
        W, b = m.fc.weight.detach().numpy(), m.fc.bias.detach().numpy()
        x = np.concatenate([f.numpy(), d.numpy()])
        ref = [sum(W[i, j] * x[j] for j in range(6)) + b[i] for i in range(3)]
        assert np.allclose(m(f, d).detach().numpy(), ref, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ConcatFC(4)(torch.zeros(1, 4), torch.zeros(1, 3))


class TestClassifier:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20)
    def test_probabilities_sum_to_one(self, seed):
        torch.manual_seed(seed)
        head = ClassifierHead(16, 7, hidden=8)
        p = head.probabilities(torch.randn(4, 16) * 10)
        assert torch.all(p >= 0)
        assert torch.allclose(p.sum(-1), torch.ones(4), atol=1e-6)

    def test_bias_flag(self):
        assert ClassifierHead(4, 3, bias=False).fc2.bias is None


class TestIdLoss:
    def test_uniform_prediction_is_log_c(self):
        for eps in (0.0, 0.1, 0.5):
            logits = torch.zeros(3, 6)
            loss = smoothed_cross_entropy(logits, torch.tensor([0, 3, 5]), eps)
            assert abs(loss.item() - math.log(6)) < 1e-6

    def test_hand_computed_four_classes(self):
        p = [0.1, 0.6, 0.2, 0.1]
        logits = torch.log(torch.tensor([p], dtype=torch.float64))
        # -sum q'_k ln p_k with q' = (0.025, 0.925, 0.025, 0.025)
        expected = -(0.025 * math.log(0.1) + 0.925 * math.log(0.6)
                     + 0.025 * math.log(0.2) + 0.025 * math.log(0.1))
        assert abs(smoothed_cross_entropy(logits, torch.tensor([1]), 0.1).item() - expected) < 1e-12

    def test_confident_without_smoothing_goes_to_zero(self):
        logits = torch.tensor([[60.0, 0.0, 0.0]])
        assert smoothed_cross_entropy(logits, torch.tensor([0]), 0.0).item() < 1e-20

    def test_matches_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            C = int(rng.integers(2, 9))
            logits = torch.tensor(rng.normal(size=(1, C)) * 3)
            y = int(rng.integers(0, C))
            p = torch.softmax(logits, -1)[0].tolist()
            got = smoothed_cross_entropy(logits, torch.tensor([y]), 0.1).item()
            assert abs(got - smoothed_ce(p, y, 0.1)) < 1e-9

    def test_bad_label(self):
        with pytest.raises(ValueError):
            smoothed_cross_entropy(torch.zeros(1, 3), torch.tensor([3]))
        with pytest.raises(ValueError):
            smoothed_cross_entropy(torch.zeros(1, 3), torch.tensor([0]), epsilon=1.0)

    def test_id_loss_uses_head(self):
        head = ClassifierHead(4, 3, hidden=5)
        x, y = torch.randn(2, 4), torch.tensor([0, 2])
        assert torch.equal(id_loss(head, x, y), smoothed_cross_entropy(head(x), y))


def pk_labels(P, K):
    return torch.arange(P).repeat_interleave(K)


class TestTriplet:
    def test_identical_embeddings_give_margin(self):
        loss = triplet_batch_hard(torch.ones(8, 3), pk_labels(4, 2), 0.3)
        assert abs(loss.item() - 0.3) < 1e-6

    def test_separated_clusters_give_zero(self):
        emb = torch.tensor([[0.0, 0], [0, 0], [1, 0], [1, 0]])
        assert triplet_batch_hard(emb, pk_labels(2, 2), 0.3).item() == 0.0

    def test_matches_exhaustive(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            X = rng.normal(size=(16, 5))
            lab = pk_labels(4, 4)
            got = triplet_batch_hard(torch.tensor(X), lab, 0.3).item()
            assert abs(got - triplet_exhaustive(X, lab.tolist(), 0.3)) < 1e-9

    def test_needs_positive(self):
        with pytest.raises(ValueError):
            triplet_batch_hard(torch.randn(3, 2), torch.tensor([0, 0, 1]))

    def test_negative_margin(self):
        with pytest.raises(ValueError):
            triplet_batch_hard(torch.randn(4, 2), pk_labels(2, 2), -0.1)

    def test_ties_break_to_lowest_index(self):
        dist = torch.zeros(4, 4)
        pos, neg = hard_mining(dist, pk_labels(2, 2))
        assert pos.tolist() == [1, 0, 3, 2] and neg.tolist() == [2, 2, 0, 0]

    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
    @settings(max_examples=25)
    def test_mining_scale_invariant(self, seed, lam):
        X = torch.tensor(np.random.default_rng(seed).normal(size=(8, 3)))
        lab = pk_labels(4, 2)
        a = hard_mining(pairwise_euclidean(X), lab)
        b = hard_mining(pairwise_euclidean(X * lam), lab)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_combine_all_ones():
    one = torch.tensor(1.0)
    rep = combine(one, [one] * 8, one, one, one, one)
    assert rep.total.item() == pytest.approx(5.5)
    assert combine(one, [one] * 8, one, one, one, one, (0, 0, 0)).total.item() == 0


def test_total_loss_recomposes_from_terms():
    torch.manual_seed(0)
    cfg = ModelConfig(num_classes=4, input_size=(64, 32), S=16, width_divisor=16)
    model = DSAReID(cfg)
    labels = pk_labels(4, 2)
    b = model(torch.randn(8, 3, 64, 32), torch.randn(8, 24, 3, 16, 16))
    rep = total_loss(b, model.heads, labels)
    row = rep.row()
    assert set(row) == set(LOSS_COLUMNS)
    parts = [row[f"id_mf_part{i}"] for i in range(1, 9)]
    id_mf = (row["id_mf_global"] + sum(parts)) / 9
    assert row["id_mf"] == pytest.approx(id_mf, rel=1e-6)
    recomposed = (0.5 * id_mf + 1.5 * (row["triplet_fused_global"] + row["triplet_fused_local"])
                  + 1.0 * (row["id_fused_global"] + row["id_fused_local"]))
    assert row["total"] == pytest.approx(recomposed, rel=1e-6)
    assert all(v >= 0 for v in row.values())


def test_bundle_part_views():
    b = FeatureBundle(f_L=torch.arange(16.0).view(1, 16))
    parts = b.f_L_parts
    assert len(parts) == 8 and torch.equal(parts[3], torch.tensor([[6.0, 7.0]]))


def test_gradient_of_fused_id_loss_small():
    torch.manual_seed(3)
    head = ClassifierHead(5, 3, hidden=4).double()
    x = np.random.default_rng(3).normal(size=(4, 5))
    y = torch.tensor([0, 1, 2, 1])

    def f(a):
        return id_loss(head, torch.tensor(a), y).item()

    t = torch.tensor(x, requires_grad=True)
    id_loss(head, t, y).backward()
    assert rel_error(t.grad.numpy(), finite_difference(f, x.copy())) < 1e-4
