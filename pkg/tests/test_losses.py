import math

import numpy as np
import pytest
import torch

from casn.attention import (
    MaskParams,
    align_profiles,
    identification_attention_loss,
    normalize_map,
    row_max_pool,
    siamese_attention_maps,
)
from casn.data import PairBatch
from casn.losses import LossWeights, bce_loss, ide_loss, siamese_attention_loss, total_loss


def loop_ce(logits, labels):
    """-sum_n log softmax(logits_n)[label_n], one row at a time."""
    total = 0.0
    for row, c in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[c]
    return total


def loop_norm(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


class TestIdeLoss:
    def test_uniform_logits(self):
        assert float(ide_loss(torch.zeros(1, 4, dtype=torch.float64), [2])) == pytest.approx(math.log(4), rel=1e-12)

    def test_saturated_correct_class(self):
        logits = torch.zeros(2, 5, dtype=torch.float64)
        logits[0, 1] = logits[1, 3] = 1000.0
        assert float(ide_loss(logits, [1, 3])) == pytest.approx(0.0, abs=1e-12)

    def test_sum_over_batch_matches_loop(self, rng):
        logits = rng.normal(size=(3, 6)) * 3
        labels = [0, 5, 2]
        got = float(ide_loss(torch.tensor(logits), labels))
        assert got == pytest.approx(loop_ce(logits, labels), rel=1e-12)
        mean = float(ide_loss(torch.tensor(logits), labels, reduction="mean"))
        assert mean == pytest.approx(got / 3, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ide_loss(torch.zeros(1, 3), [3])
        with pytest.raises(ValueError):
            ide_loss(torch.zeros(1, 3), [-1])


class TestBceLoss:
    def test_equal_logits(self):
        got = float(bce_loss(torch.full((3, 2), 0.7, dtype=torch.float64), [0, 1, 1]))
        assert got == pytest.approx(3 * math.log(2), rel=1e-12)

    def test_dominant_correct_logit(self):
        z = torch.tensor([[1000.0, 0.0], [0.0, 1000.0]], dtype=torch.float64)
        assert float(bce_loss(z, [0, 1])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_loop(self, rng):
        z = rng.normal(size=(4, 2)) * 2
        y = [1, 0, 0, 1]
        expected = -sum(math.log(math.exp(z[p, y[p]]) / (math.exp(z[p, 0]) + math.exp(z[p, 1]))) for p in range(4))
        assert float(bce_loss(torch.tensor(z), y)) == pytest.approx(expected, rel=1e-12)

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(1, 2), [2])
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(1, 3), [1])


def pair_batch(x_a, x_b, id_a, id_b):
    id_a, id_b = torch.as_tensor(id_a), torch.as_tensor(id_b)
    return PairBatch(x_a, x_b, id_a, id_b, (id_a == id_b).long())


class TestSiameseAttentionLoss:
    def test_identical_positive_pair_has_no_spatial_term(self, tiny_model):
        x = torch.randn(2, 3, 32, 16, dtype=torch.float64)
        labels = torch.ones(2, dtype=torch.long)
        sa = siamese_attention_loss(tiny_model, x, x.clone(), labels)
        z = tiny_model.bce_head(torch.zeros(2, tiny_model.feature_dim, dtype=torch.float64))
        assert float(sa) == float(bce_loss(z, labels, reduction="mean"))

    def test_negative_pairs_reduce_to_bce(self, tiny_model):
        xa = torch.randn(3, 3, 32, 16, dtype=torch.float64)
        xb = torch.randn(3, 3, 32, 16, dtype=torch.float64)
        labels = torch.zeros(3, dtype=torch.long)
        sa = siamese_attention_loss(tiny_model, xa, xb, labels)
        fa = tiny_model.extract_features(xa).vector
        fb = tiny_model.extract_features(xb).vector
        assert float(sa) == float(bce_loss(tiny_model.bce_head(fa - fb), labels, reduction="mean"))

    def test_positive_pair_equals_composed_components(self, tiny_model):
        torch.manual_seed(2)
        xa, xb = torch.randn(2, 1, 3, 32, 16, dtype=torch.float64)
        w = LossWeights()
        sa = siamese_attention_loss(tiny_model, xa, xb, torch.ones(1, dtype=torch.long), w, threshold=0.5)
        fa, fb = tiny_model.extract_features(xa).vector, tiny_model.extract_features(xb).vector
        bce = float(bce_loss(tiny_model.bce_head(fa - fb), [1]))
        m1, m2 = siamese_attention_maps(tiny_model, xa[0], xb[0])
        v1 = align_profiles(row_max_pool(normalize_map(m1)), 0.5).tolist()
        v2 = align_profiles(row_max_pool(normalize_map(m2)), 0.5).tolist()
        expected = bce + 0.2 * loop_norm(v1, v2)
        assert float(sa) == pytest.approx(expected, rel=1e-10)


class TestTotalLoss:
    def batch(self, seed=0, n=3, classes=5):
        g = torch.Generator().manual_seed(seed)
        xa = torch.randn(n, 3, 32, 16, generator=g, dtype=torch.float64)
        xb = torch.randn(n, 3, 32, 16, generator=g, dtype=torch.float64)
        ia = torch.randint(0, classes, (n,), generator=g)
        ib = ia.clone()
        ib[1:] = (ia[1:] + 1) % classes
        return pair_batch(xa, xb, ia, ib)

    def test_zero_weights_give_ide_exactly(self, tiny_model):
        b = self.batch()
        terms = total_loss(tiny_model, b, LossWeights(0.0, 0.0, 0.2))
        assert terms.ia is None and terms.sa is None
        assert torch.equal(terms.total, terms.ide)
        switched = total_loss(tiny_model, b, LossWeights(), enable_ia=False, enable_sa=False)
        assert torch.equal(switched.total, terms.ide)

    def test_ia_only_row(self, tiny_model):
        b = self.batch(1)
        terms = total_loss(tiny_model, b, LossWeights(0.5, 0.0, 0.2))
        assert float(terms.total) == float(terms.ide + 0.5 * terms.ia)

    def test_full_weights_equal_sum_of_components(self, tiny_model):
        b = self.batch(2)
        w = LossWeights()
        terms = total_loss(tiny_model, b, w, MaskParams(), threshold=0.5)
        images = torch.cat([b.images_a, b.images_b])
        labels = torch.cat([b.identity_a, b.identity_b])
        logits = tiny_model.ide_head(tiny_model.extract_features(images).vector).detach().numpy()
        l_ide = loop_ce(logits, labels.tolist()) / len(labels)
        l_ia = float(identification_attention_loss(tiny_model, images, labels, MaskParams()))
        l_sa = float(siamese_attention_loss(tiny_model, b.images_a, b.images_b, b.pair_label, w, 0.5))
        expected = l_ide + 0.5 * l_ia + 0.05 * l_sa
        assert float(terms.total) == pytest.approx(expected, rel=1e-6)

    def test_permutation_invariance(self, tiny_model):
        b = self.batch(3, n=4)
        perm = torch.tensor([2, 0, 3, 1])
        shuffled = pair_batch(b.images_a[perm], b.images_b[perm], b.identity_a[perm], b.identity_b[perm])
        t1 = total_loss(tiny_model, b)
        t2 = total_loss(tiny_model, shuffled)
        for k, v in t1.as_floats().items():
            assert t2.as_floats()[k] == pytest.approx(v, rel=1e-6)

    def test_terms_non_negative(self, tiny_model):
        terms = total_loss(tiny_model, self.batch(4))
        assert float(terms.ide) >= 0 and float(terms.bce) >= 0 and float(terms.spatial) >= 0
        assert 0 <= float(terms.ia) <= 1

    def test_backward_gives_finite_gradients_everywhere(self, tiny_model):
        tiny_model.train()
        terms = total_loss(tiny_model, self.batch(5))
        terms.total.backward()
        for name, p in tiny_model.named_parameters():
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)

    def test_batch_rejects_inconsistent_pair_labels(self):
        x = torch.zeros(2, 3, 4, 4)
        with pytest.raises(AssertionError):
            PairBatch(x, x, torch.tensor([0, 1]), torch.tensor([0, 2]), torch.tensor([1, 1]))


def test_descending_the_spatial_term_makes_pair_attention_consistent(tiny_model):
    """Mechanism check: gradient steps on the spatial term alone shrink it."""
    from casn.losses import siamese_terms

    gen = torch.Generator().manual_seed(4)
    xa, xb = torch.randn(2, 2, 3, 32, 16, generator=gen, dtype=torch.float64)
    labels = torch.ones(2, dtype=torch.long)
    opt = torch.optim.SGD(tiny_model.parameters(), lr=0.05)

    def spatial():
        feats = tiny_model.extract_features(torch.cat([xa, xb]))
        return siamese_terms(tiny_model, feats, labels, LossWeights(), threshold=0.5).spatial.mean()

    start = float(spatial())
    for _ in range(30):
        opt.zero_grad()
        spatial().backward()
        opt.step()
    assert start > 0
    assert float(spatial()) < 0.5 * start
    # not by collapsing the maps to zero
    m1, m2 = siamese_attention_maps(tiny_model, xa, xb)
    assert float(m1.amax(dim=(1, 2)).min()) > 0 and float(m2.amax(dim=(1, 2)).min()) > 0
