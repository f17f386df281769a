import numpy as np
import pytest

from filigree import (AdapterParams, FeatureMap, FeaturePyramid, MiningConfig,
                      MiningError, ScaleSet, TripletBatch, adam_step,
                      adapter_triplet_loss, apply_adapter, mine_hard_negative,
                      mine_positives, normalize_features, read_adapter,
                      read_triplets, train_adapter, triplet_loss,
                      write_adapter, write_triplets)
from filigree.mine import ElementRef
from conftest import random_pyramid, random_unit_map


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def make_batch(anchors, positives, negatives):
    return TripletBatch(anchors=np.stack(anchors), positives=np.stack(positives),
                        negatives=np.stack(negatives))


class TestApplyAdapter:
    def test_identity_unchanged(self):
        rng = np.random.default_rng(0)
        m = random_unit_map(rng, 3, 4, 6)
        out = apply_adapter(m, AdapterParams.identity(6))
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_scaling_invariant_after_renorm(self):
        rng = np.random.default_rng(1)
        m = random_unit_map(rng, 3, 3, 5)
        p = AdapterParams.identity(5)
        p2 = AdapterParams(weight=2.0 * p.weight, bias=p.bias,
                           m_weight=p.m_weight, v_weight=p.v_weight,
                           m_bias=p.m_bias, v_bias=p.v_bias)
        out = apply_adapter(m, p2)
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_random_matches_per_cell_recompute(self):
        rng = np.random.default_rng(2)
        m = random_unit_map(rng, 4, 4, 5)
        W = rng.normal(size=(5, 5)).astype(np.float32)
        b = rng.normal(size=5).astype(np.float32) * 0.1
        p = AdapterParams(W, b, np.zeros((5, 5), np.float32),
                          np.zeros((5, 5), np.float32), np.zeros(5, np.float32),
                          np.zeros(5, np.float32))
        out = apply_adapter(m, p)
        for r in range(4):
            for c in range(4):
                g = W.astype(np.float64) @ m.data[r, c].astype(np.float64) \
                    + b.astype(np.float64)
                g = g / np.linalg.norm(g)
                np.testing.assert_allclose(out.data[r, c], g, atol=1e-6)

    def test_zero_cells_stay_zero(self):
        data = np.zeros((2, 2, 3), dtype=np.float32)
        data[0, 0] = [1, 0, 0]
        m = normalize_features(FeatureMap(data))
        p = AdapterParams.identity(3)
        p = AdapterParams(p.weight, np.ones(3, np.float32), p.m_weight,
                          p.v_weight, p.m_bias, p.v_bias)
        out = apply_adapter(m, p)
        assert np.all(out.data[1, 1] == 0.0)
        assert out.zero_mask[1, 1]
        assert not out.zero_mask[0, 0]

    def test_non_finite_params_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            AdapterParams(np.full((3, 3), np.nan, np.float32),
                          np.zeros(3, np.float32), np.zeros((3, 3), np.float32),
                          np.zeros((3, 3), np.float32), np.zeros(3, np.float32),
                          np.zeros(3, np.float32))


class TestMinePositives:
    def _one_hot(self, g, d=None):
        d = d or g * g
        data = np.zeros((g, g, d), dtype=np.float32)
        for i in range(g * g):
            data[i // g, i % g, i] = 1.0
        return FeatureMap(data)

    def test_identity_all_nonzero_paired(self):
        m = self._one_hot(4)
        cfg = MiningConfig(tau_cells=1.0, scales=ScaleSet())
        pairs = mine_positives(m, FeaturePyramid((m,), 0), cfg)
        assert len(pairs) == 16
        for p in pairs:
            assert p.distance == 0.0
            assert p.matched_cell == p.anchor_cell

    def test_zero_anchor_cells_skipped(self):
        data = np.zeros((2, 2, 4), dtype=np.float32)
        data[0, 0, 0] = 1.0
        data[1, 1, 1] = 1.0
        m = normalize_features(FeatureMap(data))
        cfg = MiningConfig(tau_cells=5.0, scales=ScaleSet())
        pairs = mine_positives(m, FeaturePyramid((m,), 0), cfg)
        assert sorted(p.anchor_cell for p in pairs) == [(0, 0), (1, 1)]

    def test_tau_zero_keeps_exact_center_matches(self):
        m = self._one_hot(3)
        cfg = MiningConfig(tau_cells=0.0, scales=ScaleSet())
        pairs = mine_positives(m, FeaturePyramid((m,), 0), cfg)
        assert len(pairs) == 9

    def test_translation_thresholds(self):
        # photo = drawing shifted one column (wrap-around at the border)
        g = 6
        m = self._one_hot(g)
        shifted = FeatureMap(np.roll(np.array(m.data), 1, axis=1))
        pyr = FeaturePyramid((shifted,), 0)
        cfg_wide = MiningConfig(tau_cells=1.5, scales=ScaleSet())
        pairs = mine_positives(m, pyr, cfg_wide)
        # interior anchors (shift distance 1 cell) kept; the wrapped column
        # (distance g-1 cells) dropped
        assert len(pairs) == g * (g - 1)
        for p in pairs:
            assert p.distance == pytest.approx(1.0 / g, abs=1e-12)
        cfg_narrow = MiningConfig(tau_cells=0.5, scales=ScaleSet())
        assert mine_positives(m, pyr, cfg_narrow) == []

    def test_subset_monotonicity(self):
        rng = np.random.default_rng(3)
        drawing = random_unit_map(rng, 6, 6, 8)
        pyr = random_pyramid(rng, (4, 6, 8), 8)
        sets = []
        for tau in (0.0, 1.0, 3.0, 1e9):
            cfg = MiningConfig(tau_cells=tau, scales=ScaleSet())
            pairs = mine_positives(drawing, pyr, cfg)
            sets.append({(p.anchor_cell, p.matched_scale, p.matched_cell)
                         for p in pairs})
        for small, big in zip(sets, sets[1:]):
            assert small <= big


class TestMineHardNegative:
    def test_exact_candidate_wins(self):
        rng = np.random.default_rng(4)
        anchor = unit(rng.normal(size=5))
        pyrs = [random_pyramid(rng, (3, 4), 5) for _ in range(3)]
        planted = np.array(pyrs[1].maps[0].data, copy=True)
        planted[2, 1] = anchor
        maps = list(pyrs[1].maps)
        maps[0] = FeatureMap(planted, scale_id=0)
        pyrs[1] = FeaturePyramid(tuple(maps), 0)
        neg = mine_hard_negative(anchor, pyrs)
        assert neg.image_index == 1
        assert (neg.scale_id, neg.cell) == (0, (2, 1))
        assert neg.fs == pytest.approx(1.0, abs=1e-6)

    def test_all_orthogonal_tie_to_first(self):
        d = 4
        data = np.zeros((2, 2, d), dtype=np.float32)
        data[:, :, 0] = 1.0
        pyrs = [FeaturePyramid((FeatureMap(data),), 0) for _ in range(2)]
        anchor = np.array([0.0, 1.0, 0.0, 0.0], dtype=np.float32)
        neg = mine_hard_negative(anchor, pyrs)
        assert neg.image_index == 0
        assert (neg.scale_id, neg.cell) == (0, (0, 0))

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(5)
        pyrs = [random_pyramid(rng, (3, 5), 6) for _ in range(4)]
        for _ in range(10):
            anchor = unit(rng.normal(size=6))
            neg = mine_hard_negative(anchor, pyrs)
            best = None
            for ii, pyr in enumerate(pyrs):
                for m in pyr.maps:
                    for r in range(m.height):
                        for c in range(m.width):
                            f = m.data[r, c].astype(np.float64)
                            s = float(np.dot(anchor.astype(np.float64), f)
                                      / np.linalg.norm(f))
                            key = (-s, ii, m.scale_id, r, c)
                            if best is None or key < best:
                                best = key
            assert (neg.image_index, neg.scale_id, neg.cell) == \
                (best[1], best[2], (best[3], best[4]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mine_hard_negative(np.ones(4, np.float32), [])


class TestTripletLoss:
    def test_direct_substitution(self):
        a = unit([1.0, 0.0])
        p = unit([0.9, np.sqrt(1 - 0.81)])
        n = unit([0.2, np.sqrt(1 - 0.04)])
        loss, _ = triplet_loss(make_batch([a], [p], [n]), lam=1.0)
        assert loss == pytest.approx(0.2 - 0.9, abs=1e-6)

    def test_clipped_negative_has_zero_grad(self):
        a = unit([1.0, 0.0])
        n = unit([-0.3, np.sqrt(1 - 0.09)])
        loss, (ga, gp, gn) = triplet_loss(make_batch([a], [a], [n]), lam=1.0)
        assert loss == pytest.approx(-1.0, abs=1e-6)
        assert np.all(gn == 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        k, d = 4, 6
        batch = make_batch(rng.normal(size=(k, d)).astype(np.float32),
                           rng.normal(size=(k, d)).astype(np.float32),
                           rng.normal(size=(k, d)).astype(np.float32))
        loss, grads = triplet_loss(batch, lam=1.0)
        h = 2.0 ** -13  # ~1e-4, exactly representable so float32 storage
        # does not corrupt the perturbation
        arrays = [batch.anchors, batch.positives, batch.negatives]
        for gi, grad in enumerate(grads):
            num = np.zeros_like(grad)
            for i in range(k):
                for j in range(d):
                    for sgn in (1, -1):
                        mats = [a.copy() for a in arrays]
                        mats[gi][i, j] += np.float32(sgn * h)
                        l2, _ = triplet_loss(TripletBatch(*mats), 1.0)
                        num[i, j] += sgn * l2
            num /= 2 * h
            denom = np.maximum(np.abs(num), 1e-3)
            assert (np.abs(num - grad) / denom).max() < 1e-4

    def test_loss_bounds(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            k = int(rng.integers(1, 8))
            batch = make_batch(rng.normal(size=(k, 5)).astype(np.float32),
                               rng.normal(size=(k, 5)).astype(np.float32),
                               rng.normal(size=(k, 5)).astype(np.float32))
            loss, _ = triplet_loss(batch, lam=1.0)
            assert -k - 1e-9 <= loss <= 2 * k + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            TripletBatch(anchors=np.zeros((2, 3), np.float32),
                         positives=np.zeros((3, 3), np.float32),
                         negatives=np.zeros((2, 3), np.float32))


class TestAdapterGradient:
    def test_end_to_end_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for case in range(5):
            k, d = 4, 5
            batch = make_batch(rng.normal(size=(k, d)).astype(np.float32),
                               rng.normal(size=(k, d)).astype(np.float32),
                               rng.normal(size=(k, d)).astype(np.float32))
            W = (np.eye(d) + 0.2 * rng.normal(size=(d, d))).astype(np.float32)
            b = (0.1 * rng.normal(size=d)).astype(np.float32)
            params = AdapterParams(W, b, np.zeros((d, d), np.float32),
                                   np.zeros((d, d), np.float32),
                                   np.zeros(d, np.float32), np.zeros(d, np.float32))
            loss, dW, db = adapter_triplet_loss(batch, params, lam=1.0)
            h = 2.0 ** -13
            num = np.zeros_like(dW)
            for i in range(d):
                for j in range(d):
                    for sgn in (1, -1):
                        W2 = W.copy()
                        W2[i, j] += np.float32(sgn * h)
                        p2 = AdapterParams(W2, b, params.m_weight, params.v_weight,
                                           params.m_bias, params.v_bias)
                        l2, _, _ = adapter_triplet_loss(batch, p2, 1.0)
                        num[i, j] += sgn * l2
            num /= 2 * h
            denom = np.maximum(np.abs(num), 1e-3)
            assert (np.abs(num - dW) / denom).max() < 1e-3


class TestAdam:
    def test_zero_gradient_noop(self):
        p = AdapterParams.identity(3)
        out = adam_step(p, np.zeros((3, 3)), np.zeros(3), lr=0.1)
        np.testing.assert_array_equal(out.weight, p.weight)
        np.testing.assert_array_equal(out.bias, p.bias)
        assert out.step == 1

    def test_first_step_closed_form(self):
        p = AdapterParams.identity(2)
        g = np.array([[0.5, -0.25], [0.0, 1.0]])
        out = adam_step(p, g, np.zeros(2), lr=0.01, eps=1e-8)
        expected = p.weight - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(out.weight, expected, atol=1e-6)

    def test_quadratic_descent_matches_independent_recursion(self):
        # independent scalar Adam recursion on f(w) = w^2
        b1, b2, lr, eps = 0.9, 0.99, 0.1, 1e-8
        w_ref, m, v = 1.0, 0.0, 0.0
        trajectory = [w_ref]
        for t in range(1, 101):
            g = 2 * w_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            trajectory.append(w_ref)

        p = AdapterParams.identity(1)
        ws = [1.0]
        for _ in range(100):
            g = np.array([[2 * float(p.weight[0, 0])]])
            p = adam_step(p, g, np.zeros(1), lr=lr, eps=eps)
            ws.append(float(p.weight[0, 0]))
        np.testing.assert_allclose(ws, trajectory, atol=1e-5)
        # |w| decreases monotonically until it falls below 0.5
        first_below = next(i for i, w in enumerate(ws) if abs(w) < 0.5)
        for i in range(first_below):
            assert abs(ws[i + 1]) <= abs(ws[i]) + 1e-12
        assert abs(ws[-1]) < 0.5

    def test_non_finite_gradient_refused(self):
        p = AdapterParams.identity(2)
        g = np.array([[np.nan, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="refused"):
            adam_step(p, g, np.zeros(2), lr=0.1)
        assert p.step == 0  # untouched


class TestPersistence:
    def test_adapter_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        p = AdapterParams(rng.normal(size=(4, 4)).astype(np.float32),
                          rng.normal(size=4).astype(np.float32),
                          rng.normal(size=(4, 4)).astype(np.float32),
                          np.abs(rng.normal(size=(4, 4))).astype(np.float32),
                          rng.normal(size=4).astype(np.float32),
                          np.abs(rng.normal(size=4)).astype(np.float32), step=17)
        f1 = tmp_path / "a.adpt"
        f2 = tmp_path / "b.adpt"
        write_adapter(p, f1)
        back = read_adapter(f1)
        assert back.step == 17
        for name in ("weight", "bias", "m_weight", "v_weight", "m_bias", "v_bias"):
            np.testing.assert_array_equal(getattr(back, name), getattr(p, name))
        write_adapter(back, f2)
        assert f1.read_bytes() == f2.read_bytes()

    def test_triplet_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        prov = tuple(
            (ElementRef(f"img{i}.png", 0, i, 0),
             ElementRef(f"photo{i}.png", 2, i, 1),
             ElementRef(f"other{i}.png", 1, 0, i)) for i in range(3))
        batch = TripletBatch(anchors=rng.normal(size=(3, 5)).astype(np.float32),
                             positives=rng.normal(size=(3, 5)).astype(np.float32),
                             negatives=rng.normal(size=(3, 5)).astype(np.float32),
                             provenance=prov)
        f1 = tmp_path / "a.trip"
        f2 = tmp_path / "b.trip"
        write_triplets(batch, f1)
        back = read_triplets(f1)
        np.testing.assert_array_equal(back.anchors, batch.anchors)
        np.testing.assert_array_equal(back.positives, batch.positives)
        np.testing.assert_array_equal(back.negatives, batch.negatives)
        assert back.provenance == prov
        write_triplets(back, f2)
        assert f1.read_bytes() == f2.read_bytes()


class TestTrainAdapter:
    def test_lr_zero_keeps_identity(self, corpus10, extractor):
        cfg = MiningConfig(tau_cells=3.0, scales=ScaleSet())
        params, curve = train_adapter(corpus10, extractor, cfg, epochs=2,
                                      lr=0.0, seed=0)
        np.testing.assert_array_equal(params.weight, np.eye(9, dtype=np.float32))
        np.testing.assert_array_equal(params.bias, np.zeros(9, dtype=np.float32))
        assert curve[0] == pytest.approx(curve[1], abs=1e-9)

    def test_loss_decreases_over_epochs(self, corpus10, extractor):
        cfg = MiningConfig(tau_cells=3.0, scales=ScaleSet())
        params, curve = train_adapter(corpus10, extractor, cfg, epochs=5,
                                      lr=1e-2, seed=0)
        assert len(curve) == 5
        assert curve[-1] < curve[0]

    def test_deterministic(self, corpus10, extractor):
        cfg = MiningConfig(tau_cells=3.0, scales=ScaleSet())
        a, ca = train_adapter(corpus10, extractor, cfg, epochs=2, lr=1e-3, seed=7)
        b, cb = train_adapter(corpus10, extractor, cfg, epochs=2, lr=1e-3, seed=7)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert ca == cb

    def test_single_class_fails(self, corpus10, extractor):
        one_class = [r for r in corpus10 if r.class_id == "class0000"]
        cfg = MiningConfig(tau_cells=3.0, scales=ScaleSet())
        with pytest.raises(MiningError):
            train_adapter(one_class, extractor, cfg, epochs=1, lr=1e-3, seed=0)
