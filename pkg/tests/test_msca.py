"""Cue-activation tests: attention-map construction, bilinear accumulation,
the z-score mask with its frozen hand-computed oracle, and mask application."""

import numpy as np
import pytest

from mdcm import tensor as T
from mdcm.backbone import TokenSeq
from mdcm.bilinear import interp_matrix, resize2d
from mdcm.errors import ContractError, DimensionError
from mdcm.msca import (
    ActivationMap,
    accumulate_maps,
    apply_mask,
    cls_attention_map,
    resize_map,
    scale_mask,
)


def amap_of(values, grid) -> ActivationMap:
    return ActivationMap(T.constant(np.asarray(values, dtype=np.float64)), grid)


class TestClsAttentionMap:
    def test_drops_cls_entry_and_renormalizes(self):
        row = T.constant(np.array([0.4, 0.1, 0.2, 0.1, 0.2]))  # N+1 = 5
        m = cls_attention_map(row, (2, 2))
        np.testing.assert_allclose(m.values.data,
                                   np.array([0.1, 0.2, 0.1, 0.2]) / 0.6,
                                   atol=1e-12)

    def test_accepts_patch_only_row(self):
        row = T.constant(np.array([0.5, 1.0, 0.5, 2.0]))
        m = cls_attention_map(row, (2, 2))
        np.testing.assert_allclose(m.values.data.sum(), 1.0, atol=1e-12)

    def test_wrong_length_rejected(self):
        with pytest.raises(DimensionError):
            cls_attention_map(T.constant(np.ones(7)), (2, 2))

    def test_zero_row_falls_back_to_uniform(self):
        # A saturated softmax can underflow so the cls row's patch entries
        # are exactly zero; that carries no saliency, so the map is uniform.
        m = cls_attention_map(T.constant(np.zeros(4)), (2, 2))
        np.testing.assert_array_equal(m.values.data, np.full(4, 0.25))

    def test_mixed_zero_and_live_rows(self):
        rows = np.array([[0.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 2.0]])
        m = cls_attention_map(T.constant(rows), (2, 2))
        np.testing.assert_allclose(
            m.values.data,
            [[0.25, 0.25, 0.25, 0.25], [0.5, 0.0, 0.0, 0.5]], atol=1e-15)

    def test_negative_mass_rejected(self):
        with pytest.raises(ContractError):
            cls_attention_map(T.constant(np.array([-1.0, 0.0, 0.0, 0.0])),
                              (2, 2))


class TestResize:
    def test_interp_matrix_rows_sum_to_one(self):
        for n_in, n_out in [(16, 8), (8, 4), (2, 1), (4, 7)]:
            m = interp_matrix(n_in, n_out)
            assert m.shape == (n_out, n_in)
            np.testing.assert_allclose(m.sum(axis=1), np.ones(n_out),
                                       atol=1e-12)

    def test_corner_alignment(self):
        m = interp_matrix(8, 4)
        np.testing.assert_allclose(m[0], np.eye(8)[0], atol=1e-12)
        np.testing.assert_allclose(m[-1], np.eye(8)[-1], atol=1e-12)

    def test_linear_ramp_resizes_exactly(self):
        # Corner-aligned bilinear interpolation reproduces any affine field.
        r = np.arange(4.0)[:, None] * np.ones(4)
        q = np.ones(4)[:, None] * np.arange(4.0)
        field = 2.0 + 3.0 * r + 0.5 * q
        out = resize2d(field, 7, 5)
        rr = np.linspace(0, 3, 7)[:, None] * np.ones(5)
        qq = np.ones(7)[:, None] * np.linspace(0, 3, 5)
        np.testing.assert_allclose(out, 2.0 + 3.0 * rr + 0.5 * qq, atol=1e-12)

    def test_resize_map_renormalizes(self):
        rng = np.random.default_rng(0)
        vals = rng.random(16)
        vals /= vals.sum()
        out = resize_map(amap_of(vals, (4, 4)), (2, 2))
        assert out.grid == (2, 2)
        np.testing.assert_allclose(out.values.data.sum(), 1.0, atol=1e-12)

    def test_same_grid_is_identity(self):
        m = amap_of(np.full(4, 0.25), (2, 2))
        assert resize_map(m, (2, 2)) is m


class TestAccumulate:
    def test_empty_history_returns_current(self):
        cur = amap_of(np.full(4, 0.25), (2, 2))
        assert accumulate_maps([], cur) is cur

    def test_mean_of_equal_grids(self):
        a = amap_of([0.7, 0.1, 0.1, 0.1], (2, 2))
        b = amap_of([0.1, 0.1, 0.1, 0.7], (2, 2))
        out = accumulate_maps([a], b)
        np.testing.assert_allclose(out.values.data,
                                   [0.4, 0.1, 0.1, 0.4], atol=1e-12)

    def test_uniform_history_keeps_current_shape(self):
        hist = amap_of(np.full(16, 1 / 16), (4, 4))
        cur = amap_of([0.7, 0.1, 0.1, 0.1], (2, 2))
        out = accumulate_maps([hist], cur)
        # Resized uniform map stays uniform, so the mean is (cur + 1/4)/2.
        np.testing.assert_allclose(out.values.data,
                                   (np.array([0.7, 0.1, 0.1, 0.1]) + 0.25) / 2,
                                   atol=1e-12)

    def test_coarser_history_rejected(self):
        hist = amap_of(np.full(4, 0.25), (2, 2))
        cur = amap_of(np.full(16, 1 / 16), (4, 4))
        with pytest.raises(ContractError):
            accumulate_maps([hist], cur)


class TestScaleMask:
    def test_frozen_hand_oracle(self):
        # A' = [0.1, 0.2, 0.7], gamma = 1:
        # mean = 1/3, population var = 31/450, std = 0.2624669...
        # weights = (A' - mean)/std = [-0.8891, -0.5080, 1.3970] (4 d.p.)
        m = scale_mask(amap_of([0.1, 0.2, 0.7], (1, 3)), gamma=1.0)
        np.testing.assert_allclose(m.weights.data,
                                   [-0.8891, -0.5080, 1.3970], atol=2e-4)
        vals = np.array([0.1, 0.2, 0.7])
        exact = (vals - vals.mean()) / vals.std()
        np.testing.assert_allclose(m.weights.data, exact, atol=1e-12)

    def test_gamma_zero_keeps_centered_values(self):
        vals = np.array([0.1, 0.2, 0.7])
        m = scale_mask(amap_of(vals, (1, 3)), gamma=0.0)
        np.testing.assert_allclose(m.weights.data, vals - vals.mean(),
                                   atol=1e-12)

    def test_gamma_generalizes_std_power(self):
        vals = np.array([0.05, 0.15, 0.3, 0.5])
        gamma = 0.3
        m = scale_mask(amap_of(vals, (2, 2)), gamma=gamma)
        expect = (vals - vals.mean()) / vals.std() ** gamma
        np.testing.assert_allclose(m.weights.data, expect, atol=1e-12)

    def test_uniform_map_gives_zero_mask(self):
        m = scale_mask(amap_of(np.full(4, 0.25), (2, 2)), gamma=0.3)
        np.testing.assert_array_equal(m.weights.data, np.zeros(4))

    def test_mixed_batch_zero_variance_rows(self):
        vals = np.stack([np.full(4, 0.25), np.array([0.7, 0.1, 0.1, 0.1])])
        m = scale_mask(amap_of(vals, (2, 2)), gamma=1.0)
        np.testing.assert_array_equal(m.weights.data[0], np.zeros(4))
        row = vals[1]
        np.testing.assert_allclose(m.weights.data[1],
                                   (row - row.mean()) / row.std(), atol=1e-12)

    def test_mask_is_zero_mean(self):
        rng = np.random.default_rng(1)
        vals = rng.random(16)
        vals /= vals.sum()
        m = scale_mask(amap_of(vals, (4, 4)), gamma=0.3)
        np.testing.assert_allclose(m.weights.data.sum(), 0.0, atol=1e-10)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ContractError):
            scale_mask(amap_of(np.full(4, 0.25), (2, 2)), gamma=-0.1)


class TestApplyMask:
    def _seq(self, rng, n_tokens=5, c=3):
        return TokenSeq(T.constant(rng.normal(size=(n_tokens, c))), (2, 2))

    def test_scales_by_one_plus_mask(self):
        rng = np.random.default_rng(2)
        seq = self._seq(rng)
        mask = scale_mask(amap_of([0.7, 0.1, 0.1, 0.1], (2, 2)), 1.0)
        out = apply_mask(seq, mask, clamp_floor=0.05)
        factor = np.maximum(1.0 + mask.weights.data, 0.05)
        np.testing.assert_allclose(out.tokens.data[1:],
                                   seq.tokens.data[1:] * factor[:, None],
                                   atol=1e-12)

    def test_cls_row_untouched(self):
        rng = np.random.default_rng(3)
        seq = self._seq(rng)
        mask = scale_mask(amap_of([0.7, 0.1, 0.1, 0.1], (2, 2)), 1.0)
        out = apply_mask(seq, mask)
        np.testing.assert_array_equal(out.tokens.data[0], seq.tokens.data[0])

    def test_clamp_floor_engages(self):
        rng = np.random.default_rng(4)
        seq = self._seq(rng)
        # weights[1] = -2 would scale by -1 without the clamp
        mask = scale_mask(amap_of([0.7, 0.1, 0.1, 0.1], (2, 2)), 1.0)
        mask.weights.data[:] = np.array([0.5, -2.0, 0.0, 1.5])
        out = apply_mask(seq, mask, clamp_floor=0.05)
        np.testing.assert_allclose(out.tokens.data[2],
                                   seq.tokens.data[2] * 0.05, atol=1e-12)

    def test_zero_mask_is_identity(self):
        rng = np.random.default_rng(5)
        seq = self._seq(rng)
        mask = scale_mask(amap_of(np.full(4, 0.25), (2, 2)), 0.3)
        out = apply_mask(seq, mask)
        np.testing.assert_array_equal(out.tokens.data, seq.tokens.data)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        seq = self._seq(rng)
        mask = scale_mask(amap_of(np.full(16, 1 / 16), (4, 4)), 0.3)
        with pytest.raises(DimensionError):
            apply_mask(seq, mask)

    def test_live_mask_carries_gradient(self):
        # When the map is not detached, gradients flow through the z-score.
        src = T.parameter(np.array([0.5, 1.0, 0.5, 2.0]))
        # Distinct row magnitudes: a uniform sequence would cancel the
        # zero-sum z-score gradient exactly.
        tokens = np.arange(15.0).reshape(5, 3)
        with T.Tape():
            m = cls_attention_map(src, (2, 2))
            mask = scale_mask(m, 1.0)
            out = apply_mask(TokenSeq(T.constant(tokens), (2, 2)), mask)
            T.backward(T.sum_all(out.tokens))
        assert src.grad is not None
        assert np.any(src.grad != 0)

    def test_detached_mask_carries_no_gradient(self):
        src = T.parameter(np.array([0.5, 1.0, 0.5, 2.0]))
        with T.Tape():
            m = cls_attention_map(src, (2, 2))
            m = ActivationMap(m.values.detach(), m.grid)
            mask = scale_mask(m, 1.0)
            x = T.parameter(np.ones((5, 3)))
            out = apply_mask(TokenSeq(x, (2, 2)), mask)
            T.backward(T.sum_all(out.tokens))
        assert src.grad is None or not np.any(src.grad)
        assert x.grad is not None
