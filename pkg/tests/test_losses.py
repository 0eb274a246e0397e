import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bokehkit import losses
from bokehkit.losses import (
    LOSS_TERMS, SOBEL_KERNELS, LossWeights, background_blur_loss, edge_difference_loss,
    finite_diff_gradient, foreground_edge_loss, histogram_loss, l1_loss, loss_gradient,
    loss_value, masked_l1_loss, pretrain_loss, sobel_edge_map, ssim_loss,
)
from bokehkit.harness import gradcheck_inputs, relative_error

from conftest import vertical_step

STEP_FOREEDGE = -(24 + 0 + 18 + 18) / 9

small_images = arrays(np.float64, (1, 6, 6), elements=st.floats(0, 1))


class TestSobel:
    def test_kernels_zero_sum(self):
        for k in SOBEL_KERNELS.values():
            assert k.sum() == 0

    def test_y_is_transpose_of_x(self):
        np.testing.assert_array_equal(SOBEL_KERNELS["y"], SOBEL_KERNELS["x"].T)

    @pytest.mark.parametrize("d", sorted(SOBEL_KERNELS))
    def test_constant_gives_zero(self, d):
        np.testing.assert_allclose(sobel_edge_map(np.full((5, 5), 0.3), d), 0, atol=1e-12)

    def test_step_x(self):
        out = sobel_edge_map(vertical_step()[0], "x")
        np.testing.assert_array_equal(out, [[0, 4, 4]] * 3)

    def test_step_y(self):
        np.testing.assert_array_equal(sobel_edge_map(vertical_step()[0], "y"), 0)

    def test_step_diagonals(self):
        for d in ("xy", "yx"):
            assert np.abs(sobel_edge_map(vertical_step()[0], d)).sum() == 18

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            sobel_edge_map(np.zeros((3, 3)), "z")


class TestForegroundEdge:
    def test_step_fixture(self):
        assert foreground_edge_loss(vertical_step(), np.ones((3, 3))) == pytest.approx(STEP_FOREEDGE, abs=1e-12)
        assert abs(STEP_FOREEDGE + 6.6667) <= 1e-4

    def test_constant_is_zero(self):
        assert foreground_edge_loss(np.full((1, 4, 4), 0.7), np.ones((4, 4))) == pytest.approx(0, abs=1e-12)

    def test_empty_mask_is_zero(self, rng):
        assert foreground_edge_loss(rng.random((3, 8, 8)), np.zeros((8, 8))) == 0

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            foreground_edge_loss(np.zeros((1, 4, 4)), np.ones((4, 5)))

    @given(small_images, arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
    def test_non_positive(self, img, m):
        assert foreground_edge_loss(img, m) <= 0

    @given(small_images, st.floats(0, 4))
    def test_homogeneous(self, img, s):
        m = np.ones((6, 6))
        assert foreground_edge_loss(s * img, m) == pytest.approx(s * foreground_edge_loss(img, m), abs=1e-9)

    @given(small_images, st.floats(-0.5, 0.5))
    def test_offset_invariant_with_full_mask(self, img, c):
        m = np.ones((6, 6))
        assert foreground_edge_loss(img + c, m) == pytest.approx(foreground_edge_loss(img, m), abs=1e-9)

    def test_rgb_uses_luma(self, rng):
        grey = rng.random((1, 8, 8))
        m = rng.random((8, 8))
        assert foreground_edge_loss(np.repeat(grey, 3, axis=0), m) == pytest.approx(
            foreground_edge_loss(grey, m), abs=1e-12)


class TestEdgeDifference:
    def test_step_vs_constant(self):
        v = edge_difference_loss(vertical_step(), np.zeros((1, 3, 3)), np.ones((3, 3)))
        assert v == pytest.approx(-STEP_FOREEDGE, abs=1e-12)

    def test_identical(self, rng):
        x = rng.random((3, 8, 8))
        assert edge_difference_loss(x, x, rng.random((8, 8))) == 0

    def test_both_constant(self):
        assert edge_difference_loss(np.zeros((1, 4, 4)), np.ones((1, 4, 4)), np.ones((4, 4))) == 0

    @given(small_images, small_images)
    def test_symmetric_non_negative(self, a, b):
        m = np.ones((6, 6))
        assert edge_difference_loss(a, b, m) >= 0
        assert edge_difference_loss(a, b, m) == edge_difference_loss(b, a, m)


class TestBackgroundBlur:
    def test_fixture(self):
        img = np.array([[[0.0, 1.0], [0.0, 1.0]]])
        assert background_blur_loss(img, np.zeros((2, 2))) == 0.5

    def test_constant(self):
        assert background_blur_loss(np.full((3, 5, 5), 0.4), np.zeros((5, 5))) == 0

    def test_full_mask(self, rng):
        assert background_blur_loss(rng.random((3, 5, 5)), np.ones((5, 5))) == 0

    @given(small_images, st.floats(-0.5, 0.5))
    def test_offset_invariant_and_non_negative(self, img, c):
        m = np.zeros((6, 6))
        v = background_blur_loss(img, m)
        assert v >= 0
        assert background_blur_loss(img + c, m) == pytest.approx(v, abs=1e-9)


class TestPixelLosses:
    def test_l1(self, rng):
        x = rng.random((3, 4, 4))
        assert l1_loss(x, x) == 0
        assert l1_loss(np.zeros((1, 3, 3)), np.ones((1, 3, 3))) == 1
        assert l1_loss(np.full((1, 3, 3), 0.25), np.full((1, 3, 3), 0.75)) == 0.5

    def test_l1_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((1, 3, 3)), np.zeros((3, 3, 3)))

    def test_masked_full_and_empty(self, rng):
        a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        assert masked_l1_loss(a, b, np.ones((6, 6))) == pytest.approx(l1_loss(a, b), abs=1e-15)
        assert masked_l1_loss(a, b, np.zeros((6, 6))) == 0
        assert masked_l1_loss(a, b, np.zeros((6, 6)), background=True) == pytest.approx(l1_loss(a, b), abs=1e-15)

    def test_masked_half(self):
        a, b = np.full((3, 4, 4), 0.1), np.full((3, 4, 4), 0.5)
        m = np.zeros((4, 4))
        m[:, :2] = 1
        assert masked_l1_loss(a, b, m) == pytest.approx(0.4, abs=1e-15)

    def test_ssim_loss(self, rng):
        x = rng.random((3, 16, 16))
        assert ssim_loss(x, x) == pytest.approx(0, abs=1e-12)
        v = ssim_loss(np.zeros((1, 16, 16)), np.ones((1, 16, 16)))
        assert v == pytest.approx(1 - 1e-4 / 1.0001, abs=1e-12)
        assert round(v, 4) == 0.9999

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_ssim_loss_bounded(self, seed):
        r = np.random.default_rng(seed)
        assert 0 <= ssim_loss(r.random((1, 12, 12)), r.random((1, 12, 12))) <= 2


class TestHistogram:
    def test_identical(self, rng):
        x = rng.random((3, 8, 8))
        assert histogram_loss(x, x) == 0

    def test_disjoint_endpoints(self):
        assert histogram_loss(np.zeros((3, 4, 4)), np.ones((3, 4, 4))) == pytest.approx(6.0, abs=1e-12)

    def test_permutation_invariant(self, rng):
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        perm = rng.permutation(64)
        shuffled = a.reshape(3, 64)[:, perm].reshape(3, 8, 8)
        assert histogram_loss(shuffled, b) == pytest.approx(histogram_loss(a, b), abs=1e-12)

    def test_needs_rgb(self):
        with pytest.raises(ValueError):
            histogram_loss(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))

    def test_needs_two_bins(self):
        with pytest.raises(ValueError):
            histogram_loss(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), bins=1)


def _step16():
    img = np.tile(np.r_[np.zeros(8), np.ones(8)], (16, 1))[None]
    return np.repeat(img, 3, axis=0)


class TestPretrain:
    def test_all_equal_constant(self):
        x = np.full((3, 16, 16), 0.5)
        total, terms = pretrain_loss(x, x, x, np.ones((16, 16)))
        assert total == pytest.approx(0, abs=1e-12)
        assert set(terms) == {"l1", "ssim", "edgediff", "backblur", "foreedge"}

    def test_zero_weights(self, rng):
        zero = LossWeights(0, 0, 0, 0, 0, 0, 0)
        total, _ = pretrain_loss(rng.random((3, 16, 16)), rng.random((3, 16, 16)),
                                 rng.random((3, 16, 16)), rng.random((16, 16)), zero)
        assert total == 0

    def test_composition_of_terms(self):
        inp = _step16()
        pred = np.full_like(inp, 0.25)
        target = np.full_like(inp, 0.75)
        m = np.zeros((16, 16))
        m[:, :8] = 1
        total, terms = pretrain_loss(inp, pred, target, m)
        expected = {
            "l1": l1_loss(pred, target), "ssim": ssim_loss(pred, target),
            "edgediff": edge_difference_loss(inp, pred, m),
            "backblur": background_blur_loss(pred, m), "foreedge": foreground_edge_loss(pred, m),
        }
        for k, v in expected.items():
            assert terms[k] == pytest.approx(v, abs=1e-15)
        assert terms["l1"] == 0.5
        w = LossWeights()
        assert total == pytest.approx(0.5 * expected["l1"] + 0.05 * expected["ssim"]
                                      + 0.005 * expected["edgediff"] + 0.1 * expected["backblur"]
                                      + 0.005 * expected["foreedge"], abs=1e-15)
        assert (w.alpha, w.zeta, w.kappa, w.mu, w.nu) == (0.5, 0.05, 0.005, 0.1, 0.005)

    def test_linear_in_weights(self, rng):
        args = (rng.random((3, 16, 16)), rng.random((3, 16, 16)), rng.random((3, 16, 16)), rng.random((16, 16)))
        one, _ = pretrain_loss(*args, LossWeights())
        two, _ = pretrain_loss(*args, LossWeights().scaled(2.0))
        assert two == pytest.approx(2 * one, rel=1e-14)

    def test_weights_must_be_finite(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=float("nan"))

    def test_published_defaults(self):
        assert LossWeights() == LossWeights(0.5, 0.1, 0.05, 1.0, 0.005, 0.1, 0.005)


class TestGradients:
    def test_l1_above_target(self, rng):
        target = rng.random((3, 4, 4)) * 0.5
        g = loss_gradient("l1", target + 0.1, {"target": target})
        np.testing.assert_allclose(g, 1 / 48, rtol=0, atol=1e-18)

    def test_backblur_constant_is_zero(self):
        g = loss_gradient("backblur", np.full((3, 6, 6), 0.3), {"mask": np.zeros((6, 6))})
        np.testing.assert_array_equal(g, 0)

    def test_unknown_tag(self):
        with pytest.raises(KeyError):
            loss_value("vgg", np.zeros((1, 4, 4)), {})

    def test_constant_loss_has_zero_fd(self):
        # foreedge with an empty mask is identically zero
        fd = finite_diff_gradient("foreedge", np.random.default_rng(0).random((1, 5, 5)),
                                  {"mask": np.zeros((5, 5))})
        np.testing.assert_array_equal(fd, 0)

    def test_fd_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_gradient("l1", np.zeros((1, 2, 2)), {"target": np.ones((1, 2, 2))}, eps=0)

    def test_richardson(self):
        # on a smooth term the central-difference error shrinks as eps**2
        pred, ctx = gradcheck_inputs("ssim", 0, size=12)
        g = loss_gradient("ssim", pred, ctx)
        e1 = np.abs(finite_diff_gradient("ssim", pred, ctx, 0.02) - g).max()
        e2 = np.abs(finite_diff_gradient("ssim", pred, ctx, 0.01) - g).max()
        assert 3.5 < e1 / e2 < 4.5

    @pytest.mark.parametrize("tag", LOSS_TERMS)
    def test_matches_finite_differences(self, tag):
        for seed in (0, 1):
            pred, ctx = gradcheck_inputs(tag, seed)
            err = relative_error(loss_gradient(tag, pred, ctx), finite_diff_gradient(tag, pred, ctx))
            assert err <= 1e-4, (tag, seed, err)

    def test_kink_margin_positive_on_inputs(self):
        for tag in LOSS_TERMS:
            pred, ctx = gradcheck_inputs(tag, 3)
            assert losses.kink_margin(tag, pred, ctx) >= 1e-4
