import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadunet import autodiff as ad
from cadunet.autodiff import NonFiniteError, ShapeError, Tensor
from cadunet.gradcheck import gradcheck

from oracles import bilinear_up2, conv2d_loops, maxpool_windows


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- conv2d


def test_conv_all_ones_centre_and_corner():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_conv_zero_kernel_gives_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    assert not ad.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), padding=1).data.any()


@pytest.mark.parametrize("stride,padding,k", [(2, 1, 3), (1, 1, 3), (1, 0, 1), (1, 2, 5), (2, 2, 5)])
def test_conv_matches_nested_loops(stride, padding, k):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding), atol=1e-12, rtol=0)


def test_grouped_conv_matches_nested_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((6, 2, 5, 5))
    got = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=2, groups=2).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, None, 2, 2, groups=2), atol=1e-12, rtol=0)


def test_conv_output_extent_formula():
    for h, k, s, p in [(7, 3, 2, 1), (8, 5, 2, 2), (9, 1, 1, 0), (10, 3, 3, 0)]:
        out = ad.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


def test_conv_is_linear_in_input():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((2, 1, 2, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    lhs = ad.conv2d(Tensor(2.5 * x - 0.75 * y), w, padding=1).data
    rhs = 2.5 * ad.conv2d(Tensor(x), w, padding=1).data - 0.75 * ad.conv2d(Tensor(y), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3, 5, 5\).*\(2, 2, 3, 3\)"):
        ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))))


def test_conv_output_independent_of_batch_companions():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 8, 8)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
    full = ad.conv2d(Tensor(x), w, padding=1).data
    alone = ad.conv2d(Tensor(x[1:2]), w, padding=1).data
    assert np.array_equal(full[1:2], alone)


# ---------------------------------------------------------------- pooling and upsampling


def test_maxpool_small_cases():
    assert ad.maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0
    const = ad.maxpool2(Tensor(np.full((1, 2, 4, 6), 1.5))).data
    assert const.shape == (1, 2, 2, 3) and np.all(const == 1.5)


def test_maxpool_matches_window_enumeration():
    x = np.random.default_rng(6).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(ad.maxpool2(Tensor(x)).data, maxpool_windows(x))


def test_maxpool_gradient_goes_to_first_tied_element():
    x = leaf(np.full((1, 1, 2, 2), 3.0))
    ad.backward(ad.sum(ad.maxpool2(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_odd_extent_asks_for_padding():
    with pytest.raises(ShapeError, match="pad"):
        ad.maxpool2(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample_constant_and_single_pixel():
    up = ad.upsample2(Tensor(np.full((1, 1, 3, 5), 2.25))).data
    assert up.shape == (1, 1, 6, 10) and np.all(up == 2.25)
    np.testing.assert_array_equal(ad.upsample2(Tensor([[[[7.0]]]])).data, np.full((1, 1, 2, 2), 7.0))


def test_upsample_matches_interpolation_formula():
    x = np.random.default_rng(7).standard_normal((1, 2, 3, 3))
    np.testing.assert_allclose(ad.upsample2(Tensor(x)).data, bilinear_up2(x), atol=1e-12)


# ---------------------------------------------------------------- batchnorm


def _bn(x, gamma, beta, training=True, mean=None, var=None):
    c = x.shape[1]
    rm = np.zeros(c) if mean is None else mean
    rv = np.ones(c) if var is None else var
    return ad.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training), rm, rv


def test_batchnorm_train_moments():
    x = np.random.default_rng(8).normal(3.0, 2.0, (4, 3, 5, 5))
    out, _, _ = _bn(x, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_standardized_input_passes_through():
    x = np.random.default_rng(9).standard_normal((4, 2, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _, _ = _bn(x, np.ones(2), np.zeros(2))
    # the only change is the epsilon in the denominator
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=5e-6 + 1e-9, atol=0)


def test_batchnorm_zero_gamma_outputs_beta():
    x = np.random.default_rng(10).standard_normal((2, 3, 4, 4))
    beta = np.array([0.5, -1.0, 2.0])
    out, _, _ = _bn(x, np.zeros(3), beta)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_batchnorm_running_statistics_update():
    x = np.random.default_rng(11).standard_normal((2, 2, 3, 3))
    _, rm, rv = _bn(x, np.ones(2), np.zeros(2))
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_uses_running_statistics():
    x = np.random.default_rng(12).standard_normal((1, 2, 2, 2))
    mean, var = np.array([1.0, -2.0]), np.array([4.0, 0.25])
    out, rm, _ = _bn(x, np.ones(2), np.zeros(2), training=False, mean=mean, var=var)
    expect = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)
    np.testing.assert_array_equal(rm, [1.0, -2.0])


def test_batchnorm_single_value_channel_rejected_in_training():
    with pytest.raises(ValueError, match="at least 2"):
        _bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


# ---------------------------------------------------------------- pointwise


def test_pointwise_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert ad.sigmoid(Tensor(0.0)).data == 0.5
    a = Tensor(np.random.default_rng(13).standard_normal((1, 2, 3, 3)))
    b = Tensor(np.zeros((1, 3, 3, 3)))
    cat = ad.concat_channels([a, b])
    assert cat.shape == (1, 5, 3, 3)
    assert np.array_equal(cat.data[:, :2], a.data)


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize("op", [ad.add, ad.mul])
def test_pointwise_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


# ---------------------------------------------------------------- backward


def test_linear_loss_gradient_is_input():
    x = np.random.default_rng(14).standard_normal((3, 4))
    w = leaf(np.ones((3, 4)))
    (g,) = ad.backward(ad.sum(ad.mul(w, Tensor(x))), [w])
    np.testing.assert_array_equal(g, x)


def test_sigmoid_gradient_at_zero():
    w = leaf(0.0)
    (g,) = ad.backward(ad.scale(ad.sigmoid(w), 3.0), [w])
    assert g == pytest.approx(0.75)


def test_reused_parameter_accumulates():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 3))
    w = leaf(rng.standard_normal((2, 3)))
    (twice,) = ad.backward(ad.sum(ad.add(ad.mul(w, Tensor(x)), ad.mul(w, w))), [w])
    w2 = leaf(w.data.copy())
    w3 = leaf(w.data.copy())
    g2, g3 = ad.backward(ad.sum(ad.add(ad.mul(w2, Tensor(x)), ad.mul(w3, Tensor(w.data)))), [w2, w3])
    # d/dw of w*x + w*w is x + 2w; the single-use form gives x and w from each copy
    np.testing.assert_allclose(twice, g2 + 2 * g3, atol=1e-12)


def test_unreached_parameter_gets_zero_gradient():
    a, b = leaf(np.ones(3)), leaf(np.full(3, 2.0))
    ga, gb = ad.backward(ad.sum(ad.scale(a, 2.0)), [a, b])
    np.testing.assert_array_equal(ga, 2.0)
    np.testing.assert_array_equal(gb, 0.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        ad.backward(ad.scale(leaf(np.ones(3)), 1.0))


def test_deep_chain_does_not_recurse():
    x = leaf(1.0)
    y = x
    for _ in range(5000):
        y = ad.scale(y, 1.0)
    (g,) = ad.backward(y, [x])
    assert g == 1.0


def test_checked_mode_rejects_non_finite():
    with ad.checked(), np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError, match="mul"):
            ad.mul(Tensor([np.inf]), Tensor([0.0]))
    ad.mul(Tensor([np.inf]), Tensor([1.0]))  # unchecked: no error


def test_repeated_runs_are_bit_identical():
    def run():
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = leaf(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        y = ad.sum(ad.sigmoid(ad.upsample2(ad.maxpool2(ad.conv2d(x, w, padding=1)))))
        (g,) = ad.backward(y, [w])
        return y.data, g

    (a, ga), (b, gb) = run(), run()
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


# ---------------------------------------------------------------- gradcheck API


def test_gradcheck_examples():
    rep = gradcheck(lambda x, w: ad.conv2d(x, w, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3)], seed=0)
    assert rep.max_rel_err < 1e-4 and rep.checks == 50 + 54
    assert gradcheck(lambda s: ad.squash(s), [(6, 8)], seed=1).max_rel_err < 1e-4


def test_gradcheck_is_deterministic_and_reports_failures():
    first = gradcheck(ad.sigmoid, [(3, 3)], seed=4)
    assert first.max_rel_err == gradcheck(ad.sigmoid, [(3, 3)], seed=4).max_rel_err

    def wrong(x):
        # forward is x*x but backward claims x
        return ad._make(x.data ** 2, (x,), lambda g: (g * x.data,), "wrong")

    bad = gradcheck(wrong, [(4,)], seed=0)
    assert not bad.passed and bad.max_rel_err > 0.1


def test_gradcheck_skips_kink_crossings():
    # relu exactly at 0: every perturbation switches branch and is left out
    rep = gradcheck(ad.relu, [np.array([0.0, 1.0])], seed=0)
    assert rep.skipped == 1 and rep.checks == 1 and rep.passed


# ---------------------------------------------------------------- serialization


def test_cadt_round_trip_and_layout(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    path = tmp_path / "t.cadt"
    ad.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"CADT"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert [int.from_bytes(raw[8 + 8 * i:16 + 8 * i], "little") for i in range(3)] == [2, 3, 4]
    assert len(raw) == 8 + 24 + 4 * 24
    np.testing.assert_array_equal(ad.load_tensor(path), arr)


def test_cadt_rejects_truncated_file(tmp_path):
    path = tmp_path / "t.cadt"
    ad.save_tensor(path, np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(ValueError, match="payload"):
        ad.load_tensor(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_upsample_preserves_constants_property(n, c, h, w):
    up = ad.upsample2(Tensor(np.full((n, c, h, w), -0.625))).data
    assert up.shape == (n, c, 2 * h, 2 * w) and np.all(up == -0.625)
