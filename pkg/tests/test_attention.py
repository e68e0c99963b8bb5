import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daffnet.attention import EPSA, EpsaSpec, SaSpec, SpatialAttention
from daffnet.gradsuite import run_case
from daffnet.tensor import ShapeError, Tensor


def epsa(channels, kernels=(3, 5, 7, 9), groups=(1, 4, 8, 16), reduction=2, seed=0):
    return EPSA(EpsaSpec(channels, kernels, groups, reduction), np.random.default_rng(seed))


class TestEpsaSpec:
    def test_defaults(self):
        spec = EpsaSpec(16)
        assert spec.kernels == (3, 5, 7, 9) and spec.branches == 4 and spec.branch_width == 4

    def test_groups_capped_at_branch_width(self):
        spec = EpsaSpec(16)
        assert [spec.branch_groups(i) for i in range(4)] == [1, 4, 4, 4]
        assert [EpsaSpec(24).branch_groups(i) for i in range(4)] == [1, 3, 6, 6]

    def test_errors(self):
        with pytest.raises(ShapeError):
            EpsaSpec(10)
        with pytest.raises(ShapeError):
            EpsaSpec(8, kernels=(3, 4), groups=(1, 1))


class TestEpsa:
    def test_equal_descriptors_give_uniform_weights(self):
        block = epsa(16)
        _, w = block.forward_with_weights(Tensor(np.zeros((2, 16, 5, 5))))
        np.testing.assert_allclose(w.data, 0.25, atol=1e-7)

    def test_single_branch_equals_conv_and_se_path(self, rng):
        block = epsa(6, kernels=(3,), groups=(2,))
        x = Tensor(rng.standard_normal((2, 6, 5, 5)))
        out, w = block.forward_with_weights(x)
        conv_out = block.convs[0](x).data
        # reference path: conv, SE descriptor, softmax over the one branch
        d = block.descriptors(block.convs[0](x)).data[:, None, :]
        ref_w = np.exp(d - d) / np.exp(d - d).sum(axis=1, keepdims=True)
        np.testing.assert_array_equal(w.data, ref_w)
        np.testing.assert_array_equal(out.data, conv_out * ref_w[:, 0, :, None, None])

    def test_hand_set_descriptors(self, monkeypatch):
        block = epsa(4, kernels=(3, 3), groups=(1, 1))
        for conv in block.convs:  # centre tap identity, so each branch passes its input through
            conv.weight.data[:] = 0
            conv.weight.data[:, :, 1, 1] = np.eye(2)
        values = iter([2.0, 1.0])
        monkeypatch.setattr(block, "descriptors", lambda f: Tensor(np.full((1, 2), next(values))))
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
        out, w = block.forward_with_weights(Tensor(x))
        hi, lo = np.e / (np.e + 1), 1 / (np.e + 1)
        np.testing.assert_allclose(w.data[0], [[hi, hi], [lo, lo]], rtol=1e-6)
        np.testing.assert_allclose(out.data.ravel(), [hi, 2 * hi, 3 * lo, 4 * lo], rtol=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_weights_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        block = epsa(16, seed=seed)
        _, w = block.forward_with_weights(Tensor(r.standard_normal((2, 16, 6, 6)) * 3))
        assert np.all(w.data > 0)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(branches=st.integers(1, 4), width=st.integers(1, 3), hw=st.integers(1, 6))
    def test_shape_preserved(self, branches, width, hw):
        kernels = (3, 5, 7, 9)[:branches]
        block = epsa(branches * width, kernels, (1, 4, 8, 16)[:branches])
        x = Tensor(np.random.default_rng(0).standard_normal((2, branches * width, hw, hw)))
        assert block(x).shape == x.shape

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            epsa(8)(Tensor(np.zeros((1, 4, 3, 3))))

    def test_gradcheck(self):
        assert run_case("epsa").passed


class TestSpatialAttention:
    def test_zero_conv_gives_half(self, rng):
        sa = SpatialAttention(SaSpec(), rng)
        sa.conv.weight.data[:] = 0
        sa.conv.bias.data[:] = 0
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(sa(Tensor(x)).data, 0.5 * x)

    def test_saturated_bias_passes_through(self, rng):
        sa = SpatialAttention(SaSpec(), rng).to(np.float64)
        sa.conv.weight.data[:] = 0
        sa.conv.bias.data[:] = 100.0
        x = rng.standard_normal((2, 3, 5, 5))
        np.testing.assert_allclose(sa(Tensor(x)).data, x, atol=1e-6)

    def test_matches_brute_force_mask(self, rng):
        sa = SpatialAttention(SaSpec(3), rng).to(np.float64)
        x = rng.standard_normal((2, 4, 5, 6))
        pooled = np.stack([x.mean(axis=1), x.max(axis=1)], axis=1)
        padded = np.pad(pooled, ((0, 0), (0, 0), (1, 1), (1, 1)))
        w, b = sa.conv.weight.data, sa.conv.bias.data
        mask = np.zeros((2, 5, 6))
        for n in range(2):
            for i in range(5):
                for j in range(6):
                    mask[n, i, j] = (padded[n, :, i:i + 3, j:j + 3] * w[0]).sum() + b[0]
        mask = 1 / (1 + np.exp(-mask))
        np.testing.assert_allclose(sa(Tensor(x)).data, x * mask[:, None], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_never_amplifies(self, seed):
        r = np.random.default_rng(seed)
        sa = SpatialAttention(SaSpec(), r)
        x = Tensor(r.standard_normal((1, 3, 4, 4)) * 10)
        assert np.all(np.abs(sa(x).data) <= np.abs(x.data))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            SaSpec(4)

    def test_gradcheck(self):
        assert run_case("spatial-attention").passed
