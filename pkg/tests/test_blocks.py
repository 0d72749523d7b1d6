import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sevnet import tensor as T
from sevnet.blocks import Block, BlockSpec, main_conv_specs, shortcut_conv_spec
from sevnet.layers import SEUnit
from sevnet.tensor import Tensor


def conv_weight_count(block: Block) -> int:
    return sum(
        p.size for name, p in block.named_parameters()
        if "conv" in name and name.endswith("weight")
    )


def symbolic_conv_count(spec: BlockSpec) -> int:
    # independent tally from the conv spec definitions
    total = sum(
        cs.out_channels * (cs.in_channels // cs.groups) * cs.kernel_volume
        for cs in main_conv_specs(spec)
    )
    if spec.downsample:
        sc = shortcut_conv_spec(spec)
        total += sc.out_channels * sc.in_channels * sc.kernel_volume
    return total


def zero_residual_branch(block: Block) -> None:
    for conv in block.convs:
        conv.weight.data[...] = 0.0
    for bn in block.bns:
        bn.gamma.data[...] = 0.0


class TestSevBlock:
    def test_zeroed_branch_is_exact_identity(self):
        rng = np.random.default_rng(0)
        block = Block(BlockSpec("sev", 8, 4), rng, dtype=np.float64)
        zero_residual_branch(block)
        x = Tensor(rng.normal(size=(2, 8, 3, 6, 6)))
        for training in (True, False):
            out = block.forward(x, training=training)
            np.testing.assert_array_equal(out.data, x.data)

    def test_conv_param_count_c512_g8(self):
        spec = BlockSpec("sev", 512, 8)
        assert symbolic_conv_count(spec) == 1_085_440
        block = Block(spec, np.random.default_rng(1))
        assert conv_weight_count(block) == 1_085_440

    def test_downsample_conv_param_count_c128_g8(self):
        spec = BlockSpec("sev", 128, 8, downsample=True)
        assert symbolic_conv_count(spec) == 91_136
        block = Block(spec, np.random.default_rng(2))
        assert conv_weight_count(block) == 91_136

    def test_group_width_must_divide_channels(self):
        with pytest.raises(ValueError, match="does not divide"):
            BlockSpec("sev", 10, 4)

    @settings(max_examples=20, deadline=None)
    @given(
        st.sampled_from([1, 2, 4]),
        st.integers(1, 3),
        st.integers(1, 3),
        st.sampled_from([4, 6]),
        st.integers(0, 2**31 - 1),
    )
    def test_standard_block_preserves_shape(self, g, c_mult, t, hw, seed):
        c = g * c_mult
        rng = np.random.default_rng(seed)
        block = Block(BlockSpec("sev", c, g), rng)
        x = Tensor(rng.normal(size=(1, c, t, hw, hw)).astype(np.float32))
        with T.no_grad():
            out = block.forward(x, training=False)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out.data))

    @settings(max_examples=20, deadline=None)
    @given(
        st.sampled_from(["sev", "r2plus1d", "r3d"]),
        st.sampled_from([2, 4]),
        st.integers(1, 2),
        st.sampled_from([4, 8]),
        st.integers(0, 2**31 - 1),
    )
    def test_downsample_block_shape_contract(self, kind, c, t, hw, seed):
        rng = np.random.default_rng(seed)
        block = Block(BlockSpec(kind, c, 2, downsample=True), rng)
        x = Tensor(rng.normal(size=(1, c, t, hw, hw)).astype(np.float32))
        with T.no_grad():
            out = block.forward(x, training=False)
        assert out.shape == (1, 2 * c, t, hw // 2, hw // 2)
        assert np.all(np.isfinite(out.data))

    def test_downsample_table_shape(self):
        rng = np.random.default_rng(3)
        block = Block(BlockSpec("sev", 32, 8, downsample=True), rng)
        x = Tensor(rng.normal(size=(1, 32, 16, 112, 112)).astype(np.float32))
        with T.no_grad():
            out = block.forward(x, training=False)
        assert out.shape == (1, 64, 16, 56, 56)

    def test_downsample_rejects_odd_spatial(self):
        rng = np.random.default_rng(4)
        block = Block(BlockSpec("sev", 4, 2, downsample=True), rng)
        x = Tensor(np.zeros((1, 4, 2, 5, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="even spatial"):
            block.forward(x)

    def test_shortcut_passes_constant_through(self):
        rng = np.random.default_rng(5)
        block = Block(BlockSpec("sev", 4, 2, downsample=True), rng,
                      dtype=np.float64)
        w = block.shortcut_conv.weight
        w.data[...] = np.eye(4).reshape(4, 4, 1, 1, 1)
        c = 0.37
        x = Tensor(np.full((1, 4, 2, 4, 4), c))
        pooled = T.avg_pool3d(x, (1, 2, 2), (1, 2, 2))
        s = block.shortcut_bn.forward(
            block.shortcut_conv.forward(pooled), training=False
        )
        np.testing.assert_allclose(T.relu(s).data, c, rtol=1e-5)


class TestAblationBlocks:
    @pytest.mark.parametrize("kind", ["r2plus1d", "r3d"])
    def test_middle_widths(self, kind):
        spec = BlockSpec(kind, 64, 8)
        assert spec.middle_channels == (32 if kind == "r2plus1d" else 25)

    @pytest.mark.parametrize("kind", ["r2plus1d", "r3d"])
    def test_zeroed_branch_is_identity(self, kind):
        rng = np.random.default_rng(6)
        block = Block(BlockSpec(kind, 6, 2), rng, dtype=np.float64)
        zero_residual_branch(block)
        x = Tensor(rng.normal(size=(1, 6, 2, 4, 4)))
        out = block.forward(x, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_r3d_uses_cubic_kernel(self):
        specs = main_conv_specs(BlockSpec("r3d", 26, 2))
        assert [cs.kernel for cs in specs] == [(1, 1, 1), (3, 3, 3), (1, 1, 1)]
        assert specs[1].in_channels == specs[1].out_channels == 10  # round(26/2.6)

    def test_r2plus1d_spatial_then_temporal(self):
        specs = main_conv_specs(BlockSpec("r2plus1d", 16, 2))
        assert [cs.kernel for cs in specs] == [(1, 1, 1), (1, 3, 3), (3, 1, 1)]
        assert all(cs.groups == 1 for cs in specs)


class TestSEUnit:
    def test_zero_gate_weights_halve_the_branch(self):
        rng = np.random.default_rng(7)
        se = SEUnit(8, 4, rng, dtype=np.float64)
        se.fc2.weight.data[...] = 0.0
        x = Tensor(rng.normal(size=(2, 8, 3, 4, 4)))
        out = se.forward(x)
        np.testing.assert_allclose(out.data, x.data / 2, atol=1e-12)

    def test_scale_lies_in_unit_interval(self):
        rng = np.random.default_rng(8)
        se = SEUnit(8, 4, rng, dtype=np.float64)
        for _ in range(5):
            x = rng.normal(size=(1, 8, 2, 3, 3)) * rng.uniform(0.1, 10)
            out = se.forward(Tensor(x)).data
            scale = out / np.where(x == 0, 1, x)
            scale = scale[x != 0]
            assert np.all(scale > 0) and np.all(scale < 1)

    def test_block_applies_gate_before_merge(self):
        rng = np.random.default_rng(9)
        block = Block(BlockSpec("sev", 8, 4, se_enabled=True), rng,
                      dtype=np.float64)
        zero_residual_branch(block)
        x = Tensor(rng.normal(size=(1, 8, 2, 4, 4)))
        # branch is zero regardless of the gate, so identity still holds
        out = block.forward(x, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_reduction_must_divide_channels(self):
        with pytest.raises(ValueError, match="reduction"):
            SEUnit(6, 4, np.random.default_rng(0))


class TestBlockGradients:
    @pytest.mark.parametrize("kind", ["r2plus1d", "r3d"])
    def test_ablation_block_gradients(self, kind):
        from sevnet.gradcheck import TOLERANCE, compare_gradients

        rng = np.random.default_rng(10)
        block = Block(BlockSpec(kind, 6, 2), rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 6, 2, 4, 4)), requires_grad=True)
        leaves = [x] + [p for _, p in block.named_parameters()]
        proj = rng.normal(size=(1, 6, 2, 4, 4))

        def forward():
            return T.reduce_sum(T.mul(block.forward(x, training=True), proj))

        assert compare_gradients(forward, leaves) < TOLERANCE

    def test_se_block_gradient(self):
        from sevnet.gradcheck import TOLERANCE, compare_gradients

        rng = np.random.default_rng(11)
        block = Block(BlockSpec("sev", 4, 2, se_enabled=True), rng,
                      dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 4, 3, 4, 4)), requires_grad=True)
        leaves = [x] + [p for _, p in block.named_parameters()]
        proj = rng.normal(size=(1, 4, 3, 4, 4))

        def forward():
            return T.reduce_sum(T.mul(block.forward(x, training=True), proj))

        assert compare_gradients(forward, leaves) < TOLERANCE
