import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densecat.analysis import effective_rank, to_feature_matrix
from densecat.blocks import (MixerConfig, TransitionConfig, build_classic_dense_block,
                             build_dense_stage, build_feature_mixer, build_stem, build_transition,
                             dense_stage_trace)
from densecat.cost import count_params
from densecat.tensor import Tensor


def test_mixer_channels():
    assert build_feature_mixer(MixerConfig(64, 64)).channels()["mixer.concat"] == 128
    assert MixerConfig(64, 64, expansion_ratio=4).hidden == 256


def test_mixer_param_count_by_hand():
    cfg = MixerConfig(64, 64, expansion_ratio=4, kernel=7)
    dw = 64 * 49 + 64
    ln = 2 * 64
    pw1 = 64 * 256 + 256
    pw2 = 256 * 64 + 64
    assert count_params(build_feature_mixer(cfg)) == dw + ln + pw1 + pw2 == 36_416


def test_mixer_pipeline_order():
    kinds = [n.kind for n in build_feature_mixer(MixerConfig(8, 4, rescale=True)).nodes]
    assert kinds == ["conv", "layer_norm", "conv", "act", "conv", "rescale", "drop_path", "concat"]


@pytest.mark.parametrize("kwargs", [dict(growth_rate=0), dict(expansion_ratio=0.0), dict(expansion_ratio=-1.0)])
def test_mixer_rejects_bad_config(kwargs):
    base = dict(c_in=8, growth_rate=4)
    base.update(kwargs)
    with pytest.raises(ValueError):
        MixerConfig(**base)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 96), st.integers(1, 64), st.sampled_from([1.0, 2.0, 4.0]))
def test_mixer_output_is_input_plus_growth(c_in, gr, er):
    g = build_feature_mixer(MixerConfig(c_in, gr, er, kernel=3))
    assert g.channels()[g.output] == c_in + gr


def test_transition_rounding():
    assert TransitionConfig(512).c_out == 256
    assert TransitionConfig(328).c_out == 168


def test_transition_stride_two_halves_resolution():
    g = build_transition(TransitionConfig(64, stride=2))
    assert g.infer_shapes((1, 64, 56, 56))[g.output] == (1, 32, 28, 28)
    g = build_transition(TransitionConfig(64, stride=1))
    assert g.infer_shapes((1, 64, 56, 56))[g.output] == (1, 32, 56, 56)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2000), st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_transition_outputs_are_multiples_of_eight(c_in, ratio):
    c = TransitionConfig(c_in, ratio).c_out
    assert c % 8 == 0 and c >= ratio * c_in and c - ratio * c_in < 8


def test_stem_resolution_and_params():
    g = build_stem(48)
    assert g.infer_shapes((1, 3, 224, 224))[g.output] == (1, 48, 56, 56)
    assert g.infer_shapes((1, 3, 64, 64))[g.output] == (1, 48, 16, 16)
    assert count_params(g) == 48 * 3 * 16 + 48 + 2 * 48


def test_classic_block_channels_and_params():
    g = build_classic_dense_block(64, 32)
    assert g.channels()[g.output] == 96
    assert g.node("block.conv1").attrs["cout"] == 128
    assert count_params(g) == 64 * 4 * 32 + 4 * 32 * 9 * 32 + 2 * 64 + 2 * 4 * 32


def test_stage_trace_examples():
    assert dense_stage_trace(64, 64, 3)[:4] == [64, 128, 192, 256]
    g, _ = build_dense_stage(64, 16, 12, 3, kernel=3)
    assert sum(1 for n in g.nodes if n.name.startswith("stage.transitions") and n.kind == "conv") == 3
    assert all(n.attrs["stride"] == 1 for n in g.nodes if n.kind == "conv" and "transitions" in n.name)


def recurrence(c_in, gr, blocks, interval, ratio=0.5, rounding=8):
    c = c_in
    for i in range(1, blocks + 1):
        c = c + gr
        if i % interval == 0 and i != blocks:
            c = math.ceil(c * ratio / rounding) * rounding
    return c


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 256), st.integers(1, 64), st.sampled_from([(3, 3), (6, 3), (12, 3), (4, 2)]))
def test_stage_channel_trace_is_a_pure_function(c_in, gr, shape):
    blocks, interval = shape
    g, out = build_dense_stage(c_in, gr, blocks, interval, kernel=3, expansion_ratio=1.0)
    assert out == recurrence(c_in, gr, blocks, interval) == dense_stage_trace(c_in, gr, blocks, interval)[-1]


def test_stage_block_count_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        build_dense_stage(16, 8, 4, 3)


def test_drop_path_rate_zero_is_bit_identical_to_absence():
    cfg = MixerConfig(6, 4, 2.0, 3)
    g = build_feature_mixer(cfg).initialize(3)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 6, 5, 5)).astype(np.float32))
    rng = np.random.default_rng(1)
    state = rng.bit_generator.state
    a = g.forward(x, training=True, rng=rng).data
    assert rng.bit_generator.state == state
    b = g.forward(x, training=False).data
    np.testing.assert_array_equal(a, b)


def test_drop_path_zeroes_only_new_channels():
    g = build_feature_mixer(MixerConfig(6, 4, 2.0, 3, drop_rate=0.5)).initialize(3)
    x = Tensor(np.random.default_rng(0).standard_normal((64, 6, 4, 4)).astype(np.float32))
    out = g.forward(x, training=True, rng=np.random.default_rng(2)).data
    np.testing.assert_array_equal(out[:, :6], x.data)
    dropped = np.all(out[:, 6:] == 0, axis=(1, 2, 3))
    assert 0 < dropped.sum() < 64


def test_mixer_branch_rank_property_on_real_activations():
    g = build_feature_mixer(MixerConfig(8, 8, 2.0, 3)).initialize(0, precision="double")
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal((2, 8, 6, 6))
        # rank-deficient input: duplicate channels
        x[:, 4:] = x[:, :4]
        _, cap = g.forward(Tensor(x), capture=["mixer.drop_path"])
        fx = to_feature_matrix(x).values
        fy = to_feature_matrix(cap["mixer.drop_path"].data).values
        tol = 1e-6 * math.sqrt(fx.shape[0])
        assert effective_rank(np.hstack([fx, fy]), tol) >= effective_rank(fx, tol)
