import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcdd.errors import ConfigurationError, LoadError, UsageError
from fcdd.model import (
    ArchitectureSpec,
    LayerSpec,
    build,
    bn,
    conv,
    load_model,
    lrelu,
    maxpool,
    parse_architecture,
    preset,
    receptive_field,
    save_model,
)
from fcdd.numerics import Tensor
from generators import random_geometry_spec
from rf_probe import analytic_field, empirical_field


# receptive field -----------------------------------------------------------------

def test_rf_single_conv():
    rf = receptive_field([conv(1, 1, 3, 1, 1)])
    assert (rf.rf_size, rf.cumulative_stride) == (3, 1)


def test_rf_two_convs():
    rf = receptive_field([conv(1, 1, 3, 1, 1), conv(1, 1, 3, 1, 1)])
    assert (rf.rf_size, rf.cumulative_stride) == (5, 1)


def test_rf_two_strided_convs_match_perturbation():
    spec = ArchitectureSpec((conv(1, 1, 3, 2, 1), conv(1, 1, 3, 2, 1)), (1, 16, 16))
    rf = receptive_field(spec)
    assert (rf.rf_size, rf.cumulative_stride) == (7, 4)
    for i, j in [(0, 0), (1, 2), (3, 3)]:
        np.testing.assert_array_equal(empirical_field(spec, i, j), analytic_field(spec, i, j))


@given(st.integers(0, 10**6))
def test_rf_matches_perturbation_oracle(seed):
    rng = np.random.default_rng(seed)
    spec = random_geometry_spec(rng)
    u, v = spec.output_shape()
    for i, j in {(0, 0), (u - 1, v - 1), (u // 2, v // 2)}:
        np.testing.assert_array_equal(empirical_field(spec, i, j), analytic_field(spec, i, j))


@given(st.integers(0, 10**6))
def test_rf_bounding_box_with_skipping_strides(seed):
    spec = random_geometry_spec(np.random.default_rng(seed), gaps=True)
    u, v = spec.output_shape()
    for i, j in {(0, 0), (u - 1, v - 1)}:
        emp, ana = empirical_field(spec, i, j), analytic_field(spec, i, j)
        rows, cols = np.flatnonzero(emp.any(1)), np.flatnonzero(emp.any(0))
        arows, acols = np.flatnonzero(ana.any(1)), np.flatnonzero(ana.any(0))
        assert (rows.min(), rows.max(), cols.min(), cols.max()) == (arows.min(), arows.max(), acols.min(), acols.max())
        assert not np.any(emp & ~ana)


@given(st.integers(0, 10**6))
def test_rf_invariants(seed):
    rf = receptive_field(random_geometry_spec(np.random.default_rng(seed)))
    assert rf.rf_size >= 1 and rf.cumulative_stride >= 1
    assert -rf.rf_size <= rf.center_offset <= rf.rf_size


@given(st.integers(0, 10**6))
def test_output_grows_by_one_per_stride(seed):
    spec = random_geometry_spec(np.random.default_rng(seed))
    _, h, w = spec.input_shape
    s = receptive_field(spec).cumulative_stride
    u, v = spec.output_shape((h, w))
    assert spec.output_shape((h + s, w + s)) == (u + 1, v + 1)


# presets ------------------------------------------------------------------------

@pytest.mark.parametrize(
    "name, shape, rf_size, stride, out",
    [("fmnist28", (1, 28, 28), 10, 4, (7, 7)), ("cifar32", (3, 32, 32), 18, 4, (8, 8))],
)
def test_preset_geometry(name, shape, rf_size, stride, out):
    spec = preset(name)
    assert spec.input_shape == shape
    rf = receptive_field(spec)
    assert (rf.rf_size, rf.cumulative_stride) == (rf_size, stride)
    assert spec.output_shape() == out


def test_fmnist_forward_shape_matches_geometry():
    model = build(preset("fmnist28", width_scale=0.125))
    out = model.forward(np.zeros((1, 1, 28, 28), np.float32))
    assert out.shape == (1, 1) + preset("fmnist28").output_shape()


def test_vgg_preset_geometry():
    spec = preset("vgg224like")
    assert spec.input_shape == (3, 224, 224)
    assert spec.output_shape() == (28, 28)
    assert receptive_field(spec).cumulative_stride == 8


def test_cifar_first_kernel_17_covers_image():
    rf = receptive_field(preset("cifar32", first_kernel=17))
    assert rf.rf_size >= 32
    assert rf.start_offset <= 0


def test_unknown_preset_and_even_kernel():
    with pytest.raises(UsageError):
        preset("resnet")
    with pytest.raises(ConfigurationError):
        preset("cifar32", first_kernel=4)


# spec validation and text format -------------------------------------------------------

def test_final_layer_constraints():
    with pytest.raises(ConfigurationError):
        ArchitectureSpec((conv(1, 2, 3),), (1, 8, 8))
    with pytest.raises(ConfigurationError):
        ArchitectureSpec((conv(1, 1, 3, bias=False),), (1, 8, 8))
    with pytest.raises(ConfigurationError):
        ArchitectureSpec((conv(1, 1, 3), lrelu()), (1, 8, 8))


def test_channel_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        ArchitectureSpec((conv(1, 4, 3), conv(3, 1, 1)), (1, 8, 8))


def test_pooling_below_one_pixel_rejected():
    with pytest.raises(ConfigurationError):
        ArchitectureSpec((maxpool(2), maxpool(2), maxpool(2), conv(1, 1, 1)), (1, 4, 4))


def test_layer_kind_validated():
    with pytest.raises(ConfigurationError):
        LayerSpec("dense")


@given(st.integers(0, 10**6))
def test_text_roundtrip(seed):
    spec = random_geometry_spec(np.random.default_rng(seed), channels=2)
    back = parse_architecture(spec.to_text())
    assert back.layers == spec.layers
    assert back.input_shape == spec.input_shape


def test_parse_rejects_dense_and_unknown_keys():
    with pytest.raises(ConfigurationError):
        parse_architecture("input c=1 h=8 w=8\ndense in=64 out=1\n")
    with pytest.raises(ConfigurationError):
        parse_architecture("input c=1 h=8 w=8\nconv in=1 out=1 k=3 dilation=2\n")
    with pytest.raises(ConfigurationError):
        parse_architecture("conv in=1 out=1 k=3\n")  # no input shape


def test_parse_comments_and_booleans():
    spec = parse_architecture("# tiny\ninput c=1 h=8 w=8\nconv in=1 out=2 k=3 p=1 bias=false\nrelu\nconv in=2 out=1 k=1\n")
    assert spec.layers[0].bias is False
    assert spec.layers[1].alpha == 0.0


# build and forward ------------------------------------------------------------------

def small_spec():
    return ArchitectureSpec(
        (conv(2, 4, 3, 1, 1, bias=False), bn(), lrelu(), maxpool(2), conv(4, 1, 1)), (2, 8, 8)
    )


def test_build_is_seeded():
    a, b, c = build(small_spec(), 3), build(small_spec(), 3), build(small_spec(), 4)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


def test_parameter_count():
    model = build(small_spec())
    assert model.n_parameters() == 4 * 2 * 9 + 4 + 4 + 4 + 1


def test_zero_weights_give_bias_everywhere():
    spec = small_spec()
    model = build(spec)
    for name, p in model.params.items():
        if name.endswith(".weight"):
            p.data[:] = 0
    model.center_bias.data[:] = 0.75
    x = np.random.default_rng(0).normal(size=(3, 2, 8, 8))
    np.testing.assert_allclose(model.forward(x).data, 0.75)


def test_equal_images_give_equal_rows():
    x = np.random.default_rng(0).normal(size=(1, 2, 8, 8)).astype(np.float32)
    out = build(small_spec()).forward(np.concatenate([x, x]), "eval").data
    np.testing.assert_array_equal(out[0], out[1])


def test_shift_equivariance():
    spec = ArchitectureSpec((conv(1, 3, 3, 1, 1), lrelu(), maxpool(2), conv(3, 1, 3, 1, 1)), (1, 32, 32))
    model = build(spec, 1, np.float64)
    s = receptive_field(spec).cumulative_stride
    rng = np.random.default_rng(0)
    img = np.full((1, 1, 32, 32), 0.5)
    img[0, 0, 8:16, 8:16] = rng.random((8, 8))
    shifted = np.full_like(img, 0.5)
    shifted[0, 0, 8 + s : 16 + s, 8 + s : 16 + s] = img[0, 0, 8:16, 8:16]
    a = model.forward(img).data[0, 0]
    b = model.forward(shifted).data[0, 0]
    np.testing.assert_allclose(b[3:12, 3:12], a[2:11, 2:11], atol=1e-5)


def test_forward_shape_errors():
    model = build(small_spec())
    with pytest.raises(UsageError):
        model.forward(np.zeros((1, 3, 8, 8)))
    with pytest.raises(UsageError):
        model.forward(np.zeros((1, 2, 1, 1)))
    with pytest.raises(UsageError):
        model.forward(np.zeros((2, 2, 8, 8)), mode="test")


def test_train_mode_updates_running_stats_only_in_train():
    model = build(small_spec())
    x = np.random.default_rng(0).normal(size=(4, 2, 8, 8)).astype(np.float32)
    before = {k: v.copy() for k, v in model.buffers.items()}
    model.forward(x, "eval")
    assert all(np.array_equal(before[k], model.buffers[k]) for k in before)
    model.forward(x, "train")
    assert not np.array_equal(before["1.running_mean"], model.buffers["1.running_mean"])


def test_save_load_roundtrip(tmp_path):
    model = build(small_spec(), 5)
    model.forward(np.random.default_rng(0).normal(size=(4, 2, 8, 8)), "train")
    path = tmp_path / "m.ckpt"
    save_model(model, path, {"meta/sigma": np.array([2.0])})
    back, tensors = load_model(path)
    assert back.spec == model.spec
    assert tensors["meta/sigma"][0] == 2.0
    x = np.random.default_rng(1).normal(size=(2, 2, 8, 8)).astype(np.float32)
    assert back.forward(x).data.tobytes() == model.forward(x).data.tobytes()


def test_load_corrupt_model(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"FCDD\x01\x00")
    with pytest.raises(LoadError):
        load_model(path)


def test_state_dict_shape_mismatch():
    model = build(small_spec())
    state = model.state_dict()
    state["0.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(UsageError):
        model.load_state_dict(state)


def test_input_tensor_gradient_flows():
    model = build(small_spec(), dtype=np.float64)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 8, 8)), requires_grad=True, dtype=np.float64)
    model.forward(x, "train").sum().backward()
    assert np.any(x.grad != 0)
