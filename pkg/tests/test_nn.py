import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv2d, naive_maxpool, scalar_region, scalar_softmax
from tsrkit.errors import ShapeMismatch
from tsrkit.nn import (
    BadHeader, ConvSpec, ConvWeights, MissingField, Network, RegionSpec, SizeMismatch,
    UnknownSection, WeightHeader, WeightStore, activate, batch_norm, bundled_config, conv2d,
    count_flops, decode_region_arrays, dump_weights, fold_batch_norm, layer_flops, load_weights,
    maxpool, parse_network_spec, random_weights, read_weights, region_decode, sigmoid, softmax,
    zero_weights,
)
from tsrkit.nn.layers import reorg
from tsrkit.nn.spec import NetworkSpec

DATA = Path(__file__).parent / "data"


def rel_err(got, ref):
    """Largest absolute deviation, relative to the largest reference magnitude."""
    got, ref = np.asarray(got, np.float64), np.asarray(ref, np.float64)
    return float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-30))


def one_conv_cfg(filters=32, size=3, width=416, height=416, extra=""):
    return (f"[net]\nwidth={width}\nheight={height}\nchannels=3\n\n"
            f"[convolutional]\nfilters={filters}\nsize={size}\nstride=1\npad=1\n"
            f"activation=leaky\n{extra}")


# -- spec parsing -------------------------------------------------------------

def test_parse_one_conv():
    spec = parse_network_spec(one_conv_cfg())
    assert spec.shapes[0] == (32, 416, 416)


def test_parse_unknown_section():
    with pytest.raises(UnknownSection):
        parse_network_spec("[net]\nwidth=8\nheight=8\n[pooling]\nsize=2\n")


def test_parse_region_missing_anchors():
    text = one_conv_cfg(filters=9, size=1) + "\n[region]\nclasses=4\nnum=1\n"
    with pytest.raises(MissingField):
        parse_network_spec(text)


def test_parse_comments_and_case():
    text = "# header\n[NET]\nwidth=8 # trailing\nheight=8\n\n[maxpool]\nsize=2\nstride=2\n"
    spec = parse_network_spec(text)
    assert spec.output_shape == (3, 4, 4)


def test_region_channel_mismatch_reports_layer():
    text = one_conv_cfg(filters=8, size=1) + "\n[region]\nanchors=1,1\nclasses=4\nnum=1\n"
    with pytest.raises(ShapeMismatch) as info:
        parse_network_spec(text)
    assert info.value.layer_index == 1


def test_region_must_be_last():
    with pytest.raises(ShapeMismatch):
        NetworkSpec(8, 8, (RegionSpec(((1.0, 1.0),), 0), ConvSpec(5, 1)))
    with pytest.raises(ShapeMismatch):
        NetworkSpec(8, 8, (ConvSpec(5, 1), RegionSpec(((1.0, 1.0),), 0),
                           RegionSpec(((1.0, 1.0),), 0)))


# Backbone layout: (type, filters, kernel, output spatial size)
BACKBONE = [
    ("conv", 32, 3, 224), ("max", None, 2, 112), ("conv", 64, 3, 112), ("max", None, 2, 56),
    ("conv", 128, 3, 56), ("conv", 64, 1, 56), ("conv", 128, 3, 56), ("max", None, 2, 28),
    ("conv", 256, 3, 28), ("conv", 128, 1, 28), ("conv", 256, 3, 28), ("max", None, 2, 14),
    ("conv", 512, 3, 14), ("conv", 256, 1, 14), ("conv", 512, 3, 14), ("conv", 256, 1, 14),
    ("conv", 512, 3, 14), ("max", None, 2, 7), ("conv", 1024, 3, 7), ("conv", 512, 1, 7),
    ("conv", 1024, 3, 7), ("conv", 512, 1, 7), ("conv", 1024, 3, 7), ("conv", 1000, 1, 7),
    ("avg", None, None, 1), ("softmax", None, None, 1),
]


def test_backbone_shapes():
    spec = bundled_config("darknet19-224")
    assert len(spec.layers) == len(BACKBONE)
    for layer, shape, (kind, filters, size, out) in zip(spec.layers, spec.shapes, BACKBONE):
        assert shape[1:] == (out, out)
        if kind == "conv":
            assert (layer.filters, layer.size, shape[0]) == (filters, size, filters)
        elif kind == "max":
            assert (layer.size, layer.stride) == (2, 2)
    assert spec.output_shape == (1000, 1, 1)


def test_explicit_padding_stem_arithmetic():
    # valid 3x3/2 and 3x3/1 convolutions plus a valid pool give the classic 299-input stem
    text = ("[net]\nwidth=299\nheight=299\n"
            "[convolutional]\nfilters=32\nsize=3\nstride=2\npadding=0\n"
            "[convolutional]\nfilters=32\nsize=3\nstride=1\npadding=0\n"
            "[convolutional]\nfilters=64\nsize=3\nstride=1\npad=1\n"
            "[maxpool]\nsize=3\nstride=2\npadding=0\n"
            "[convolutional]\nfilters=80\nsize=3\nstride=1\npadding=0\n"
            "[maxpool]\nsize=3\nstride=2\npadding=0\n")
    spec = parse_network_spec(text)
    assert [s[1] for s in spec.shapes] == [149, 147, 147, 73, 71, 35]


@pytest.mark.parametrize("name,layers", [("yolov2-608", 32), ("yolov2-tiny-416", 16),
                                         ("darknet19-224", 26)])
def test_bundled_configs_load(name, layers):
    spec = bundled_config(name)
    assert len(spec.layers) == layers


def test_bundled_detection_heads():
    big = bundled_config("yolov2-608")
    assert big.input_shape == (3, 608, 608)
    assert big.output_shape == (425, 19, 19)
    tiny = bundled_config("yolov2-tiny-416")
    assert tiny.output_shape == (425, 13, 13)


# -- weights ------------------------------------------------------------------

def tiny_1x1_spec():
    return NetworkSpec(1, 1, (ConvSpec(1, 1),), channels=1)


def test_weights_28_bytes():
    spec = tiny_1x1_spec()
    data = WeightHeader().pack() + struct.pack("<ff", 0.5, 2.0)
    assert len(data) == 28
    store = load_weights(data, spec)
    assert store[0].biases.tolist() == [0.5]
    assert store[0].weights.reshape(-1).tolist() == [2.0]


def test_weights_size_mismatch():
    spec = tiny_1x1_spec()
    data = WeightHeader().pack() + struct.pack("<ff", 0.5, 2.0)
    with pytest.raises(SizeMismatch) as info:
        load_weights(data[:27], spec)
    assert (info.value.expected, info.value.actual) == (28, 27)
    with pytest.raises(SizeMismatch):
        load_weights(data + b"\0", spec)


def test_weights_header_only():
    spec = NetworkSpec(4, 4, ())
    store = load_weights(WeightHeader(0, 2, 0, 123).pack(), spec)
    assert len(store) == 0
    assert store.header.seen == 123


def test_weights_narrow_header():
    spec = tiny_1x1_spec()
    data = struct.pack("<iiii", 0, 1, 0, 7) + struct.pack("<ff", 1.0, 3.0)
    store = load_weights(data, spec)
    assert store.header == WeightHeader(0, 1, 0, 7)
    assert store[0].weights.reshape(-1).tolist() == [3.0]


def test_weights_bad_header():
    with pytest.raises(BadHeader):
        load_weights(b"\0" * 10, tiny_1x1_spec())
    with pytest.raises(BadHeader):
        load_weights(struct.pack("<iiiq", -1, 2, 0, 0) + bytes(8), tiny_1x1_spec())


def test_weights_round_trip():
    spec = bundled_config("yolov2-tiny-416")
    store = random_weights(spec, seed=3)
    data = dump_weights(store, spec)
    again = load_weights(data, spec)
    assert dump_weights(again, spec) == data
    for i, _ in spec.conv_layers():
        np.testing.assert_array_equal(again[i].weights, store[i].weights)
        np.testing.assert_array_equal(again[i].variance if again[i].batch_norm else 0,
                                      store[i].variance if store[i].batch_norm else 0)


def test_bn_block_order():
    spec = NetworkSpec(1, 1, (ConvSpec(1, 1, batch_norm=True),), channels=1)
    data = WeightHeader().pack() + struct.pack("<fffff", 0.1, 0.2, 0.3, 0.4, 0.5)
    w = load_weights(data, spec)[0]
    assert [float(v[0]) for v in (w.biases, w.scale, w.mean, w.variance)] == \
        pytest.approx([0.1, 0.2, 0.3, 0.4])
    assert float(w.weights.reshape(-1)[0]) == pytest.approx(0.5)


def test_negative_variance_rejected():
    spec = NetworkSpec(1, 1, (ConvSpec(1, 1, batch_norm=True),), channels=1)
    data = WeightHeader().pack() + struct.pack("<fffff", 0, 1, 0, -1, 1)
    with pytest.raises(ValueError):
        load_weights(data, spec)


# -- layers -------------------------------------------------------------------

def test_conv_identity():
    x = np.random.default_rng(0).standard_normal((1, 5, 5)).astype(np.float32)
    out = conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(out, x)


def test_conv_ones_kernel():
    out = conv2d(np.ones((1, 4, 4), np.float32), np.ones((1, 1, 3, 3), np.float32), None, 1, 1)
    assert out[0, 1:3, 1:3].tolist() == [[9, 9], [9, 9]]
    assert [out[0, 0, 0], out[0, 0, 3], out[0, 3, 0], out[0, 3, 3]] == [4, 4, 4, 4]
    assert out[0, 0, 1] == 6


def test_conv_random_vs_naive():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((16, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    out = conv2d(x, w, b, 1, 1)
    assert out.shape == (16, 8, 8)
    assert rel_err(out, naive_conv2d(x, w, b, 1, 1)) <= 1e-5


def random_conv_case(rng):
    c, f = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = k // 2 if rng.random() < 0.7 else 0
    h, w = int(rng.integers(k, 10)), int(rng.integers(k, 10))
    x = rng.standard_normal((c, h, w)).astype(np.float32)
    wt = rng.standard_normal((f, c, k, k)).astype(np.float32)
    b = rng.standard_normal(f).astype(np.float32)
    return x, wt, b, stride, pad


def test_conv_100_configs_vs_naive():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, w, b, stride, pad = random_conv_case(rng)
        assert rel_err(conv2d(x, w, b, stride, pad), naive_conv2d(x, w, b, stride, pad)) <= 1e-5


def test_conv_same_pad_shape_ceil():
    x = np.zeros((2, 7, 9), np.float32)
    out = conv2d(x, np.zeros((4, 2, 3, 3), np.float32), None, 2, 1)
    assert out.shape == (4, 4, 5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((2, 4, 4), np.float32), np.zeros((1, 3, 1, 1), np.float32))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3))
def test_conv_linearity(seed, alpha):
    rng = np.random.default_rng(seed)
    x, w, _, stride, pad = random_conv_case(rng)
    lhs = conv2d(np.float32(alpha) * x, w, None, stride, pad)
    rhs = np.float32(alpha) * conv2d(x, w, None, stride, pad)
    assert rel_err(lhs, rhs) <= 1e-5


def test_maxpool_examples():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    assert maxpool(x, 2, 2).tolist() == [[[4]]]
    c = np.full((2, 6, 6), 3.5, np.float32)
    out = maxpool(c, 2, 2)
    assert out.shape == (2, 3, 3) and np.all(out == 3.5)


def test_maxpool_odd_vs_naive():
    x = np.random.default_rng(4).standard_normal((3, 7, 7)).astype(np.float32)
    out = maxpool(x, 2, 2)
    assert out.shape == (3, 4, 4)
    np.testing.assert_array_equal(out, naive_maxpool(x, 2, 2))


def test_maxpool_100_configs_vs_naive():
    rng = np.random.default_rng(5)
    for _ in range(100):
        size, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 10)),
                                 int(rng.integers(1, 10)))).astype(np.float32)
        np.testing.assert_array_equal(maxpool(x, size, stride), naive_maxpool(x, size, stride))


def test_maxpool_size2_stride1_keeps_size():
    x = np.random.default_rng(6).standard_normal((2, 13, 13)).astype(np.float32)
    out = maxpool(x, 2, 1)
    assert out.shape == (2, 13, 13)
    np.testing.assert_array_equal(out, naive_maxpool(x, 2, 1))


def test_fold_identity_and_scale():
    w = np.random.default_rng(7).standard_normal((2, 3, 3, 3)).astype(np.float32)
    one, zero = np.ones(2, np.float32), np.zeros(2, np.float32)
    fw, fb = fold_batch_norm(w, one, zero, one, zero, eps=0.0)
    np.testing.assert_array_equal(fw, w)
    np.testing.assert_array_equal(fb, zero)
    fw, fb = fold_batch_norm(w, 2 * one, zero, one, zero, eps=0.0)
    np.testing.assert_array_equal(fw, 2 * w)


def random_bn(rng, f):
    return (rng.uniform(0.2, 2.0, f).astype(np.float32), rng.normal(0, 1, f).astype(np.float32),
            rng.uniform(0.0, 3.0, f).astype(np.float32), rng.normal(0, 1, f).astype(np.float32))


@pytest.mark.parametrize("seed", range(25))
def test_fold_equivalence(seed):
    rng = np.random.default_rng(100 + seed)
    x, w, _, stride, pad = random_conv_case(rng)
    g, m, v, beta = random_bn(rng, w.shape[0])
    for act in ("linear", "leaky"):
        explicit = activate(batch_norm(conv2d(x, w, None, stride, pad), g, m, v, beta), act)
        fw, fb = fold_batch_norm(w, g, m, v, beta)
        assert rel_err(conv2d(x, fw, fb, stride, pad, act), explicit) <= 1e-5


def test_activations():
    assert activate(np.float32(-10), "leaky") == pytest.approx(-1.0)
    assert activate(np.float32(3), "leaky") == 3
    assert sigmoid(np.float64(0)) == 0.5
    assert sigmoid(np.array([-1000.0, 1000.0])).tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        activate(np.zeros(1), "relu6")


@given(st.floats(-1e3, 1e3))
def test_softmax_uniform(c):
    out = softmax(np.full(4, c))
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


@given(st.lists(st.floats(-80, 80), min_size=1, max_size=20), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(vals, c):
    v = np.array(vals)
    out = softmax(v)
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.max(np.abs(softmax(v + c) - out)) <= 1e-6
    assert np.max(np.abs(out - scalar_softmax(vals))) <= 1e-6


def test_reorg_shape_and_permutation():
    x = np.arange(8 * 4 * 4, dtype=np.float32).reshape(8, 4, 4)
    out = reorg(x, 2)
    assert out.shape == (32, 2, 2)
    assert sorted(out.ravel().tolist()) == sorted(x.ravel().tolist())
    with pytest.raises(ShapeMismatch):
        reorg(np.zeros((3, 4, 4), np.float32), 2)


# -- region decode --------------------------------------------------------------

def single_region(num_classes=4, anchors=((1.0, 1.0),)):
    return RegionSpec(tuple(anchors), num_classes)


def test_region_center_and_size():
    region = single_region()
    feat = np.zeros((9, 2, 2), np.float32)
    out = decode_region_arrays(feat, region, 64, 64)
    assert out.boxes[0, 0, 0].tolist() == [0.0, 0.0, 32.0, 32.0]
    assert out.boxes[1, 1, 0].tolist() == [32.0, 32.0, 64.0, 64.0]
    np.testing.assert_array_equal(out.objectness, 0.5)


def test_region_channel_check():
    with pytest.raises(ShapeMismatch):
        region_decode(np.zeros((8, 2, 2), np.float32), single_region(), 64, 64)


def test_region_vs_scalar_oracle():
    rng = np.random.default_rng(8)
    anchors = ((1.0, 1.3), (3.2, 2.1), (0.6, 4.0))
    region = RegionSpec(anchors, 5)
    feat = (rng.standard_normal((30, 6, 5)) * 2).astype(np.float32)
    out = decode_region_arrays(feat, region, 160, 192)
    ref = scalar_region(feat, anchors, 5, 160, 192)
    for slot in ref:
        r, c, a = slot["row"], slot["col"], slot["anchor"]
        assert np.max(np.abs(out.boxes[r, c, a] - slot["box"])) <= 1e-6
        assert abs(out.objectness[r, c, a] - slot["objectness"]) <= 1e-6
        assert np.max(np.abs(out.class_probs[r, c, a] - slot["probs"])) <= 1e-6
        assert out.class_ids[r, c, a] == slot["class"]
    dets = region_decode(feat, region, 160, 192, 0.1)
    expected = [s for s in ref if s["confidence"] >= 0.1]
    assert len(dets) == len(expected)
    for d, s in zip(dets, expected):
        assert d.class_id == s["class"]
        assert abs(d.confidence - s["confidence"]) <= 1e-6
        assert max(abs(u - v) for u, v in zip(d.box.as_tuple(), s["box"])) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_region_boxes_inside_image(seed):
    rng = np.random.default_rng(seed)
    feat = (rng.standard_normal((18, 3, 4)) * 4).astype(np.float32)
    dets = region_decode(feat, RegionSpec(((1, 1), (2, 3)), 4), 128, 96, 0.0)
    assert len(dets) == 24
    for d in dets:
        assert 0 <= d.box.left <= d.box.right <= 128
        assert 0 <= d.box.top <= d.box.bottom <= 96
        assert 0 <= d.confidence <= 1


# -- forward --------------------------------------------------------------------

def test_zero_network_uniform():
    spec = parse_network_spec((DATA / "golden_tiny.cfg").read_text())
    net = Network(spec, zero_weights(spec))
    out = decode_region_arrays(net.run(np.random.default_rng(0).random(spec.input_shape)),
                               spec.region, 32, 32)
    assert np.all(out.objectness == 0.5)
    assert np.all(out.class_probs == 0.25)


def golden():
    spec = parse_network_spec((DATA / "golden_tiny.cfg").read_text())
    store = read_weights(DATA / "golden_tiny.weights", spec)
    x = np.load(DATA / "golden_input.npy")
    ref = json.loads((DATA / "golden_forward.json").read_text())
    return spec, store, x, ref


def golden_errors(dtype):
    spec, store, x, ref = golden()
    net = Network(spec, store, dtype)
    feat = net.run(x)
    out = decode_region_arrays(feat, spec.region, spec.input_width, spec.input_height)
    feat_ref = np.array(ref["feature"]).reshape(ref["feature_shape"])
    errs = {"feature": float(np.max(np.abs(feat - feat_ref))), "box": 0.0, "objectness": 0.0,
            "probs": 0.0, "confidence": 0.0}
    for s in ref["slots"]:
        ix = (s["row"], s["col"], s["anchor"])
        errs["box"] = max(errs["box"], float(np.max(np.abs(out.boxes[ix] - s["box"]))))
        errs["objectness"] = max(errs["objectness"], abs(float(out.objectness[ix]) - s["objectness"]))
        errs["probs"] = max(errs["probs"], float(np.max(np.abs(out.class_probs[ix] - s["probs"]))))
        errs["confidence"] = max(errs["confidence"], abs(float(out.confidence[ix]) - s["confidence"]))
    return errs


def test_golden_forward_double():
    errs = golden_errors(np.float64)
    assert max(errs.values()) <= 1e-6, errs


def test_golden_forward_single_precision():
    # the float32 production path: ~1e-6 absolute drift on boxes of ~30 px
    errs = golden_errors(np.float32)
    assert errs["confidence"] <= 1e-6
    assert errs["box"] <= 1e-4
    assert errs["feature"] <= 1e-4


def test_forward_deterministic():
    spec = bundled_config("yolov2-tiny-416")
    net = Network(spec, random_weights(spec, seed=11))
    x = np.random.default_rng(1).random(spec.input_shape).astype(np.float32)
    a, b = net.forward(x, 0.0), net.forward(x, 0.0)
    assert a == b and len(a) == 13 * 13 * 5


def test_forward_input_shape_checked():
    spec = parse_network_spec((DATA / "golden_tiny.cfg").read_text())
    net = Network(spec, zero_weights(spec))
    with pytest.raises(ShapeMismatch):
        net.run(np.zeros((3, 16, 16), np.float32))


def test_network_rejects_missing_layer():
    spec = parse_network_spec((DATA / "golden_tiny.cfg").read_text())
    with pytest.raises(ValueError):
        Network(spec, WeightStore())


def test_network_rejects_wrong_block_shape():
    spec = tiny_1x1_spec()
    store = WeightStore(layers={0: ConvWeights(np.zeros((2, 1, 1, 1), np.float32),
                                               np.zeros(2, np.float32))})
    with pytest.raises(ValueError):
        Network(spec, store)


def test_yolov2_608_runs():
    spec = bundled_config("yolov2-608")
    net = Network(spec, random_weights(spec, seed=0))
    out = net.run(np.random.default_rng(0).random(spec.input_shape).astype(np.float32))
    assert out.shape == (425, 19, 19)
    assert np.all(np.isfinite(out))


# -- FLOPs ----------------------------------------------------------------------

def test_flops_single_mac():
    assert count_flops(tiny_1x1_spec()) == 2.0


@pytest.mark.parametrize("name,expected", [("yolov2-tiny-416", 5.41e9), ("yolov2-608", 62.94e9)])
def test_flops_bundled(name, expected):
    assert abs(count_flops(bundled_config(name)) - expected) / expected <= 0.05


def test_flops_exclude_pooling_and_additive():
    spec = bundled_config("yolov2-tiny-416")
    per = layer_flops(spec)
    assert all(f == 0 for f, layer in zip(per, spec.layers) if not isinstance(layer, ConvSpec))
    assert count_flops(spec) == sum(per)
    # splitting a plain conv stack in two sums to the whole
    head = NetworkSpec(16, 16, (ConvSpec(8, 3, padding=1), ConvSpec(4, 1)))
    first = NetworkSpec(16, 16, (ConvSpec(8, 3, padding=1),))
    second = NetworkSpec(16, 16, (ConvSpec(4, 1),), channels=8)
    assert count_flops(head) == count_flops(first) + count_flops(second)
