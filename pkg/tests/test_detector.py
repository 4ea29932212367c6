import math

import numpy as np
import pytest
from pydantic import ValidationError

from ccdet import ndtensor as nd
from ccdet.dataset import sample_box_sizes
from ccdet.detector import (DEFAULT_ANCHORS, DetectorConfig, RawPrediction, anchor_fit, build,
                            capture_shapes, check_weights, decode, forward, kmeans_anchors,
                            layer_table, weight_shapes)
from ccdet.errors import ConfigError, ShapeError
from ccdet.ndtensor import Tensor


def _images(rng, n, config):
    s = config.input_size
    return Tensor(rng.uniform(0.0, 1.0, (n, config.in_channels, s, s)).astype(np.float32))


# ---------- config ----------

@pytest.mark.parametrize("field,value", [
    ("input_size", 100), ("input_size", 0), ("width_base", 3), ("width_base", 0),
    ("num_classes", 1), ("in_channels", 2), ("leaky_slope", 1.0), ("strides", (4, 8, 16)),
])
def test_config_rejects_invalid(field, value):
    with pytest.raises(ValidationError):
        DetectorConfig(**{field: value})


def test_config_rejects_bad_anchor_grid():
    with pytest.raises(ValidationError):
        DetectorConfig(anchors=(((10, 10),),) * 3)
    with pytest.raises(ValidationError):
        DetectorConfig(anchors=(((10, -1), (10, 10), (10, 10)),) + DEFAULT_ANCHORS[1:])


# ---------- build ----------

def test_build_is_deterministic(tiny_config):
    a, b = build(tiny_config, seed=3), build(tiny_config, seed=3)
    assert list(a) == list(b)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_build_seed_changes_weights(tiny_config):
    a, b = build(tiny_config, seed=0), build(tiny_config, seed=1)
    assert any(not np.array_equal(a[n].data, b[n].data) for n in a)


def test_build_matches_declared_shapes(tiny_config, tiny_weights):
    check_weights(tiny_weights)
    assert {n: t.shape for n, t in tiny_weights.params.items()} == weight_shapes(tiny_config)
    assert all(tiny_weights[n].dtype == np.float32 for n in tiny_weights)


def test_check_weights_reports_missing(tiny_weights):
    del tiny_weights.params["head.p3.bias"]
    with pytest.raises(ShapeError, match="head.p3.bias"):
        check_weights(tiny_weights)


def test_shape_walk_at_128_width_16():
    config = DetectorConfig(input_size=128, width_base=16)
    shapes = capture_shapes(config)
    widths = (16, 32, 64, 128, 128)
    for i, (c, hw) in enumerate(zip(widths, (64, 32, 16, 8, 4)), start=1):
        assert shapes[f"backbone.stage{i}"] == (c, hw, hw)
    assert shapes["neck.spp"] == (128, 4, 4)
    assert shapes["neck.out3"] == (64, 16, 16)
    assert shapes["neck.out4"] == (128, 8, 8)
    assert shapes["neck.out5"] == (128, 4, 4)

    table = {layer.name: layer for layer in layer_table(config)}
    assert table["backbone.stage1.down"].weight_shape == (16, 1, 3, 3)
    assert table["backbone.stage1.down"].stride == 2
    assert table["neck.spp.cv2"].c_in == 4 * 64
    for head, c_in, hw in (("head.p3", 64, 16), ("head.p4", 128, 8), ("head.p5", 128, 4)):
        assert table[head].weight_shape == (3 * 7, c_in, 1, 1)
        assert table[head].out_hw == hw
        assert not table[head].activation
    # every conv follows its input's channel count
    for layer in table.values():
        assert layer.weight_shape[1] == layer.c_in


# ---------- forward ----------

def test_forward_output_shapes(rng, tiny_config, tiny_weights):
    raw, captured = forward(tiny_weights, _images(rng, 2, tiny_config), capture=("neck.out3",))
    assert [p.shape for p in raw.scales] == [(2, 3, 7, 8, 8), (2, 3, 7, 4, 4), (2, 3, 7, 2, 2)]
    assert captured["neck.out3"].shape == (2,) + capture_shapes(tiny_config)["neck.out3"]


def test_forward_is_deterministic(rng, tiny_weights, tiny_config):
    images = _images(rng, 1, tiny_config)
    a, _ = forward(tiny_weights, images)
    b, _ = forward(tiny_weights, images)
    for x, y in zip(a.scales, b.scales):
        np.testing.assert_array_equal(x.data, y.data)


def test_deepest_neck_capture_at_128():
    config = DetectorConfig(input_size=128, width_base=4)
    weights = build(config)
    with nd.no_grad():
        _, captured = forward(weights, np.zeros((1, 1, 128, 128), dtype=np.float32), capture=("neck.out3",))
    assert captured["neck.out3"].shape == (1, 4 * 4, 16, 16)


def test_zero_weights_output_equals_head_bias(tiny_config, tiny_weights, rng):
    for name, t in tiny_weights.params.items():
        t.data[...] = 0.0 if name.endswith(".weight") else rng.standard_normal(t.shape)
    raw, _ = forward(tiny_weights, np.zeros((1, 1, 64, 64), dtype=np.float32))
    for i, pred in zip((3, 4, 5), raw.scales):
        bias = tiny_weights[f"head.p{i}.bias"].data.reshape(3, 7)
        expected = np.broadcast_to(bias[:, :, None, None], pred.shape[1:])
        np.testing.assert_allclose(pred.data[0], expected, rtol=0, atol=1e-6)


def test_batch_matches_single_images(rng, tiny_config, tiny_weights):
    weights = tiny_weights.astype(np.float64)
    images = rng.uniform(0, 1, (2, 1, 64, 64))
    both, _ = forward(weights, Tensor(images))
    for i in range(2):
        one, _ = forward(weights, Tensor(images[i:i + 1]))
        for a, b in zip(both.scales, one.scales):
            np.testing.assert_allclose(a.data[i], b.data[0], rtol=0, atol=1e-6)


def test_forward_rejects_wrong_input(tiny_weights):
    with pytest.raises(ShapeError):
        forward(tiny_weights, np.zeros((1, 1, 32, 32), dtype=np.float32))
    with pytest.raises(ShapeError):
        forward(tiny_weights, np.zeros((1, 3, 64, 64), dtype=np.float32))


def test_forward_rejects_unknown_capture(tiny_weights):
    with pytest.raises(ConfigError, match="neck.nowhere"):
        forward(tiny_weights, np.zeros((1, 1, 64, 64), dtype=np.float32), capture=("neck.nowhere",))


def test_forward_three_channel_config(rng):
    config = DetectorConfig(input_size=64, width_base=2, in_channels=3)
    raw, _ = forward(build(config), _images(rng, 1, config))
    assert raw.scales[0].shape == (1, 3, 7, 8, 8)


def test_forward_backward_reaches_every_parameter(rng, tiny_config, tiny_weights):
    raw, _ = forward(tiny_weights, _images(rng, 1, tiny_config))
    loss = raw.scales[0].sum() + raw.scales[1].sum() + raw.scales[2].sum()
    nd.backward(loss)
    assert all(tiny_weights[n].grad is not None for n in tiny_weights)


# ---------- decode ----------

_SMALL_ANCHORS = (((16.0, 16.0), (20.0, 20.0), (24.0, 24.0)),
                  ((32.0, 32.0), (40.0, 40.0), (48.0, 48.0)),
                  ((56.0, 56.0), (64.0, 64.0), (72.0, 72.0)))


def _silent_raw(config, fill=-100.0):
    k = config.outputs_per_anchor
    return [np.full((1, 3, k, config.grid_size(s), config.grid_size(s)), fill, dtype=np.float32)
            for s in range(3)]


def test_decode_zero_logits_at_cell():
    config = DetectorConfig(input_size=64, width_base=2, anchors=_SMALL_ANCHORS)
    scales = _silent_raw(config)
    scales[0][0, 0, :5, 2, 2] = 0.0
    scales[0][0, 0, 5:, 2, 2] = (0.0, 1.0)
    dets = decode(RawPrediction([Tensor(s) for s in scales]), config, 0.01)
    assert len(dets) == 1
    d = dets[0]
    # centre (2·0.5 - 0.5 + 2)·8 = 20, size 16·(2·0.5)² = 16
    assert d.box == pytest.approx((12.0, 12.0, 28.0, 28.0))
    assert d.class_id == 1
    assert d.score == pytest.approx(0.5 / (1.0 + math.exp(-1.0)))
    assert d.class_scores == pytest.approx((0.25, d.score))


def test_decode_clips_to_image():
    config = DetectorConfig(input_size=64, width_base=2, anchors=_SMALL_ANCHORS)
    scales = _silent_raw(config)
    scales[0][0, 0, :7, 0, 0] = 0.0
    (d,) = decode(RawPrediction([Tensor(s) for s in scales]), config, 0.01)
    # centre (4, 4), size 16 -> (-4, -4, 12, 12) before clipping
    assert d.box == pytest.approx((0.0, 0.0, 12.0, 12.0))
    assert d.score == pytest.approx(0.25)


def test_decode_silent_prediction_is_empty(tiny_config):
    raw = RawPrediction([Tensor(s) for s in _silent_raw(tiny_config)])
    assert decode(raw, tiny_config, 0.01) == []


def test_decode_rejects_bad_threshold(tiny_config):
    raw = RawPrediction([Tensor(s) for s in _silent_raw(tiny_config)])
    with pytest.raises(ConfigError):
        decode(raw, tiny_config, 1.5)


def _decode_oracle(scales, config, thr):
    sig = lambda v: 1.0 / (1.0 + math.exp(-float(v)))
    size = config.input_size
    out = []
    for si, arr in enumerate(scales):
        stride = config.strides[si]
        _, a_n, k, gh, gw = arr.shape
        for a in range(a_n):
            aw, ah = config.anchors[si][a]
            for r in range(gh):
                for c in range(gw):
                    p = [sig(arr[0, a, j, r, c]) for j in range(k)]
                    cls = p[5:]
                    score = p[4] * max(cls)
                    if score < thr:
                        continue
                    bx, by = (2 * p[0] - 0.5 + c) * stride, (2 * p[1] - 0.5 + r) * stride
                    bw, bh = aw * (2 * p[2]) ** 2, ah * (2 * p[3]) ** 2
                    x1, x2 = min(max(bx - bw / 2, 0), size), min(max(bx + bw / 2, 0), size)
                    y1, y2 = min(max(by - bh / 2, 0), size), min(max(by + bh / 2, 0), size)
                    if x2 <= x1 or y2 <= y1:
                        continue
                    out.append(((x1, y1, x2, y2), cls.index(max(cls)), score))
    return out


def test_decode_matches_loop_oracle(rng, tiny_config):
    scales = [rng.standard_normal(s.shape).astype(np.float32) * 2 for s in _silent_raw(tiny_config)]
    dets = decode(RawPrediction([Tensor(s) for s in scales]), tiny_config, 0.25)
    expected = _decode_oracle(scales, tiny_config, 0.25)
    assert len(dets) == len(expected) > 0
    for d, (box, cls, score) in zip(dets, expected):
        assert d.box == pytest.approx(box, rel=1e-9, abs=1e-9)
        assert d.class_id == cls
        assert d.score == pytest.approx(score, rel=1e-9)



@pytest.mark.parametrize("seed", range(100))
def test_decoded_boxes_stay_inside_the_image(seed, tiny_config):
    rng = np.random.default_rng(seed)
    scales = [rng.standard_normal(s.shape).astype(np.float32) * 3 for s in _silent_raw(tiny_config)]
    size = tiny_config.input_size
    for d in decode(RawPrediction([Tensor(s) for s in scales]), tiny_config, 0.0):
        x1, y1, x2, y2 = d.box
        assert 0.0 <= x1 < x2 <= size and 0.0 <= y1 < y2 <= size
        assert 0.0 <= (x1 + x2) / 2 <= size and 0.0 <= (y1 + y2) / 2 <= size
        assert 0.0 <= d.score <= 1.0


@pytest.mark.parametrize("seed", range(100))
def test_raising_objectness_never_removes_a_detection(seed, tiny_config):
    rng = np.random.default_rng(seed)
    scales = [rng.standard_normal(s.shape).astype(np.float32) * 2 for s in _silent_raw(tiny_config)]
    raised = [s.copy() for s in scales]
    for s in raised:
        s[:, :, 4] += rng.uniform(0.0, 3.0, s[:, :, 4].shape).astype(np.float32)
    base = decode(RawPrediction([Tensor(s) for s in scales]), tiny_config, 0.25)
    after = {d.box: d.score for d in decode(RawPrediction([Tensor(s) for s in raised]), tiny_config, 0.25)}
    for d in base:
        assert d.box in after
        assert after[d.box] >= d.score


# ---------- anchors ----------

def test_kmeans_anchors_sorted_by_area(rng):
    wh = np.concatenate([rng.normal(m, 1.0, (40, 2)) for m in (10, 20, 30, 40, 50, 60, 70, 80, 90)])
    anchors = kmeans_anchors(wh, seed=0)
    assert len(anchors) == 3 and all(len(s) == 3 for s in anchors)
    areas = [w * h for scale in anchors for w, h in scale]
    assert areas == sorted(areas)


def test_default_anchors_are_the_kmeans_result():
    derived = kmeans_anchors(sample_box_sizes(10000, 128, 0), seed=0)
    np.testing.assert_allclose(np.array(derived), np.array(DEFAULT_ANCHORS), atol=1.0)


def test_kmeans_anchors_needs_enough_boxes():
    with pytest.raises(ConfigError):
        kmeans_anchors(np.ones((5, 2)))


def test_anchor_fit_exact_match_is_one():
    wh = np.array([[67.6, 38.8], [135.2, 38.8]])
    fit = anchor_fit(wh)
    assert fit[0] == pytest.approx(1.0)
    assert fit[1] > 1.0
