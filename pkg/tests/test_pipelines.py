import numpy as np
import pytest
import torch

from cascadeseg.networks import UNET_D, UNET_S, build, sw_cnn_spec, unet_spec
from cascadeseg.pipelines import (
    CN1,
    CN2,
    PIPELINES,
    SN1,
    SN2,
    DetectionMap,
    detect_candidates,
    fill_from_grid,
    gate_mask,
    run_cascade,
    run_fcn_tiled,
    run_pipeline,
    run_sw_detection,
    tile_grid,
)
from cascadeseg.pyramid import BACKGROUND_RGB, PyramidImage, Region


def _unet_d(seed=0):
    return build(unet_spec(UNET_D, 4, 284, 2), seed).eval()


def _rigged(spec, value):
    """A network whose object logit is the constant ``value`` everywhere."""
    model = build(spec).eval()
    with torch.no_grad():
        model.head.weight.zero_()
        if model.head.bias.numel() == 1:
            model.head.bias.fill_(value)
        else:
            model.head.bias.copy_(torch.tensor([0.0, value]))
    return model


def _image(h=400, w=480, seed=0):
    rng = np.random.default_rng(seed)
    return PyramidImage.from_level0(rng.integers(0, 256, (h, w, 3)).astype(np.uint8))


def test_pipeline_bindings():
    assert not PIPELINES[SN1].is_cascade and len(PIPELINES[SN2].models()) == 1
    assert PIPELINES[CN1].detector == "SW-CNN" and PIPELINES[CN2].detector == UNET_S
    assert len(PIPELINES[CN1].models()) == 2


def test_tile_grid_covers_each_pixel_once():
    grid = tile_grid((800, 1000), 308)
    assert len(grid) == 4 * 3
    cover = np.zeros((800, 1000), int)
    for y, x in grid:
        cover[y : y + 308, x : x + 308] += 1
    assert (cover == 1).all()


def test_all_background_gives_zero_map():
    img = PyramidImage.from_level0(np.full((300, 300, 3), BACKGROUND_RGB, np.uint8))
    lm = run_fcn_tiled(img, _unet_d(), 0)
    assert lm.labels.shape == (300, 300) and not lm.labels.any() and lm.tiles_evaluated == 0


def test_invalid_tile_size_lists_alternatives():
    with pytest.raises(ValueError, match="valid tile sizes"):
        run_fcn_tiled(_image(), _unet_d(), 0, tile_size=290)
    with pytest.raises(IndexError):
        run_fcn_tiled(_image(), _unet_d(), 5)


def test_translation_by_output_size():
    rng = np.random.default_rng(3)
    big = rng.integers(0, 256, (400, 600, 3)).astype(np.uint8)
    a = PyramidImage.from_level0(big[:, :500])
    b = PyramidImage.from_level0(big[:, 100:600])
    model = _unet_d(1)
    full_a = np.ones(a.shape(1), np.uint8)
    la = run_fcn_tiled(a, model, 0, full_a).labels
    lb = run_fcn_tiled(b, model, 0, full_a).labels
    # interior tiles away from the mirrored borders agree exactly
    np.testing.assert_array_equal(la[100:300, 200:400], lb[100:300, 100:300])


def test_tile_order_does_not_matter():
    img, model = _image(), _unet_d(2)
    fg = np.ones(img.shape(1), np.uint8)
    a = run_fcn_tiled(img, model, 0, fg)
    b = run_fcn_tiled(img, model, 0, fg, order=7)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.tiles_evaluated == b.tiles_evaluated == 20


def test_foreground_gates_output():
    img, model = _image(), _unet_d(3)
    fg = np.zeros(img.shape(1), np.uint8)
    fg[:50, :60] = 1
    lm = run_fcn_tiled(img, model, 0, fg)
    assert not lm.labels[200:, :].any() and not lm.labels[:, 240:].any()
    assert lm.tiles_evaluated == 2 * 3  # 200 x 240 px of tissue, 100 px tiles


def test_fill_from_grid():
    grid = np.arange(12).reshape(3, 4)
    out = fill_from_grid(grid, 5, (17, 22))
    assert out.shape == (17, 22)
    assert out[16, 21] == grid[2, 3] and out[4, 4] == grid[0, 0] and out[5, 5] == grid[1, 1]
    dense = np.random.default_rng(0).integers(0, 2, (7, 9))
    np.testing.assert_array_equal(fill_from_grid(dense, 1, dense.shape), dense)


def test_sw_detection_grid_and_rejection():
    low = np.random.default_rng(0).integers(0, 256, (100, 120, 3)).astype(np.uint8)
    img = PyramidImage([np.repeat(np.repeat(low, 4, 0), 4, 1), low], (1, 4))
    fg = np.ones((100, 120), np.uint8)
    reject = _rigged(sw_cnn_spec(4, 8), -5.0)
    det = run_sw_detection(img, reject, 5, fg)
    assert det.evaluated == 20 * 24 and det.mask.shape == (100, 120) and not det.mask.any()
    accept = _rigged(sw_cnn_spec(4, 8), 5.0)
    assert run_sw_detection(img, accept, 5, fg).mask.all()
    with pytest.raises(ValueError):
        run_sw_detection(img, _unet_d(), 5, fg)


def test_sw_detection_grid_size_example():
    # a 500 x 500 low-resolution level has a 100 x 100 decision grid at step 5
    assert (500 // 5, 500 // 5) == (100, 100)
    img = PyramidImage.from_level0(np.full((2000, 2000, 3), BACKGROUND_RGB, np.uint8))
    det = run_sw_detection(img, _rigged(sw_cnn_spec(4, 8), 5.0), 5)
    assert det.evaluated == 0 and not det.mask.any()


def test_candidates_empty_and_single():
    assert detect_candidates(np.zeros((50, 50), np.uint8)) == []
    det = np.zeros((300, 300), np.uint8)
    det[100:180, 100:180] = 1
    (r,) = detect_candidates(DetectionMap(det, UNET_S))
    assert r == Region(0, 400 - 32 - 92, 400 - 32 - 92, 320 + 2 * (32 + 92), 320 + 2 * (32 + 92))
    assert r.x <= 400 and r.x1 >= 720 and r.y <= 400 and r.y1 >= 720


def test_overlapping_candidates_merge():
    det = np.zeros((300, 300), np.uint8)
    det[100:120, 100:120] = 1
    det[100:120, 160:180] = 1
    assert len(detect_candidates(det)) == 1
    det2 = np.zeros((600, 600), np.uint8)
    det2[10:20, 10:20] = 1
    det2[500:510, 500:510] = 1
    assert len(detect_candidates(det2)) == 2


def _cn2_models(detect_value):
    return _rigged(unet_spec(UNET_S, 2, 132, 2), detect_value), _unet_d(4)


def test_cascade_without_detections_is_empty():
    img = _image()
    det, seg = _cn2_models(-10.0)
    lm = run_cascade(img, det, seg, CN2, np.ones(img.shape(1), np.uint8))
    assert not lm.labels.any() and lm.tiles_evaluated == 0


def test_cascade_with_full_detection_equals_single_net():
    img = _image()
    fg = np.ones(img.shape(1), np.uint8)
    det, seg = _cn2_models(10.0)
    lm = run_cascade(img, det, seg, CN2, fg)
    ref = run_fcn_tiled(img, seg, 0, fg)
    np.testing.assert_array_equal(lm.labels, ref.labels)
    assert lm.tiles_evaluated == ref.tiles_evaluated
    assert set(lm.stage_seconds) >= {"detection", "segmentation"}


def test_cascade_gating_soundness_and_equality_inside():
    img = _image(800, 900, seed=5)
    fg = np.ones(img.shape(1), np.uint8)
    seg = _unet_d(6)
    det_map = np.zeros(img.shape(1), np.uint8)
    det_map[20:40, 30:50] = 1
    regions = detect_candidates(det_map)
    gate = gate_mask(regions, img.shape(0), 92)
    ref = run_fcn_tiled(img, seg, 0, fg)
    lm = run_fcn_tiled(img, seg, 0, fg, gate)
    assert not (lm.labels & ~gate).any()
    np.testing.assert_array_equal(lm.labels[gate], ref.labels[gate])
    assert lm.tiles_evaluated < ref.tiles_evaluated


def test_cascade_rejects_wrong_models():
    img = _image()
    det, seg = _cn2_models(1.0)
    with pytest.raises(ValueError):
        run_cascade(img, det, seg, CN1)
    with pytest.raises(ValueError):
        run_cascade(img, det, seg, SN1)


def test_pipelines_are_deterministic():
    img = _image(seed=9)
    fg = np.ones(img.shape(1), np.uint8)
    det, seg = _cn2_models(10.0)
    a = run_pipeline(CN2, img, {"detector": det, "segmenter": seg}, fg)
    b = run_pipeline(CN2, img, {"detector": det, "segmenter": seg}, fg)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = run_pipeline(SN2, img, {"segmenter": seg}, fg)
    np.testing.assert_array_equal(a.labels, c.labels)
