from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cascadeseg.networks import (
    UNET_D,
    UNET_S,
    CheckpointMismatch,
    build,
    build_sw_cnn,
    build_unet_d,
    build_unet_s,
    load_checkpoint,
    parameter_count,
    receptive_margin,
    save_checkpoint,
    sw_cnn_spec,
    unet_output_size,
    unet_spec,
    valid_input_sizes,
)


def test_sw_cnn_forward_shape():
    model = build_sw_cnn().eval()
    with torch.no_grad():
        assert model(torch.rand(100, 3, 95, 95) * 255).shape == (100, 2)


def test_sw_cnn_zero_head_gives_zero_logits():
    model = build_sw_cnn().eval()
    torch.nn.init.zeros_(model.head.weight)
    torch.nn.init.zeros_(model.head.bias)
    with torch.no_grad():
        assert model(torch.zeros(1, 3, 95, 95)).abs().max().item() == 0.0


def test_layer_counts_match_reference_table():
    d, s, w = build_unet_d(base_width=4).spec, build_unet_s(base_width=4).spec, sw_cnn_spec()
    assert (d.n_conv, d.n_pool, d.output_size) == (23, 4, 308)
    assert (s.n_conv, s.n_pool, s.output_size) == (13, 2, 452)
    assert (w.n_conv, w.n_pool) == (4, 4)
    assert [l.kernel for l in w.layers if l.kind == "conv"] == [4, 5, 4, 4]


def test_margins():
    assert receptive_margin(unet_spec(UNET_D, 4, 492, 4)) == 92
    assert receptive_margin(unet_spec(UNET_S, 2, 492, 4)) == 20
    with pytest.raises(ValueError):
        receptive_margin(sw_cnn_spec())


def test_degenerate_margin_is_zero():
    spec = unet_spec(UNET_S, 2, 492, 4)
    assert receptive_margin(replace(spec, output_size=spec.input_size)) == 0


def test_invalid_input_lists_neighbours():
    with pytest.raises(ValueError, match="nearest valid sizes"):
        unet_spec(UNET_D, 4, 500, 4)
    assert unet_output_size(500, 4) is None
    sizes = valid_input_sizes(4, 500)
    assert all(unet_output_size(s, 4) for s in sizes) and min(sizes) < 500 < max(sizes)


@pytest.mark.parametrize("depth,out", [(4, 308), (2, 452)])
def test_unet_shapes_any_batch(depth, out):
    model = build(unet_spec(UNET_D if depth == 4 else UNET_S, depth, 492, 2)).eval()
    with torch.no_grad():
        y = model(torch.rand(2, 3, 492, 492))
    assert y.shape == (2, 2, out, out)


def test_parameter_counts_match_reference():
    assert parameter_count(build_sw_cnn()) == 220_826
    assert parameter_count(build_unet_d()) == 31_031_745
    assert parameter_count(build_unet_s()) == 1_862_849


def test_builds_are_deterministic():
    a, b = build_unet_s(base_width=4, seed=3), build_unet_s(base_width=4, seed=3)
    c = build_unet_s(base_width=4, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_translation_equivariance_by_pool_stride():
    model = build(unet_spec(UNET_S, 2, 132, 4), seed=1).eval()
    x = torch.rand(1, 3, 140, 132) * 255
    with torch.no_grad():
        y0 = model(x[:, :, :132])
        y1 = model(x[:, :, 4:136])  # shift by one stride of the 2-pool network (4 px)
    torch.testing.assert_close(y0[:, :, 4:], y1[:, :, :-4], atol=1e-4, rtol=1e-4)


def test_gradient_check_miniature_unet():
    torch.manual_seed(0)
    model = build(unet_spec(UNET_S, 2, 44, 2), seed=0).double().eval()
    x = torch.rand(2, 3, 44, 44, dtype=torch.float64) * 255
    y = torch.randint(0, 2, (2, 4, 4))

    def loss_fn():
        return F.cross_entropy(model(x), y)

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    checked = 0
    eps = 1e-6
    while checked < 20:
        p = params[rng.integers(len(params))]
        i = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[i].item()
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-8:
            continue  # dead unit: both zero
        assert abs(analytic - numeric) / scale < 1e-3
        checked += 1


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    model = build_unet_s(input_size=132, base_width=2, seed=5)
    model.set_input_stats(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
    save_checkpoint(model, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt", model.spec)
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.pt", unet_spec(UNET_S, 2, 132, 4))
    blob = torch.load(tmp_path / "m.pt", weights_only=False)
    blob["spec"]["base_width"] = 3
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "bad.pt")


def test_unet_output_is_two_class_softmax():
    model = build(unet_spec(UNET_S, 2, 132, 2)).eval()
    with torch.no_grad():
        y = model(torch.rand(1, 3, 132, 132))
    assert torch.all(y[:, 0] == 0)
