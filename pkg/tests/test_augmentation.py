import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadeseg.augmentation import (
    DIHEDRAL,
    DisplacementField,
    FoveationConfig,
    Foveator,
    apply_dihedral,
    blur_sigma,
    compose_dihedral,
    dihedral_variants,
    elastic_deform,
    foveate,
    random_displacement_field,
)


def _asym(n=6):
    return np.arange(n * n).reshape(n, n)


def test_constant_patch_has_identical_variants():
    p = np.full((5, 5, 3), 7, np.uint8)
    variants = dihedral_variants(p, np.zeros((5, 5), np.uint8))
    assert len(variants) == 8
    for img, _ in variants:
        np.testing.assert_array_equal(img, p)


def test_asymmetric_patch_gives_eight_distinct_variants():
    a = _asym()
    imgs = [img for img, _ in dihedral_variants(a, a)]
    assert len({img.tobytes() for img in imgs}) == 8
    for img, lab in dihedral_variants(a, a.copy()):
        np.testing.assert_array_equal(img, lab)


def test_four_quarter_turns_are_identity():
    a = _asym()
    out = a
    for _ in range(4):
        out = apply_dihedral(out, 1, False)
    np.testing.assert_array_equal(out, a)


def test_non_square_patch_rejected():
    with pytest.raises(ValueError):
        dihedral_variants(np.zeros((4, 5)), np.zeros((4, 5)))


@pytest.mark.parametrize("a", DIHEDRAL)
@pytest.mark.parametrize("b", DIHEDRAL)
def test_composition_is_closed_and_matches_table(a, b):
    x = _asym()
    applied = apply_dihedral(apply_dihedral(x, *a), *b)  # a first, then b
    c = compose_dihedral(a, b)
    assert c in DIHEDRAL
    np.testing.assert_array_equal(applied, apply_dihedral(x, *c))


def test_zero_field_is_identity():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
    lab = (rng.random((20, 20)) > 0.5).astype(np.uint8)
    out_img, out_lab = elastic_deform(img, lab, DisplacementField.zeros((20, 20)))
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_lab, lab)


def test_uniform_field_is_mirror_shift():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    lab = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    out_img, out_lab = elastic_deform(img, lab, DisplacementField.uniform((16, 16), 5, 0))
    # out[y, x] = in[y, x + 5], mirrored past the right edge
    oracle = np.pad(img, ((0, 0), (0, 5), (0, 0)), mode="reflect")[:, 5:]
    np.testing.assert_array_equal(out_img, oracle)
    np.testing.assert_array_equal(out_lab, np.pad(lab, ((0, 0), (0, 5)), mode="reflect")[:, 5:])


def test_field_shape_mismatch():
    with pytest.raises(ValueError):
        elastic_deform(np.zeros((8, 8, 3)), np.zeros((8, 8)), DisplacementField.zeros((9, 8)))


@given(st.integers(0, 10_000), st.floats(0.5, 9.5))
@settings(max_examples=25, deadline=None)
def test_random_field_bounded_and_label_binary(seed, max_disp):
    rng = np.random.default_rng(seed)
    field = random_displacement_field((256, 256), rng, max_displacement=max_disp)
    assert field.max_magnitude <= max_disp + 1e-6
    yy, xx = np.mgrid[:256, :256]
    blob = ((yy - 128) ** 2 + (xx - 128) ** 2 < 50**2).astype(np.uint8)
    _, lab = elastic_deform(np.zeros((256, 256, 3), np.uint8), blob, field)
    assert set(np.unique(lab)) <= {0, 1}
    assert abs(int(lab.sum()) - int(blob.sum())) < 0.1 * blob.sum()


def test_foveation_constant_in_constant_out():
    cfg = FoveationConfig()
    out = foveate(np.full((cfg.context_size, cfg.context_size, 3), 123, np.uint8), cfg)
    assert out.shape == (95, 95, 3)
    assert (out == 123).all()


def test_degenerate_foveation_is_centre_crop():
    cfg = FoveationConfig(context_factor=1.0, blur=False)
    rng = np.random.default_rng(2)
    patch = rng.integers(0, 256, (101, 101, 3)).astype(np.uint8)
    np.testing.assert_array_equal(foveate(patch, cfg), patch[3:98, 3:98])


def test_foveation_needs_context():
    with pytest.raises(ValueError):
        foveate(np.zeros((100, 100, 3), np.uint8), FoveationConfig())


def _grad_energy(img):
    gy, gx = np.gradient(img.astype(float))
    return np.hypot(gy, gx)


def test_checkerboard_loses_detail_towards_periphery():
    cfg = FoveationConfig()
    n = cfg.context_size
    yy, xx = np.mgrid[:n, :n]
    board = (((yy // 2) + (xx // 2)) % 2 * 255).astype(np.float32)
    out = foveate(board, cfg)
    e = _grad_energy(out)
    c = np.arange(95) - 47
    r = np.hypot(*np.meshgrid(c, c, indexing="ij"))
    assert e[r > 35].mean() < e[r < 12].mean()


def test_blur_is_monotone_in_radius():
    cfg = FoveationConfig()
    rho = np.linspace(0, 1, 50)
    s = blur_sigma(cfg, rho)
    assert np.all(np.diff(s) >= 0)
    assert s[0] == 1.0 and s[-1] == 9.0


def test_foveation_commutes_with_dihedral_group():
    cfg = FoveationConfig()
    rng = np.random.default_rng(3)
    x = rng.random((cfg.context_size, cfg.context_size, 3)).astype(np.float32) * 255
    f = foveate(x, cfg)
    for k, flip in DIHEDRAL:
        np.testing.assert_allclose(foveate(apply_dihedral(x, k, flip), cfg), apply_dihedral(f, k, flip), atol=1e-3)


def test_foveator_matches_foveate_at_degenerate_config():
    cfg = FoveationConfig(context_factor=1.0, blur=False)
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (200, 220, 3)).astype(np.uint8)
    fov = Foveator(img, cfg)
    out = fov([(100, 110), (60, 70)])
    np.testing.assert_allclose(out[0], img[53:148, 63:158], atol=1e-3)
    np.testing.assert_allclose(out[1], img[13:108, 23:118], atol=1e-3)


def test_foveator_close_to_foveate_with_blur():
    cfg = FoveationConfig()
    rng = np.random.default_rng(5)
    from scipy import ndimage as ndi

    img = ndi.gaussian_filter(rng.random((400, 400, 3)) * 255, (3, 3, 0)).astype(np.float32)
    fov = Foveator(img, cfg)
    h = cfg.context_size // 2
    ref = foveate(img[200 - h : 200 + h + 1, 210 - h : 210 + h + 1], cfg)
    got = fov([(200, 210)])[0]
    # differences come only from where the blur sees the window border
    assert np.abs(got - ref)[20:75, 20:75].max() < 0.5
