import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laghash.errors import ContractError
from laghash.hashfield import FieldConfig, count_params, empty_store, encode_with_cache, field_eval, init_params
from laghash.image_task import (
    ImageDataset,
    TrainOptions,
    export_points,
    fit_image,
    load_image,
    pixel_coords,
    psnr,
    render_full,
    save_image,
    steps_for_epochs,
    synthetic_image,
    validation_indices,
)
from laghash.losses import LossWeights, guidance_terms, guidance_value
from laghash.optim import level_sigmas

TINY = FieldConfig(levels=3, lagrangian_levels=1, base_res=2, max_res=8, table_size=64, gaussians_per_bucket=2,
                   mlp_hidden=16, output_dim=1, sigma_decay_steps=100)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- psnr ---------------------------------------------------------------------


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == 100.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((2, 2)), np.ones((2, 2))) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(np.float64, (3, 4), elements=st.floats(0, 1)), arrays(np.float64, (3, 4), elements=st.floats(0, 1)))
def test_psnr_of_target_is_maximal(pred, target):
    assert psnr(target, target) >= psnr(pred, target)


# -- dataset ------------------------------------------------------------------


def test_pixel_coords_convention():
    c = pixel_coords(2, 4)
    np.testing.assert_array_equal(c[0], [0.125, 0.25])
    np.testing.assert_array_equal(c[5], [0.375, 0.75])  # row 1, col 1
    assert np.all((c > 0) & (c < 1))


def test_dataset_validation():
    with pytest.raises(ContractError):
        ImageDataset(np.full((2, 2), 1.5))
    with pytest.raises(ContractError):
        ImageDataset(np.zeros((2, 2)), weight_map=np.zeros((3, 3)))
    ds = ImageDataset(np.zeros((3, 5)))
    assert ds.shape == (3, 5, 1) and ds.weight_map.shape == (3, 5)


def test_png_round_trip(tmp_path):
    img = synthetic_image("noise:6:3")
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_synthetic_step_edge():
    img = load_image("synthetic:step_edge:8")
    assert img.shape == (8, 8, 1)
    assert img[:, :4].max() == 0.0 and img[:, 4:].min() == 1.0


def test_validation_subsample_is_fixed():
    a = validation_indices(1000, 64, 3)
    np.testing.assert_array_equal(a, validation_indices(1000, 64, 3))
    assert len(np.unique(a)) == 64 and np.all(np.diff(a) > 0)
    assert len(validation_indices(10, 64, 0)) == 10


def test_steps_for_epochs():
    assert steps_for_epochs(350, 256 * 256, 2**14) == 1400
    assert steps_for_epochs(2, 10, 3) == 8


# -- render / export ----------------------------------------------------------


def test_render_zero_params_is_half():
    cfg = FieldConfig(levels=2, lagrangian_levels=1, base_res=2, max_res=4, table_size=16)
    img = render_full(cfg, empty_store(cfg), level_sigmas(cfg, 0), 5, 7)
    assert img.shape == (5, 7, 3)
    assert np.all(img == 0.5)


def test_render_tiling_invariance(rng):
    p = init_params(TINY, rng, np.float32)
    p.values[:] = rng.normal(size=len(p))
    s = level_sigmas(TINY, 10)
    a = render_full(TINY, p, s, 9, 11, tile=1)
    b = render_full(TINY, p, s, 9, 11, tile=4096)
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_render_matches_per_pixel_loop(rng):
    p = init_params(TINY, rng, np.float64)
    p.values[:] = rng.normal(size=len(p))
    s = level_sigmas(TINY, 0)
    img = render_full(TINY, p, s, 8, 8)
    for r in range(8):
        for c in range(8):
            x = np.array([[(c + 0.5) / 8, (r + 0.5) / 8]])
            assert img[r, c, 0] == sigmoid(field_eval(TINY, p, x, s))[0, 0]


def test_export_points_counts(rng):
    eul = FieldConfig(levels=3, lagrangian_levels=0, base_res=2, max_res=8, table_size=64)
    assert export_points(eul, init_params(eul, rng), []) == []
    cfg = FieldConfig(levels=4, lagrangian_levels=2, base_res=2, max_res=16, table_size=32, gaussians_per_bucket=3)
    p = init_params(cfg, rng)
    pts = export_points(cfg, p, level_sigmas(cfg, 0))
    assert len(pts) == 2 * 32 * 3
    assert {pt.level for pt in pts} == {2, 3}
    means = p.view("gaussian_means/3")
    last = pts[-1]
    assert (last.bucket, last.k) == (31, 2)
    assert last.mean == tuple(float(v) for v in means[31, 2])


# -- training -----------------------------------------------------------------


def test_constant_single_pixel_image_is_learned():
    ds = ImageDataset(np.full((1, 1, 1), 0.37))
    res = fit_image(TINY, ds, TrainOptions(steps=200, batch=8, log_every=0), LossWeights())
    assert res.metrics[-1]["psnr"] > 40


def test_checkerboard_recon_decreases():
    cfg = FieldConfig(levels=6, lagrangian_levels=2, base_res=4, max_res=64, table_size=2**10,
                      gaussians_per_bucket=4, output_dim=1, sigma_decay_steps=1000)
    ds = ImageDataset(synthetic_image("checker:64:8"))
    res = fit_image(cfg, ds, TrainOptions(steps=2000, batch=512, log_every=500), LossWeights())
    assert [m["step"] for m in res.metrics] == [0, 500, 1000, 1500, 2000]
    assert res.metrics[-1]["recon"] < res.metrics[0]["recon"]


def test_channel_mismatch_is_rejected():
    with pytest.raises(ContractError):
        fit_image(TINY, ImageDataset(np.zeros((2, 2, 3))), TrainOptions(steps=1), LossWeights())


def test_training_is_reproducible():
    ds = ImageDataset(synthetic_image("noise:8:1")[..., :1])
    opts = TrainOptions(steps=30, batch=32, log_every=10)
    a = fit_image(TINY, ds, opts, LossWeights())
    b = fit_image(TINY, ds, opts, LossWeights())
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(a.params.values, b.params.values)


def test_guidance_does_not_grow_with_training():
    cfg = FieldConfig(levels=4, lagrangian_levels=2, base_res=4, max_res=32, table_size=256, gaussians_per_bucket=4,
                      output_dim=1, sigma_decay_steps=300)
    ds = ImageDataset(synthetic_image("step_edge:32"))
    probe = np.random.default_rng(99).choice(32 * 32, size=512, replace=False)
    x, w = ds.coords[probe], ds.flat_weights[probe]
    sig = level_sigmas(cfg, 600)

    def guide(params):
        _, caches = encode_with_cache(cfg, params, x, sig)
        return guidance_value(guidance_terms(caches), w, float(len(x)))

    before, after = [], []
    for seed in range(3):
        p0 = init_params(cfg, np.random.default_rng(seed), np.float32)
        before.append(guide(p0))
        res = fit_image(cfg, ds, TrainOptions(steps=600, batch=256, log_every=0, seed=seed),
                        LossWeights(lambda_guide=0.1), params=p0.copy())
        after.append(guide(res.params))
    assert np.mean(after) <= np.mean(before)


def test_param_count_of_fit_matches_config():
    res = fit_image(TINY, ImageDataset(np.zeros((2, 2, 1))), TrainOptions(steps=1, batch=4), LossWeights())
    assert len(res.params) == count_params(TINY)[0]
