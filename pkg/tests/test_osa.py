import logging

import numpy as np
import pytest

from objlidar.diffusion import forward_sample, scaled_schedule
from objlidar.errors import ConfigError, ValidationError
from objlidar.geometry import MaskStack
from objlidar.nn import init_controller_params, init_scene_params, scene_denoiser_forward, scene_loss
from objlidar.osa import build_masked_channels, combined_scene_loss, osa_loss

from helpers import TINY_SCENE, tiny_scene_images

H, W = 8, 16


def _params(seed=0):
    rng = np.random.default_rng(seed)
    params = init_scene_params(TINY_SCENE, rng)
    init_controller_params(TINY_SCENE, rng, params)
    params.randomize(rng)
    return params


def _scene(rng, n_cat=3):
    img = rng.uniform(0, 1, (H, W, 2))
    labels = rng.integers(-1, n_cat, (H, W))
    masks = np.stack([labels == c for c in range(n_cat)], -1).astype(np.uint8)
    return img, MaskStack(masks, tuple(f"c{c}" for c in range(n_cat)))


def _single(masks, i):
    return MaskStack(masks.masks[:, :, i:i + 1].copy(), (masks.categories[i],))


class TestMaskedChannels:
    def test_support_confinement(self, rng):
        img, masks = _scene(rng)
        mt = build_masked_channels(img, masks)
        for i in range(3):
            outside = masks.masks[:, :, i] == 0
            assert not mt.groups[i][outside].any()
            inside = ~outside
            assert np.array_equal(mt.groups[i][inside], img[inside])

    def test_partition_recomposition(self, rng):
        img, masks = _scene(rng)
        mt = build_masked_channels(img, masks)
        background = img * (1 - masks.masks.any(-1))[..., None]
        assert np.array_equal(mt.groups.sum(0) + background, img)

    def test_areas(self, rng):
        img, masks = _scene(rng)
        np.testing.assert_array_equal(build_masked_channels(img, masks).areas, masks.masks.sum((0, 1)))

    def test_shape_mismatch(self, rng):
        _, masks = _scene(rng)
        with pytest.raises(ValidationError):
            build_masked_channels(np.zeros((H, W + 8, 2)), masks)


class TestOsaLoss:
    def test_matches_manual_area_normalization(self, rng):
        params, sched = _params(), scaled_schedule(10)
        img, masks = _scene(rng, 2)
        mt = build_masked_channels(img, masks)
        eps = rng.standard_normal(mt.groups.shape)
        got = osa_loss(mt, 4, eps, sched, params, TINY_SCENE)
        per_group = []
        for i in range(2):
            m = masks.masks[:, :, i][..., None]
            pred = scene_denoiser_forward(forward_sample(mt.groups[i], 4, eps[i], sched), 4, params, TINY_SCENE)
            per_group.append(((pred - eps[i]) ** 2 * m).sum() / m.sum())
        assert got == pytest.approx(np.mean(per_group), rel=1e-12)

    def test_unmasked_pixel_perturbation(self, rng):
        params, sched = _params(), scaled_schedule(10)
        img, masks = _scene(rng)
        eps = rng.standard_normal((1, H, W, 2))
        for i in range(3):
            single = _single(masks, i)
            base = osa_loss(build_masked_channels(img, single), 6, eps, sched, params, TINY_SCENE)
            for v, u in np.argwhere(masks.masks[:, :, i] == 0)[:5]:
                bumped = img.copy()
                bumped[v, u] += [0.37, -0.21]
                after = osa_loss(build_masked_channels(bumped, single), 6, eps, sched, params, TINY_SCENE)
                assert abs(after - base) <= 1e-12

    def test_masked_pixel_perturbation_matters(self, rng):
        params, sched = _params(), scaled_schedule(10)
        img, masks = _scene(rng)
        single = _single(masks, 0)
        eps = rng.standard_normal((1, H, W, 2))
        v, u = np.argwhere(masks.masks[:, :, 0] == 1)[0]
        bumped = img.copy()
        bumped[v, u] += 0.5
        a = osa_loss(build_masked_channels(img, single), 9, eps, sched, params, TINY_SCENE)
        b = osa_loss(build_masked_channels(bumped, single), 9, eps, sched, params, TINY_SCENE)
        assert a != b

    def test_empty_masks(self, rng, caplog):
        params, sched = _params(), scaled_schedule(10)
        empty = MaskStack.empty(H, W, ["car", "truck"])
        mt = build_masked_channels(rng.uniform(size=(H, W, 2)), empty)
        with caplog.at_level(logging.WARNING):
            assert osa_loss(mt, 3, np.zeros(mt.groups.shape), sched, params, TINY_SCENE) == 0.0
        assert "empty" in caplog.text
        assert all(not g.any() for g in params.grads.values())

    def test_empty_group_skipped(self, rng):
        params, sched = _params(), scaled_schedule(10)
        img, masks = _scene(rng, 2)
        padded = MaskStack(np.concatenate([masks.masks, np.zeros((H, W, 1), np.uint8)], -1), masks.categories + ("x",))
        eps = rng.standard_normal((3, H, W, 2))
        a = osa_loss(build_masked_channels(img, masks), 5, eps[:2], sched, params, TINY_SCENE)
        b = osa_loss(build_masked_channels(img, padded), 5, eps, sched, params, TINY_SCENE)
        assert a == pytest.approx(b, rel=1e-14)


class TestCombined:
    def _batch(self):
        return tiny_scene_images(np.random.default_rng(8))

    def test_lambda_zero_is_scene_loss(self):
        params, sched = _params(), scaled_schedule(10)
        img, obj, masks = self._batch()
        t = np.array([3, 9])
        a = combined_scene_loss(img, obj, masks, t, np.random.default_rng(1), sched, params, TINY_SCENE, 0.0)
        eps = np.random.default_rng(1).standard_normal(img.shape)
        assert a == scene_loss(img, obj, t, eps, sched, params, TINY_SCENE)

    def test_linear_in_lambda(self):
        params, sched = _params(), scaled_schedule(10)
        img, obj, masks = self._batch()
        t = np.array([3, 9])
        vals = [
            combined_scene_loss(img, obj, masks, t, np.random.default_rng(1), sched, params, TINY_SCENE, lam)
            for lam in (0.0, 1.0, 2.5)
        ]
        osa = vals[1] - vals[0]
        assert osa > 0
        assert vals[2] == pytest.approx(vals[0] + 2.5 * osa, rel=1e-12)

    def test_negative_lambda(self):
        img, obj, masks = self._batch()
        with pytest.raises(ConfigError):
            combined_scene_loss(img, obj, masks, 2, np.random.default_rng(), scaled_schedule(10), _params(), TINY_SCENE, -1)
