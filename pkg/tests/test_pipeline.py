import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from objlidar.conditioning import format_prompt
from objlidar.datagen import SIZE_PRIORS, category_scale, synth_object
from objlidar.diffusion import scaled_schedule
from objlidar.errors import CapacityError, CheckpointError, ConfigError, ValidationError
from objlidar.geometry import ObjectBox, SensorConfig, project_to_range
from objlidar.nn import ParamStore, init_controller_params, init_object_params, init_scene_params
from objlidar.pipeline import (
    EGO_BOX,
    augment_scene,
    compose_object_image,
    format_scenario,
    generate_objects,
    generate_scene,
    parse_scenario,
    partial_completion,
    place_objects_uniform,
    read_scenario,
    sparse_rows_mask,
    sparse_to_dense,
    write_scenario,
)

from helpers import TINY_OBJECT, TINY_SCENE, _SixDimEncoder
from oracles import box_contains, rects_overlap

SENSOR = SensorConfig(8, 16)
LABELS = ("car", "pedestrian", "truck")


@pytest.fixture(scope="module")
def scene_params():
    rng = np.random.default_rng(0)
    params = init_scene_params(TINY_SCENE, rng)
    params.randomize(rng, 0.3)
    init_controller_params(TINY_SCENE, rng, params)
    return params


def _image(rng, h=8, w=16):
    img = np.zeros((h, w, 2))
    img[..., 0] = rng.uniform(0.05, 1, (h, w))
    img[..., 1] = rng.uniform(0, 1, (h, w))
    return img


class TestGenerateObjects:
    def _params(self):
        rng = np.random.default_rng(1)
        params = init_object_params(TINY_OBJECT, rng)
        params.randomize(rng, 0.3)
        return params

    def test_shapes_and_determinism(self):
        params, sched = self._params(), scaled_schedule(5)
        conds = [
            (format_prompt("car", "parked"), ObjectBox(5, 1, -0.9, 1.8, 4.2, 1.6, 0.2)),
            (format_prompt("truck"), ObjectBox(-8, 4, 0, 2.5, 8, 3.2, -1.0)),
        ]
        kw = dict(cfg=TINY_OBJECT, encoder=_SixDimEncoder())
        a = generate_objects(conds, params, sched, np.random.default_rng(3), **kw)
        b = generate_objects(conds, params, sched, np.random.default_rng(3), **kw)
        assert len(a) == 2 and all(c.shape == (TINY_OBJECT.n_points, 4) for c in a)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        # points stay inside the rotated normalization volume around the box centre
        reach = np.linalg.norm(category_scale("car")[:2])
        assert np.all(np.linalg.norm(a[0][:, :2] - [5, 1], axis=1) <= reach + 1e-9)

    def test_empty(self):
        assert generate_objects([], None, scaled_schedule(5), np.random.default_rng()) == []

    def test_missing_params(self):
        conds = [(format_prompt("car"), ObjectBox(5, 0, 0, 1, 1, 1))]
        with pytest.raises(CheckpointError):
            generate_objects(conds, ParamStore(), scaled_schedule(5), np.random.default_rng())


class TestCompose:
    def test_empty(self):
        img, masks = compose_object_image([], SENSOR, LABELS)
        assert not img.any() and not masks.masks.any()

    def test_single_object_pixel_count(self, kitti, rng):
        box = ObjectBox(10, 2, -0.93, 1.8, 4.2, 1.6, 0.4)
        cloud = synth_object("car", box, kitti, rng)
        img, masks = compose_object_image([(cloud, box, "car")], kitti, LABELS)
        _, stats = project_to_range(cloud, kitti)
        assert int((img[..., 0] > 0).sum()) == stats.n_pixels
        assert int(masks.channel("car").sum()) == stats.n_pixels

    def test_overlap_nearer_wins(self, kitti, rng):
        near = ObjectBox(8, 0, -0.93, 1.8, 4.2, 1.6, 0.0)
        far = ObjectBox(16, 0.5, -0.13, 2.5, 8.0, 3.2, 0.0)
        c_near = synth_object("car", near, kitti, rng)
        c_far = synth_object("truck", far, kitti, rng)
        img, masks = compose_object_image([(c_far, far, "truck"), (c_near, near, "car")], kitti, LABELS)
        i_near, _ = project_to_range(c_near, kitti)
        i_far, _ = project_to_range(c_far, kitti)
        both = (i_near[..., 0] > 0) & (i_far[..., 0] > 0)
        assert both.any()
        np.testing.assert_array_equal(img[both, 0], np.minimum(i_near[both, 0], i_far[both, 0]))
        assert masks.channel("car")[both].all()

    def test_unknown_category(self):
        with pytest.raises(ConfigError):
            compose_object_image([(np.zeros((0, 4)), EGO_BOX, "boat")], SENSOR, LABELS)


class TestGenerateScene:
    def test_fresh_controller_equals_unconditional(self, scene_params, rng):
        sched = scaled_schedule(6)
        obj = _image(rng)
        a, _ = generate_scene(obj, scene_params, sched, np.random.default_rng(11), TINY_SCENE)
        b, cloud = generate_scene(None, scene_params, sched, np.random.default_rng(11), TINY_SCENE, SENSOR)
        assert np.array_equal(a, b)
        assert cloud.shape[1] == 4

    def test_range_and_determinism(self, scene_params, rng):
        sched = scaled_schedule(6)
        obj = _image(rng)
        a, _ = generate_scene(obj, scene_params, sched, np.random.default_rng(2), TINY_SCENE)
        b, _ = generate_scene(obj, scene_params, sched, np.random.default_rng(2), TINY_SCENE)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1
        assert not a[a[..., 0] == 0, 1].any()

    def test_errors(self, scene_params):
        sched = scaled_schedule(3)
        with pytest.raises(ValidationError):
            generate_scene(None, scene_params, sched, np.random.default_rng())
        with pytest.raises(ValidationError):
            generate_scene(np.zeros((8, 16)), scene_params, sched, np.random.default_rng())
        with pytest.raises(CheckpointError):
            generate_scene(np.zeros((8, 16, 2)), ParamStore(), sched, np.random.default_rng())
        no_ctl = ParamStore()
        for n in scene_params.names("den."):
            no_ctl.values[n] = scene_params[n]
        with pytest.raises(CheckpointError):
            generate_scene(np.zeros((8, 16, 2)), no_ctl, sched, np.random.default_rng(), TINY_SCENE)


class TestCompletion:
    def test_sparse_rows(self):
        m = sparse_rows_mask(64)
        assert m.sum() == 16 and m[0] == 1 and m[4] == 1 and m[3] == 0
        with pytest.raises(ValidationError):
            sparse_rows_mask(10)

    def test_sparse_to_dense_preserves_rows(self, scene_params, rng):
        sched = scaled_schedule(5)
        full = _image(rng)
        sparse = full * sparse_rows_mask(8)[:, None, None]
        out, n_rows = sparse_to_dense(sparse, scene_params, sched, rng, TINY_SCENE)
        assert n_rows == 2
        assert np.array_equal(out[::4], sparse[::4])
        assert out.min() >= 0 and out.max() <= 1

    def test_all_rows_known(self, scene_params, rng):
        img = _image(rng)
        out, n = sparse_to_dense(img, scene_params, scaled_schedule(3), rng, TINY_SCENE, stride=1)
        assert n == 8 and np.array_equal(out, img)

    def test_empty_rows_rejected(self, scene_params, rng):
        img = _image(rng)
        img[::4] = 0
        with pytest.raises(ValidationError):
            sparse_to_dense(img, scene_params, scaled_schedule(3), rng, TINY_SCENE)

    def test_partial_half_azimuth(self, scene_params, rng):
        img = _image(rng)
        mask = np.zeros((8, 16), dtype=np.uint8)
        mask[:, :8] = 1
        out = partial_completion(img, mask, scene_params, scaled_schedule(5), rng, TINY_SCENE)
        assert np.array_equal(out[:, :8], img[:, :8])
        assert not np.array_equal(out[:, 8:], img[:, 8:])

    def test_partial_full_and_empty(self, scene_params, rng):
        img, sched = _image(rng), scaled_schedule(4)
        full = partial_completion(img, np.ones((8, 16)), scene_params, sched, rng, TINY_SCENE)
        assert np.array_equal(full, img)
        empty = partial_completion(img, np.zeros((8, 16)), scene_params, sched, np.random.default_rng(6), TINY_SCENE)
        free, _ = generate_scene(None, scene_params, sched, np.random.default_rng(6), TINY_SCENE, SENSOR)
        assert np.array_equal(empty, free)

    def test_partial_errors(self, scene_params, rng):
        img = _image(rng)
        with pytest.raises(ValidationError):
            partial_completion(img, np.ones((8, 8)), scene_params, scaled_schedule(3), rng, TINY_SCENE)
        with pytest.raises(ValidationError):
            partial_completion(img, np.full((8, 16), 0.5), scene_params, scaled_schedule(3), rng, TINY_SCENE)


class TestPlacement:
    EXTENT = (-30.0, 30.0, -30.0, 30.0)

    def test_zero(self, rng):
        assert place_objects_uniform(0, self.EXTENT, SIZE_PRIORS, rng) == []

    @given(st.integers(0, 2 ** 20), st.integers(1, 12))
    def test_no_overlap(self, seed, n):
        out = place_objects_uniform(n, self.EXTENT, SIZE_PRIORS, np.random.default_rng(seed))
        assert len(out) == n
        boxes = [b.as_array() for b, _ in out] + [EGO_BOX.as_array()]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not rects_overlap(boxes[i], boxes[j])
        for b, cat in out:
            assert -30 <= b.x_c <= 30 and -30 <= b.y_c <= 30
            assert b.z_c == pytest.approx(-1.73 + b.h / 2)
            assert -math.pi < b.r <= math.pi
            prior = np.array(SIZE_PRIORS[cat])
            assert np.all(np.abs(np.array([b.w, b.l, b.h]) / prior - 1) <= 0.1 + 1e-12)

    def test_deterministic(self):
        a = place_objects_uniform(5, self.EXTENT, SIZE_PRIORS, np.random.default_rng(4))
        b = place_objects_uniform(5, self.EXTENT, SIZE_PRIORS, np.random.default_rng(4))
        assert a == b

    def test_capacity(self, rng):
        with pytest.raises(CapacityError) as info:
            place_objects_uniform(20, (-3, 3, -3, 3), {"truck": SIZE_PRIORS["truck"]}, rng, avoid_ego=False)
        assert 0 < info.value.achieved < 20


class TestAugment:
    def test_no_inserts(self, rng):
        scene = rng.normal(size=(20, 4))
        assert np.array_equal(augment_scene(scene, []), scene)

    def test_empty_scene(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        out = augment_scene(np.zeros((0, 4)), [(a, EGO_BOX), (b, EGO_BOX)])
        assert np.array_equal(out, np.concatenate([a, b]))

    def test_removes_inside_points(self):
        box = ObjectBox(10, 0, 0, 2, 4, 2, 0.5)
        scene = np.array([[10, 0, 0, 0.1], [20, 0, 0, 0.2], [10.5, 0.3, 0.2, 0.3], [0, 5, 0, 0.4]])
        insert = np.array([[10, 0, 0.9, 0.7]])
        out = augment_scene(scene, [(insert, box)])
        kept = [p for p in scene if not box_contains(p, box.as_array())]
        assert np.array_equal(out, np.vstack(kept + [insert[0]]))
        assert len(kept) == 2


class TestScenario:
    def test_parse(self):
        text = '# header\ncar 1 2 3 1.8 4.2 1.6 0.5 "a red car, parked"\n\ntruck 0 0 0 2 8 3 -1\n'
        items = parse_scenario(text)
        assert len(items) == 2
        assert items[0][0].rendered == "An object from class car, a red car, parked."
        assert items[0][1] == ObjectBox(1, 2, 3, 1.8, 4.2, 1.6, 0.5)
        assert items[1][0].description == ""

    @pytest.mark.parametrize("line", ["car 1 2 3", "car a 2 3 1 1 1 0", 'car 1 2 3 1 1 1 0 "x" extra'])
    def test_bad_lines(self, line):
        with pytest.raises(ValidationError):
            parse_scenario(line)

    @given(
        st.text(st.characters(blacklist_categories=("Cc", "Cs")), max_size=20),
        st.lists(st.floats(-50, 50, allow_nan=False), min_size=7, max_size=7),
    )
    def test_round_trip(self, desc, vals):
        vals[3:6] = [abs(v) + 0.1 for v in vals[3:6]]
        items = [(format_prompt("car", desc), ObjectBox(*vals))]
        back = parse_scenario(format_scenario(items))
        assert back[0][0].description == desc
        assert back[0][1] == items[0][1]

    def test_file_round_trip(self, tmp_path):
        items = [(format_prompt("pedestrian", 'says "hi"'), ObjectBox(1.25, -3, 0, 0.7, 0.8, 1.75, 3.0))]
        write_scenario(tmp_path / "s.txt", items)
        back = read_scenario(tmp_path / "s.txt")
        assert back[0][0] == items[0][0] and back[0][1] == items[0][1]
