import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agcmnet import data as D
from agcmnet.errors import ConfigError, DataError, PnmError


class TestScenes:
    def test_deterministic(self):
        a, b = D.gen_scene(42), D.gen_scene(42)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_full_canvas_disk(self):
        disk = D.ObjectSpec("disk", (32.0, 32.0), 32.0)
        scene = D.gen_scene(0, D.SceneSpec(objects=(disk,)))
        assert scene.mask.mean() == pytest.approx(math.pi / 4, rel=0.02)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_contract(self, seed):
        scene = D.gen_scene(seed)
        assert scene.image.shape == (3, 64, 64) and scene.mask.shape == (1, 64, 64)
        assert set(np.unique(scene.mask)) <= {0.0, 1.0}
        assert 0.02 <= scene.mask.mean() <= 0.6
        assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0
        assert 1 <= scene.n_objects <= 3

    def test_mask_is_union_of_objects(self):
        scene = D.gen_scene(5, D.SceneSpec(n_objects=3))
        union = np.zeros((64, 64), bool)
        for obj in scene.objects:
            union |= D.rasterize(obj, 64, 64)
        np.testing.assert_array_equal(scene.mask[0].astype(bool), union)

    def test_dataset_pure_function(self):
        a = D.gen_dataset(4, 9)
        b = D.gen_dataset(4, 9)
        assert [s.seed for s in a] == [s.seed for s in b]
        assert len({s.seed for s in a}) == 4
        assert D.gen_dataset(0, 9) == []

    @pytest.mark.parametrize("kwargs", [dict(height=16), dict(n_objects=5), dict(max_size=0.6),
                                        dict(shapes=("hexagon",))])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ConfigError):
            D.SceneSpec(**kwargs)

    def test_placement_failure(self):
        spec = D.SceneSpec(n_objects=4, min_size=0.45, max_size=0.49, fg_range=(0.02, 0.05), max_retries=3)
        with pytest.raises(ConfigError, match="3 attempts"):
            D.gen_scene(0, spec)


class TestPnm:
    def test_white_pixel_bytes(self, tmp_path):
        D.write_pnm(tmp_path / "w.ppm", np.ones((3, 1, 1)))
        assert (tmp_path / "w.ppm").read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_mask_round_trip_exact(self, tmp_path, rng):
        m = (rng.uniform(size=(1, 9, 7)) < 0.5).astype(float)
        D.write_pnm(tmp_path / "m.pgm", m)
        np.testing.assert_array_equal(D.read_pnm(tmp_path / "m.pgm"), m)

    def test_image_round_trip_bound(self, tmp_path, rng):
        img = rng.uniform(size=(3, 11, 13))
        D.write_pnm(tmp_path / "i.ppm", img)
        assert np.abs(D.read_pnm(tmp_path / "i.ppm") - img).max() <= 1 / 510 + 1e-15

    def test_comments_and_whitespace(self):
        buf = b"P5 # gray\n2\t1\n# max\n255\n\x00\xff"
        np.testing.assert_array_equal(D.parse_pnm(buf), [[[0.0, 1.0]]])

    @pytest.mark.parametrize("buf,offset", [
        (b"P3\n1 1\n255\n\x00", 0),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"P5\n2 2\n255\n\x00", 12),
        (b"P5\nx 1\n255\n\x00", 3),
    ])
    def test_errors_carry_offsets(self, buf, offset):
        with pytest.raises(PnmError) as info:
            D.parse_pnm(buf)
        assert info.value.offset == offset
        assert f"byte {offset}" in str(info.value)


class TestDirectories:
    def test_write_and_load(self, tmp_path):
        scenes = D.gen_dataset(3, 1)
        D.write_scenes(tmp_path, scenes)
        rows = list(csv.reader(open(tmp_path / "manifest.csv")))
        assert rows[0] == ["id", "seed", "objects"] and len(rows) == 4
        samples = D.load_dir(tmp_path)
        assert [s.ident for s in samples] == ["0000", "0001", "0002"]
        np.testing.assert_array_equal(samples[1].mask, scenes[1].mask)

    def test_unmatched_pair(self, tmp_path):
        D.write_scenes(tmp_path, D.gen_dataset(2, 1))
        (tmp_path / "msk_0001.pgm").unlink()
        with pytest.raises(DataError, match="0001"):
            D.load_dir(tmp_path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            D.load_dir(tmp_path / "nope")
