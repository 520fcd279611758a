import hashlib
import json

import numpy as np
import pytest

from attnforge import ppm, scenegen
from attnforge.scenegen import GenConfig, ObjectSpec, SceneSpec


def overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return max(0, min(ax + aw, bx + bw) - max(ax, bx)) * \
        max(0, min(ay + ah, by + bh) - max(ay, by))


class TestGenerateScene:
    def test_single_object_forced(self):
        cfg = GenConfig(min_objects=1, max_objects=1)
        scene = scenegen.generate_scene(1, cfg)
        assert len(scene.objects) == 1
        x, y, w, h = scene.objects[0].bbox
        assert 0 <= x and 0 <= y and x + w <= 56 and y + h <= 56
        assert w >= 6 and h >= 6

    def test_deterministic(self):
        assert scenegen.generate_scene(7) == scenegen.generate_scene(7)

    def test_different_seeds_differ(self):
        assert scenegen.generate_scene(7) != scenegen.generate_scene(8)

    @pytest.mark.parametrize("seed", range(20))
    def test_invariants(self, seed):
        scene = scenegen.generate_scene(seed)
        assert 1 <= len(scene.objects) <= 3
        areas = [o.area for o in scene.objects]
        assert areas == sorted(areas, reverse=True)
        cats = [o.category for o in scene.objects]
        assert len(set(cats)) == len(cats)
        for i, a in enumerate(scene.objects):
            for b in scene.objects[i + 1:]:
                assert overlap(a.bbox, b.bbox) < 0.2 * min(a.area, b.area)

    def test_unsatisfiable_reports_seed(self):
        cfg = GenConfig(canvas=(12, 12), min_objects=3, max_objects=3,
                        min_size=10, max_size=12, max_attempts=5)
        with pytest.raises(scenegen.SceneGenerationError, match="seed=123"):
            scenegen.generate_scene(123, cfg)


class TestRenderScene:
    def test_empty_scene_all_gray(self):
        scene = SceneSpec(id=0, canvas=(56, 56), objects=(), seed=0)
        img = scenegen.render_scene(scene)
        assert np.all(img == 128)

    def test_circle_center_pixel(self):
        obj = ObjectSpec(shape="circle", color="red", bbox=(10, 10, 20, 20))
        scene = SceneSpec(id=0, canvas=(56, 56), objects=(obj,), seed=0)
        img = scenegen.render_scene(scene)
        assert tuple(img[20, 20]) == (255, 0, 0)
        assert tuple(img[2, 2]) == (128, 128, 128)

    @pytest.mark.parametrize("seed", range(12))
    def test_no_color_outside_bboxes(self, seed):
        scene = scenegen.generate_scene(seed)
        img = scenegen.render_scene(scene)
        outside = np.ones(img.shape[:2], dtype=bool)
        for o in scene.objects:
            x, y, w, h = o.bbox
            outside[y:y + h, x:x + w] = False
        assert np.all(img[outside] == 128)

    @pytest.mark.parametrize("shape", scenegen.SHAPES)
    def test_every_shape_draws_pixels(self, shape):
        obj = ObjectSpec(shape=shape, color="blue", bbox=(8, 8, 24, 12) if shape == "bar"
                         else (8, 8, 16, 16))
        scene = SceneSpec(id=0, canvas=(56, 56), objects=(obj,), seed=0)
        img = scenegen.render_scene(scene)
        assert np.any(np.all(img == (0, 0, 255), axis=-1))

    def test_deterministic(self):
        scene = scenegen.generate_scene(5)
        np.testing.assert_array_equal(scenegen.render_scene(scene),
                                      scenegen.render_scene(scene))


class TestGenerateCaptions:
    def test_single_object_template(self):
        cfg = GenConfig(min_objects=1, max_objects=1)
        scene = scenegen.generate_scene(3, cfg)
        caps = scenegen.generate_captions(scene, 3)
        assert 2 <= len(caps) <= 5
        cat = scene.objects[0].category
        assert any(" ".join(c).endswith(cat) for c in caps)

    @pytest.mark.parametrize("seed", range(15))
    def test_largest_always_mentioned(self, seed):
        scene = scenegen.generate_scene(seed)
        cat = scene.objects[0].category.split()
        for cap in scenegen.generate_captions(scene, seed):
            joined = " ".join(cap)
            assert scene.objects[0].category in joined, (cat, cap)

    def test_relation_word_left_of(self):
        circle = ObjectSpec(shape="circle", color="red", bbox=(2, 20, 12, 12))
        square = ObjectSpec(shape="square", color="blue", bbox=(36, 20, 12, 12))
        assert scenegen.relation_word(circle, square) == ["left", "of"]

    def test_relation_word_above_below(self):
        top = ObjectSpec(shape="circle", color="red", bbox=(20, 2, 12, 12))
        bottom = ObjectSpec(shape="square", color="blue", bbox=(20, 36, 12, 12))
        assert scenegen.relation_word(top, bottom) == ["above"]
        assert scenegen.relation_word(bottom, top) == ["below"]

    @pytest.mark.parametrize("seed", range(15))
    def test_all_tokens_in_generator_vocabulary(self, seed):
        vocab = set(scenegen.generator_tokens())
        scene = scenegen.generate_scene(seed)
        for cap in scenegen.generate_captions(scene, seed):
            assert set(cap) <= vocab
            assert len(cap) <= 16


class TestWriteDataset:
    def test_counts_and_round_trip(self, tmp_path):
        scenes = scenegen.generate_dataset(10, 4)
        manifest = scenegen.write_dataset(scenes, tmp_path / "d", split="eval", seed=4)
        assert len(manifest.records) == 10
        assert len(list((tmp_path / "d").glob("*.ppm"))) == 10
        back = scenegen.read_manifest(tmp_path / "d")
        assert back.records == manifest.records
        assert back.split == "eval"
        assert back.seed == 4

    def test_byte_identical_rewrites(self, tmp_path):
        scenes = scenegen.generate_dataset(5, 9)
        h = []
        for sub in ("a", "b"):
            scenegen.write_dataset(scenes, tmp_path / sub, seed=9)
            h.append(hashlib.sha256((tmp_path / sub / "manifest.jsonl").read_bytes()).hexdigest())
        assert h[0] == h[1]

    def test_manifest_line_schema(self, tmp_path):
        scenes = scenegen.generate_dataset(3, 2)
        scenegen.write_dataset(scenes, tmp_path / "d", seed=2)
        with open(tmp_path / "d" / "manifest.jsonl") as f:
            for line in f:
                d = json.loads(line)
                assert set(d) == {"id", "image", "boxes", "captions"}
                for b in d["boxes"]:
                    assert set(b) == {"x", "y", "w", "h", "category"}

    def test_images_match_declared_canvas(self, tmp_path):
        scenes = scenegen.generate_dataset(3, 8)
        manifest = scenegen.write_dataset(scenes, tmp_path / "d", seed=8)
        for rec in manifest.records:
            img = ppm.read_ppm(tmp_path / "d" / rec.image)
            assert img.shape == (56, 56, 3)

    def test_missing_image_detected(self, tmp_path):
        scenes = scenegen.generate_dataset(2, 1)
        scenegen.write_dataset(scenes, tmp_path / "d", seed=1)
        (tmp_path / "d" / "scene_000001.ppm").unlink()
        with pytest.raises(FileNotFoundError):
            scenegen.read_manifest(tmp_path / "d")


class TestDistinctAvailability:
    def test_distinct_subset_share(self):
        # over >= 500 scenes, >= 20% must have an object whose category is
        # missing from at least one reference caption
        n = 500
        hits = 0
        for sid in range(n):
            scene = scenegen.generate_scene(42, scene_id=sid)
            caps = [" ".join(c) for c in scenegen.generate_captions(scene, 42)]
            for obj in scene.objects:
                if any(obj.category not in c for c in caps):
                    hits += 1
                    break
        assert hits / n >= 0.20


class TestPpmIo:
    def test_round_trip(self, tmp_path):
        img = scenegen.render_scene(scenegen.generate_scene(0))
        ppm.write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(ppm.read_ppm(tmp_path / "x.ppm"), img)

    def test_pgm_round_trip(self, tmp_path):
        gray = np.arange(64, dtype=np.uint8).reshape(8, 8)
        ppm.write_pgm(tmp_path / "x.pgm", gray)
        np.testing.assert_array_equal(ppm.read_pgm(tmp_path / "x.pgm"), gray)

    def test_truncated_rejected(self, tmp_path):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        ppm.write_ppm(tmp_path / "x.ppm", img)
        data = (tmp_path / "x.ppm").read_bytes()
        (tmp_path / "x.ppm").write_bytes(data[:-5])
        with pytest.raises(ValueError, match="truncated"):
            ppm.read_ppm(tmp_path / "x.ppm")

    def test_wrong_magic_rejected(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\0" * 4)
        with pytest.raises(ValueError):
            ppm.read_ppm(tmp_path / "x.ppm")
