"""Synthetic scene generation: colored shapes on a gray canvas, with
bounding boxes and templated reference captions.

Everything is a pure function of (seed, config); repeated runs are
bit-identical. Scenes derive per-id sub-seeds from the master seed, so
generation is embarrassingly parallel across scene ids.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppm
from .rng import named_rng

SHAPES = ("circle", "square", "triangle", "bar", "cross")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
}
BACKGROUND = (128, 128, 128)

RELATION_WORDS = ("next", "to", "above", "below", "left", "of")
FILLER_WORDS = ("a", "there", "is", "and")


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # x, y, w, h in canvas pixels

    @property
    def category(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def area(self) -> int:
        return self.bbox[2] * self.bbox[3]

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + (w - 1) / 2.0, y + (h - 1) / 2.0)


@dataclass(frozen=True)
class SceneSpec:
    id: int
    canvas: tuple[int, int]  # (W, H)
    objects: tuple[ObjectSpec, ...]  # descending bbox area
    seed: int


@dataclass
class GenConfig:
    canvas: tuple[int, int] = (56, 56)
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 26
    area_gap: float = 1.4  # min bbox-area ratio between successive objects
    max_attempts: int = 400


@dataclass
class ManifestRecord:
    id: int
    image: str  # path relative to the manifest file
    boxes: list[dict]
    captions: list[list[str]]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"
    seed: int = 0
    root: Path = field(default_factory=Path)


def _overlap_area(a, b) -> int:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ox = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    oy = max(0, min(ay + ah, by + bh) - max(ay, by))
    return ox * oy


def _sample_box(rng, shape: str, cfg: GenConfig):
    W, H = cfg.canvas
    lo, hi = cfg.min_size, min(cfg.max_size, W, H)
    if shape in ("circle", "square"):
        s = int(rng.integers(lo, hi + 1))
        w = h = s
    elif shape == "bar":
        w = int(rng.integers(min(hi, int(1.6 * lo) + 1), hi + 1))
        h = int(rng.integers(lo, max(lo, int(w / 1.6)) + 1))
    else:
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, W - w + 1))
    y = int(rng.integers(0, H - h + 1))
    return (x, y, w, h)


def generate_scene(seed: int, config: GenConfig | None = None, scene_id: int = 0) -> SceneSpec:
    """Deterministic scene from (seed, config); raises SceneGenerationError
    if the placement constraints cannot be met within the attempt budget."""
    cfg = config or GenConfig()
    rng = named_rng(seed, "scene-layout", scene_id)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    # distinct shapes and distinct colors keep categories unambiguous and
    # leave room for the area-gap ordering below
    shape_ids = rng.choice(len(SHAPES), size=n, replace=False)
    color_ids = rng.choice(len(COLORS), size=n, replace=False)
    for _ in range(cfg.max_attempts):
        objects = []
        ok = True
        for si, ci in zip(shape_ids, color_ids):
            shape = SHAPES[int(si)]
            color = list(COLORS)[int(ci)]
            placed = False
            for _ in range(cfg.max_attempts):
                bbox = _sample_box(rng, shape, cfg)
                if all(_overlap_area(bbox, o.bbox) < 0.2 * min(bbox[2] * bbox[3], o.area)
                       for o in objects):
                    objects.append(ObjectSpec(shape=shape, color=color, bbox=bbox))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            objects.sort(key=lambda o: (-o.area, o.bbox))
            # keep "largest" visually unambiguous: successive bbox areas
            # must differ by at least the configured ratio
            if all(objects[i].area >= cfg.area_gap * objects[i + 1].area
                   for i in range(len(objects) - 1)):
                return SceneSpec(id=scene_id, canvas=cfg.canvas,
                                 objects=tuple(objects), seed=seed)
    raise SceneGenerationError(f"could not place objects for seed={seed} scene_id={scene_id}")


def _rasterize(obj: ObjectSpec, canvas: np.ndarray):
    x, y, w, h = obj.bbox
    color = COLORS[obj.color]
    ys, xs = np.mgrid[y:y + h, x:x + w]
    cx = x + (w - 1) / 2.0
    cy = y + (h - 1) / 2.0
    if obj.shape == "bar":
        # a thin background groove along the midline gives the bar a
        # striped local texture that no other shape has
        g = max(2, h // 5)
        inside = np.abs(ys - cy) >= (g + 1) / 2.0
    elif obj.shape == "square":
        # drawn as a frame so its local texture differs from the solid bar
        t = max(2, w // 4)
        inside = ((xs - x < t) | (x + w - xs <= t)
                  | (ys - y < t) | (y + h - ys <= t))
    elif obj.shape == "circle":
        r = (min(w, h) - 1) / 2.0
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r + 1e-9
    elif obj.shape == "triangle":
        v = (ys - y) / max(h - 1, 1)
        inside = np.abs(xs - cx) <= v * (w - 1) / 2.0 + 0.5
    elif obj.shape == "cross":
        tw = max(1, w // 3)
        th = max(1, h // 3)
        vert = np.abs(xs - cx) <= (tw - 1) / 2.0 + 0.25
        horiz = np.abs(ys - cy) <= (th - 1) / 2.0 + 0.25
        inside = vert | horiz
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    canvas[y:y + h, x:x + w][inside] = color


def render_scene(scene: SceneSpec) -> np.ndarray:
    """(H, W, 3) uint8 image, gray background, hard edges."""
    W, H = scene.canvas
    canvas = np.empty((H, W, 3), dtype=np.uint8)
    canvas[...] = BACKGROUND
    for obj in scene.objects:
        _rasterize(obj, canvas)
    return canvas


def relation_word(a: ObjectSpec, b: ObjectSpec) -> list[str]:
    """Relation of a's center to b's center, as caption tokens."""
    ax, ay = a.center
    bx, by = b.center
    dx, dy = ax - bx, ay - by
    if abs(dy) > abs(dx):
        return ["above"] if dy < 0 else ["below"]
    if dx < 0:
        return ["left", "of"]
    return ["next", "to"]


def generate_captions(scene: SceneSpec, seed: int) -> list[list[str]]:
    """2-5 template captions. The largest object is always mentioned;
    each further object appears with probability 0.5 per caption."""
    if not scene.objects:
        raise ValueError("scene has no objects")
    rng = named_rng(seed, "captions", scene.id)
    n_caps = int(rng.integers(2, 6))
    # the first caption always names the largest object plainly; the rest
    # are sampled from the template pool
    captions = [["a"] + scene.objects[0].category.split()]
    for _ in range(n_caps - 1):
        mentioned = [scene.objects[0]]
        for obj in scene.objects[1:]:
            if rng.random() < 0.5:
                mentioned.append(obj)
        first = mentioned[0]
        if len(mentioned) == 1:
            if rng.random() < 0.5:
                tokens = ["a"] + first.category.split()
            else:
                tokens = ["there", "is", "a"] + first.category.split()
        else:
            second = mentioned[1]
            if rng.random() < 0.5:
                rel = relation_word(first, second)
            else:
                rel = ["and"]
            tokens = (["a"] + first.category.split() + rel
                      + ["a"] + second.category.split())
            for obj in mentioned[2:]:
                tokens += ["and", "a"] + obj.category.split()
        captions.append(tokens)
    return captions


def generator_tokens() -> list[str]:
    """Every non-special token the caption generator can emit."""
    toks = set(FILLER_WORDS) | set(RELATION_WORDS) | set(COLORS) | set(SHAPES)
    return sorted(toks)


def write_dataset(scenes, out_dir, split: str = "train", seed: int = 0) -> DatasetManifest:
    """Render scenes to PPM files and write manifest.jsonl (one record
    per line) plus manifest.meta.json carrying the split tag and seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
        for scene in scenes:
            image_name = f"scene_{scene.id:06d}.ppm"
            ppm.write_ppm(out / image_name, render_scene(scene))
            boxes = [{"x": o.bbox[0], "y": o.bbox[1], "w": o.bbox[2], "h": o.bbox[3],
                      "category": o.category} for o in scene.objects]
            captions = generate_captions(scene, seed)
            rec = ManifestRecord(id=scene.id, image=image_name, boxes=boxes, captions=captions)
            records.append(rec)
            f.write(json.dumps({"id": rec.id, "image": rec.image, "boxes": rec.boxes,
                                "captions": rec.captions}) + "\n")
    with open(out / "manifest.meta.json", "w", encoding="utf-8") as f:
        json.dump({"split": split, "seed": seed}, f)
        f.write("\n")
    return DatasetManifest(records=records, split=split, seed=seed, root=out)


def read_manifest(manifest_path) -> DatasetManifest:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            rec = ManifestRecord(id=d["id"], image=d["image"], boxes=d["boxes"],
                                 captions=[list(c) for c in d["captions"]])
            img_path = path.parent / rec.image
            if not img_path.exists():
                raise FileNotFoundError(f"manifest references missing image {img_path}")
            records.append(rec)
    split, seed = "train", 0
    meta_path = path.parent / "manifest.meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        split, seed = meta.get("split", split), meta.get("seed", seed)
    return DatasetManifest(records=records, split=split, seed=seed, root=path.parent)


def generate_dataset(n_scenes: int, seed: int, config: GenConfig | None = None) -> list[SceneSpec]:
    return [generate_scene(seed, config, scene_id=i) for i in range(n_scenes)]
