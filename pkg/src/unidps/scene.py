"""Synthetic scenes: panoptic + planar-depth ground truth, and on-disk format.

A scene is a stack of horizontal "stuff" bands overlaid with rectangle /
ellipse "thing" instances.  Every segment carries a planar depth field
``d(u, v) = a + b*u + c*v`` (u = column, v = row) clipped to [1, D_MAX];
the visible owner of each pixel is the overlapping segment with the
smallest depth there (z-buffering).  Images are per-category base color,
shaded by depth, plus Gaussian noise.

On disk, a scene directory holds ``image.ppm`` (P6, 8-bit),
``panoptic.png`` (16-bit grayscale, id = category_id*1000 + instance,
0 = void), ``depth.png`` (16-bit grayscale, meters*256, 0 = invalid) and
``meta.json``.  A dataset directory holds scene directories plus
``manifest.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import make_rng

D_MAX = 80.0

# category table: 4 stuff bands + 2 thing shapes
STUFF_CATEGORIES = (1, 2, 3, 4)
THING_CATEGORIES = (5, 6)  # 5 = rectangle, 6 = ellipse
ALL_CATEGORIES = STUFF_CATEGORIES + THING_CATEGORIES
NUM_CLASSES = len(ALL_CATEGORIES)

_PALETTE = {
    1: (0.55, 0.35, 0.20),
    2: (0.25, 0.55, 0.25),
    3: (0.30, 0.40, 0.70),
    4: (0.60, 0.60, 0.30),
    5: (0.75, 0.25, 0.25),
    6: (0.35, 0.70, 0.70),
}

ANNOTATION_MODES = ("full", "panoptic_only", "depth_only")


def is_thing(category_id: int) -> bool:
    return category_id in THING_CATEGORIES


def segment_id(category_id: int, instance: int) -> int:
    return category_id * 1000 + instance


class SceneConfigError(ValueError):
    """Raised for out-of-range generation parameters."""


class SceneFormatError(ValueError):
    """Raised when an on-disk scene file is malformed."""


@dataclass
class PanopticMap:
    height: int
    width: int
    id_map: np.ndarray                       # [H, W] int32, 0 = void
    segments: list[tuple[int, int, bool]]    # (segment_id, category_id, is_thing)

    def categories(self) -> dict[int, int]:
        return {sid: cat for sid, cat, _ in self.segments}


@dataclass
class DepthMap:
    height: int
    width: int
    depth_m: np.ndarray   # [H, W] float64, meters
    valid: np.ndarray     # [H, W] bool


@dataclass
class Scene:
    image: np.ndarray     # [3, H, W] float64 in [0, 1]
    panoptic_gt: PanopticMap
    depth_gt: DepthMap
    annotation_mode: str = "full"

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class FeaturePyramid:
    """Channels-first feature levels at 1/8, 1/16, 1/32 plus a 1/4 embedding."""
    levels: list[np.ndarray]      # [C, H/8, W/8], [C, H/16, W/16], [C, H/32, W/32]
    embedding: np.ndarray         # [C_e, H/4, W/4]


@dataclass
class SceneSpec:
    """Generation parameters for one scene."""
    height: int = 64
    width: int = 128
    things: int = 3
    stuff: int = 2
    sparsity: float = 1.0
    noise_sigma: float = 0.02
    annotation_mode: str = "full"

    def validate(self) -> None:
        if self.height % 32 or self.width % 32:
            raise SceneConfigError(
                f"height and width must be divisible by 32, got {self.height}x{self.width}")
        if not 0 <= self.things <= 8:
            raise SceneConfigError(f"things must be in [0, 8], got {self.things}")
        if not 1 <= self.stuff <= 4:
            raise SceneConfigError(f"stuff must be in [1, 4], got {self.stuff}")
        if not 0.0 < self.sparsity <= 1.0:
            raise SceneConfigError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.annotation_mode not in ANNOTATION_MODES:
            raise SceneConfigError(f"unknown annotation_mode {self.annotation_mode!r}")


def _plane(h: int, w: int, a: float, bu: float, cv: float) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w].astype(float)
    return np.clip(a + bu * u + cv * v, 1.0, D_MAX)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """Deterministic synthetic scene for (spec, rng state)."""
    spec.validate()
    h, w = spec.height, spec.width

    # stuff bands: distinct categories, random cut rows
    stuff_cats = [int(c) for c in rng.permutation(STUFF_CATEGORIES)[:spec.stuff]]
    cuts = sorted(int(c) for c in rng.choice(np.arange(1, h), size=spec.stuff - 1,
                                             replace=False)) if spec.stuff > 1 else []
    bounds = [0] + cuts + [h]

    owner = np.zeros((h, w), dtype=np.int32)
    zbuf = np.empty((h, w), dtype=float)
    seg_meta: dict[int, tuple[int, bool]] = {}
    for i, cat in enumerate(stuff_cats):
        sid = segment_id(cat, 0)
        seg_meta[sid] = (cat, False)
        rows = slice(bounds[i], bounds[i + 1])
        a = rng.uniform(25.0, 70.0)
        bu = rng.uniform(-0.08, 0.08)
        cv = rng.uniform(-0.08, 0.08)
        plane = _plane(h, w, a, bu, cv)
        owner[rows] = sid
        zbuf[rows] = plane[rows]

    # things: rectangles (cat 5) and ellipses (cat 6), z-buffered per pixel
    instance_counter = {c: 0 for c in THING_CATEGORIES}
    v, u = np.mgrid[0:h, 0:w].astype(float)
    for _ in range(spec.things):
        cat = int(rng.choice(THING_CATEGORIES))
        instance_counter[cat] += 1
        sid = segment_id(cat, instance_counter[cat])
        seg_meta[sid] = (cat, True)
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        ry = rng.uniform(h / 10, h / 4)
        rx = rng.uniform(w / 16, w / 5)
        if cat == 5:
            cover = (np.abs(v - cy) <= ry) & (np.abs(u - cx) <= rx)
        else:
            cover = ((v - cy) / ry) ** 2 + ((u - cx) / rx) ** 2 <= 1.0
        a = rng.uniform(3.0, 30.0)
        bu = rng.uniform(-0.05, 0.05)
        cv_ = rng.uniform(-0.05, 0.05)
        plane = _plane(h, w, a, bu, cv_)
        win = cover & (plane < zbuf)
        owner[win] = sid
        zbuf[win] = plane[win]

    # drop fully occluded segments
    visible = set(np.unique(owner).tolist())
    segments = [(sid, cat, thing) for sid, (cat, thing) in sorted(seg_meta.items())
                if sid in visible]

    # depth: quantize to the on-disk resolution so round trips are exact
    depth = np.round(zbuf * 256.0) / 256.0
    valid = rng.random((h, w)) < spec.sparsity

    # image: per-category base color, depth shading, noise; quantized to 8 bit
    img = np.empty((3, h, w))
    shade = 1.0 - 0.6 * (zbuf / D_MAX)
    cat_map = np.zeros((h, w), dtype=np.int32)
    for sid, cat, _ in segments:
        cat_map[owner == sid] = cat
    for ch in range(3):
        base = np.zeros((h, w))
        for cat in ALL_CATEGORIES:
            base[cat_map == cat] = _PALETTE[cat][ch]
        img[ch] = base * shade
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    return Scene(
        image=img,
        panoptic_gt=PanopticMap(h, w, owner, segments),
        depth_gt=DepthMap(h, w, depth, valid),
        annotation_mode=spec.annotation_mode,
    )


def scene_rng(base_seed: int, scene_index: int) -> np.random.Generator:
    """Independent per-scene stream: seed = base_seed + scene_index."""
    return make_rng(base_seed + scene_index)


# ---------------------------------------------------------------------------
# on-disk format


def _write_ppm(path: Path, image: np.ndarray) -> None:
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = u8.shape[1], u8.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.moveaxis(u8, 0, 2).tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    try:
        fields: list[bytes] = []
        pos = 0
        while len(fields) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while not data[end:end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
        pos += 1
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P6" or maxval != 255:
            raise ValueError("not an 8-bit P6 file")
        raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    except (ValueError, IndexError) as e:
        raise SceneFormatError(f"{path}: bad PPM header ({e})") from e
    return np.moveaxis(raw.reshape(h, w, 3), 2, 0).astype(float) / 255.0


def write_png16(path: Path, values: np.ndarray) -> None:
    Image.fromarray(values.astype(np.uint16), mode="I;16").save(path)


def read_png16(path: Path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.dtype not in (np.uint16, np.int32):
        raise SceneFormatError(f"{path}: expected 16-bit grayscale, got {arr.dtype}")
    return arr.astype(np.uint16)


def encode_depth(depth: DepthMap) -> np.ndarray:
    enc = np.round(depth.depth_m * 256.0)
    enc[~depth.valid] = 0
    return np.clip(enc, 0, 65535).astype(np.uint16)


def decode_depth(enc: np.ndarray) -> DepthMap:
    valid = enc > 0
    return DepthMap(enc.shape[0], enc.shape[1], enc.astype(float) / 256.0, valid)


def write_scene(scene: Scene, scene_dir: Path) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    _write_ppm(scene_dir / "image.ppm", scene.image)
    write_png16(scene_dir / "panoptic.png", scene.panoptic_gt.id_map.astype(np.uint16))
    write_png16(scene_dir / "depth.png", encode_depth(scene.depth_gt))
    meta = {
        "annotation_mode": scene.annotation_mode,
        "segments": [
            {"id": sid, "category_id": cat, "is_thing": thing}
            for sid, cat, thing in scene.panoptic_gt.segments
        ],
    }
    (scene_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_scene(scene_dir: Path) -> Scene:
    scene_dir = Path(scene_dir)
    try:
        meta = json.loads((scene_dir / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneFormatError(f"{scene_dir}/meta.json: {e}") from e
    for key in ("annotation_mode", "segments"):
        if key not in meta:
            raise SceneFormatError(f"{scene_dir}/meta.json: missing field {key!r}")
    image = _read_ppm(scene_dir / "image.ppm")
    ids = read_png16(scene_dir / "panoptic.png").astype(np.int32)
    depth = decode_depth(read_png16(scene_dir / "depth.png"))
    segments = []
    for seg in meta["segments"]:
        try:
            segments.append((int(seg["id"]), int(seg["category_id"]), bool(seg["is_thing"])))
        except KeyError as e:
            raise SceneFormatError(f"{scene_dir}/meta.json: segment missing {e}") from e
    h, w = ids.shape
    pan = PanopticMap(h, w, ids, segments)
    listed = {sid for sid, _, _ in segments}
    present = set(np.unique(ids).tolist()) - {0}
    if not present <= listed:
        raise SceneFormatError(
            f"{scene_dir}: id_map ids {sorted(present - listed)} missing from segments")
    return Scene(image, pan, depth, meta["annotation_mode"])


def write_dataset(scenes: list[Scene], out_dir: Path, config_echo: dict, seed: int) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"scene_{i:04d}" for i in range(len(scenes))]
    for name, scene in zip(names, scenes):
        write_scene(scene, out_dir / name)
    manifest = {"scenes": names, "config": config_echo, "seed": seed}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(dataset_dir: Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneFormatError(f"{path}: {e}") from e
    if "scenes" not in manifest:
        raise SceneFormatError(f"{path}: missing field 'scenes'")
    return manifest


def read_dataset(dataset_dir: Path) -> list[Scene]:
    manifest = read_manifest(dataset_dir)
    return [read_scene(Path(dataset_dir) / name) for name in manifest["scenes"]]
