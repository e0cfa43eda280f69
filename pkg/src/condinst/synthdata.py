"""Synthetic scenes of overlapping shapes with amodal/visible masks and panoptic labels.

Pixel ``(x, y)`` has its centre at the integer point ``(x, y)``; a pixel is
foreground iff that point lies inside the analytic shape (boundary inclusive).
Boxes are pixel-extent boxes ``(min_x - .5, min_y - .5, max_x + .5, max_y + .5)``.

On disk a dataset is a directory with ``manifest.json`` and one
``scene_<k>/`` folder per scene holding ``image.png`` (8-bit RGB),
``inst_<i>.png`` (8-bit amodal mask, 0/255), ``panoptic.png`` (16-bit segment
ids) and ``annot.json``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
RNG_ALGORITHM = "numpy PCG64 seeded with SeedSequence([seed, scene_index])"
SHAPE_KINDS = ("ellipse", "rectangle", "triangle")
MIN_VISIBLE_AREA = 16
STUFF_PALETTE = np.array([[0.12, 0.14, 0.22], [0.26, 0.20, 0.10], [0.10, 0.24, 0.14], [0.22, 0.10, 0.20]])
STUFF_ID_BASE = 1000


class DatasetError(Exception):
    """Raised when a dataset directory is missing files or holds corrupt data."""

    def __init__(self, message: str, scene_id: int | None = None, path: str | Path | None = None):
        self.scene_id = scene_id
        self.path = str(path) if path is not None else None
        where = []
        if scene_id is not None:
            where.append(f"scene {scene_id}")
        if path is not None:
            where.append(f"file {path}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class DatasetConfig:
    num_scenes: int = 200
    image_size: int = 64
    min_instances: int = 1
    max_instances: int = 5
    num_thing_classes: int = 3
    num_stuff_classes: int = 2
    occlusion_prob: float = 0.5
    pair_prob: float = 0.5
    seed: int = 0
    noise: float = 0.02

    def __post_init__(self):
        if min(self.num_scenes + 1, self.image_size, self.min_instances,
               self.num_thing_classes, self.num_stuff_classes) <= 0:
            raise ValueError("dataset counts must be positive")
        if self.max_instances < self.min_instances:
            raise ValueError("max_instances must be >= min_instances")
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.num_stuff_classes > len(STUFF_PALETTE):
            raise ValueError(f"at most {len(STUFF_PALETTE)} stuff classes are supported")
        for name in ("occlusion_prob", "pair_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ShapeInstance:
    class_id: int
    shape_kind: str
    center: tuple[float, float]
    extent: tuple[float, float]  # half-width, half-height before rotation
    rotation: float = 0.0
    z_order: int = 0
    fill: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class InstanceAnnotation:
    class_id: int
    mask: np.ndarray  # amodal, bool (H, W)
    visible: np.ndarray  # bool (H, W)
    box: tuple[float, float, float, float]
    z_order: int
    shape: ShapeInstance | None = None

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SceneAnnotation:
    scene_id: int
    image: np.ndarray  # uint8 (H, W, 3)
    instances: list[InstanceAnnotation]
    panoptic: np.ndarray  # uint16 segment ids (H, W)
    segments: dict[int, tuple[int, int]]  # id -> (category, instance index or -1)
    stuff_map: np.ndarray  # int (H, W), stuff class 0..S-1 of the background layout
    stuff_layout: dict = field(default_factory=dict)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    num_thing_classes: int = 3
    flags: list[str] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def image_tensor(self) -> np.ndarray:
        """Image as float64 (3, H, W) in [0, 1]."""
        return self.image.astype(np.float64).transpose(2, 0, 1) / 255.0

    def semantic_labels(self) -> np.ndarray:
        """Per-pixel category index ``category - 1`` (things first, then stuff)."""
        lab = self.num_thing_classes + self.stuff_map
        for inst in self.instances:
            lab = np.where(inst.visible, inst.class_id - 1, lab)
        return lab.astype(np.int64)


# ---------------------------------------------------------------------------
# rasterisation


def rasterize(shape: ShapeInstance, image_size: int | tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Binary mask of ``shape``; returns ``(mask, degenerate)``."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    rx, ry = shape.extent
    if rx <= 0 or ry <= 0:
        return np.zeros((h, w), dtype=bool), True
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - shape.center[0], ys - shape.center[1]
    c, s = math.cos(shape.rotation), math.sin(shape.rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    eps = 1e-9
    if shape.shape_kind == "ellipse":
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0 + eps
    elif shape.shape_kind == "rectangle":
        mask = (np.abs(u) <= rx + eps) & (np.abs(v) <= ry + eps)
    elif shape.shape_kind == "triangle":
        verts = [(0.0, -ry), (rx, ry), (-rx, ry)]
        mask = np.ones((h, w), dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            # clockwise in image coordinates: interior is on the non-negative side
            mask &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= -eps
    else:
        raise ValueError(f"unknown shape kind {shape.shape_kind!r}")
    return mask, not mask.any()


def mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no box")
    return (xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5)


def stuff_map_from_layout(layout: dict, size: int) -> np.ndarray:
    coord = np.arange(size)
    grid = np.broadcast_to(coord[None, :] if layout["axis"] == "x" else coord[:, None], (size, size))
    labels = np.searchsorted(np.asarray(layout["cuts"]), grid, side="right")
    return np.asarray(layout["order"])[labels].astype(np.int64)


def visible_masks(masks: list[np.ndarray], z_orders: list[int]) -> list[np.ndarray]:
    out = []
    for i, m in enumerate(masks):
        above = np.zeros_like(m)
        for j, n in enumerate(masks):
            if z_orders[j] > z_orders[i]:
                above |= n
        out.append(m & ~above)
    return out


# ---------------------------------------------------------------------------
# scene generation


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _random_shape(rng, cfg: DatasetConfig, class_id: int, center=None, extent=None) -> ShapeInstance:
    n = cfg.image_size
    if extent is None:
        r = rng.uniform(0.10, 0.26) * n
        extent = (r * rng.uniform(0.75, 1.0), r * rng.uniform(0.75, 1.0))
    if center is None:
        center = tuple(rng.uniform(0.15 * n, 0.85 * n, size=2))
    return ShapeInstance(
        class_id=class_id,
        shape_kind=SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)],
        center=(float(center[0]), float(center[1])),
        extent=(float(extent[0]), float(extent[1])),
        rotation=float(rng.uniform(0, math.pi)),
    )


def _fill(rng, class_id: int) -> tuple[float, float, float]:
    """Bright colour whose dominant channel encodes the class, jittered per instance."""
    while True:
        c = rng.uniform(0.25, 0.55, size=3)
        c[(class_id - 1) % 3] = rng.uniform(0.8, 1.0)
        if np.min(np.abs(STUFF_PALETTE - c).sum(axis=1)) > 0.6:
            return tuple(float(v) for v in c)


def _near(rng, anchor: ShapeInstance, radius: float, lo: float, hi: float) -> tuple[float, float]:
    ang = rng.uniform(0, 2 * math.pi)
    d = (max(anchor.extent) + radius) * rng.uniform(lo, hi)
    return anchor.center[0] + d * math.cos(ang), anchor.center[1] + d * math.sin(ang)


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def generate_scene(cfg: DatasetConfig, scene_index: int, max_retries: int = 40) -> SceneAnnotation:
    """Deterministic scene for ``(cfg.seed, scene_index)``."""
    rng = _rng(cfg.seed, scene_index)
    n = cfg.image_size
    flags: list[str] = []

    axis = "x" if rng.random() < 0.5 else "y"
    cuts = np.sort(rng.uniform(0.25 * n, 0.75 * n, size=cfg.num_stuff_classes - 1)).tolist()
    order = rng.permutation(cfg.num_stuff_classes).tolist()
    layout = {"axis": axis, "cuts": [float(c) for c in cuts], "order": order}
    stuff_map = stuff_map_from_layout(layout, n)

    want = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    make_pair = cfg.max_instances >= 2 and rng.random() < cfg.pair_prob
    if make_pair:
        want = max(want, 2)

    shapes: list[ShapeInstance] = []
    masks: list[np.ndarray] = []
    pairs: list[tuple[int, int]] = []

    def accept(candidate: list[ShapeInstance]) -> list[np.ndarray] | None:
        new = []
        for s in candidate:
            m, degenerate = rasterize(s, n)
            if degenerate or m.sum() < MIN_VISIBLE_AREA:
                return None
            new.append(m)
        all_masks = masks + new
        z = list(range(len(all_masks)))
        if any(v.sum() < MIN_VISIBLE_AREA for v in visible_masks(all_masks, z)):
            return None
        return new

    if make_pair:
        for _ in range(max_retries):
            cls = int(rng.integers(1, cfg.num_thing_classes + 1))
            a = _random_shape(rng, cfg, cls)
            r = rng.uniform(0.10, 0.26) * n
            b = _random_shape(rng, cfg, cls, center=_near(rng, a, r, 0.55, 0.85),
                              extent=(r * rng.uniform(0.75, 1.0), r * rng.uniform(0.75, 1.0)))
            new = accept([a, b])
            if new is None or not new[0].any() or not (new[0] & new[1]).any():
                continue
            if _mask_iou(new[0], new[1]) > 0.3:
                continue
            fill = _fill(rng, cls)
            a.fill = b.fill = fill
            shapes += [a, b]
            masks += new
            pairs.append((0, 1))
            break
        else:
            flags.append("pair_placement_failed")
            log.info("scene %d: could not place an identical-appearance pair", scene_index)

    while len(shapes) < want:
        for _ in range(max_retries):
            cls = int(rng.integers(1, cfg.num_thing_classes + 1))
            r = rng.uniform(0.10, 0.26) * n
            extent = (r * rng.uniform(0.75, 1.0), r * rng.uniform(0.75, 1.0))
            occlude = shapes and rng.random() < cfg.occlusion_prob
            center = _near(rng, shapes[int(rng.integers(len(shapes)))], r, 0.6, 1.1) if occlude else None
            s = _random_shape(rng, cfg, cls, center=center, extent=extent)
            new = accept([s])
            if new is None:
                continue
            if not occlude and any((new[0] & m).any() for m in masks):
                continue
            s.fill = _fill(rng, cls)
            shapes.append(s)
            masks += new
            break
        else:
            flags.append("placement_failed")
            log.info("scene %d: placed %d of %d instances", scene_index, len(shapes), want)
            break

    for z, s in enumerate(shapes):
        s.z_order = z

    # paint
    img = STUFF_PALETTE[stuff_map].copy()
    for s, m in zip(shapes, masks):
        img[m] = s.fill
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    return _assemble(scene_index, image, shapes, masks, stuff_map, layout, pairs,
                     cfg.num_thing_classes, flags)


def _assemble(scene_id, image, shapes, masks, stuff_map, layout, pairs, num_things, flags):
    z_orders = [s.z_order for s in shapes]
    vis = visible_masks(masks, z_orders)
    instances = [InstanceAnnotation(s.class_id, m, v, mask_box(m), s.z_order, s)
                 for s, m, v in zip(shapes, masks, vis)]
    panoptic = (STUFF_ID_BASE + stuff_map).astype(np.uint16)
    segments: dict[int, tuple[int, int]] = {}
    for k in np.unique(stuff_map):
        segments[STUFF_ID_BASE + int(k)] = (num_things + int(k) + 1, -1)
    for i, inst in enumerate(instances):
        panoptic[inst.visible] = i + 1
        segments[i + 1] = (inst.class_id, i)
    present = set(np.unique(panoptic).tolist())
    segments = {k: v for k, v in segments.items() if k in present}
    return SceneAnnotation(scene_id, image, instances, panoptic, segments, stuff_map, layout,
                           pairs, num_things, flags)


def generate_dataset(cfg: DatasetConfig, start: int = 0) -> list[SceneAnnotation]:
    return [generate_scene(cfg, start + k) for k in range(cfg.num_scenes)]


# ---------------------------------------------------------------------------
# serialisation


def _scene_dir(root: Path, scene_id: int) -> Path:
    return root / f"scene_{scene_id}"


def write_dataset(scenes: list[SceneAnnotation], directory: str | Path,
                  config: DatasetConfig | None = None) -> dict:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        d = _scene_dir(root, scene.scene_id)
        d.mkdir(exist_ok=True)
        Image.fromarray(scene.image, mode="RGB").save(d / "image.png")
        for i, inst in enumerate(scene.instances):
            Image.fromarray(inst.mask.astype(np.uint8) * 255, mode="L").save(d / f"inst_{i}.png")
        Image.fromarray(scene.panoptic.astype(np.uint16)).save(d / "panoptic.png")
        annot = {
            "scene_id": scene.scene_id,
            "size": list(scene.size),
            "num_thing_classes": scene.num_thing_classes,
            "instances": [
                {
                    "class_id": inst.class_id,
                    "box": [float(v) for v in inst.box],
                    "z_order": inst.z_order,
                    "mask_file": f"inst_{i}.png",
                    "shape": asdict(inst.shape) if inst.shape is not None else None,
                }
                for i, inst in enumerate(scene.instances)
            ],
            "segments": {str(k): {"category": c, "instance": j} for k, (c, j) in scene.segments.items()},
            "stuff_layout": scene.stuff_layout,
            "pairs": [list(p) for p in scene.pairs],
            "flags": scene.flags,
        }
        (d / "annot.json").write_text(json.dumps(annot, indent=1))
    manifest = {
        "format_version": FORMAT_VERSION,
        "rng_algorithm": RNG_ALGORITHM,
        "seed": config.seed if config is not None else None,
        "config": asdict(config) if config is not None else None,
        "num_scenes": len(scenes),
        "scene_ids": [s.scene_id for s in scenes],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _read_png(path: Path, scene_id: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError("missing file", scene_id, path)
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except Exception as exc:  # PIL raises a zoo of types for truncated files
        raise DatasetError(f"corrupt image: {exc}", scene_id, path) from exc


def read_scene(directory: str | Path, scene_id: int) -> SceneAnnotation:
    d = _scene_dir(Path(directory), scene_id)
    annot_path = d / "annot.json"
    if not annot_path.exists():
        raise DatasetError("missing file", scene_id, annot_path)
    try:
        annot = json.loads(annot_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt annotation: {exc}", scene_id, annot_path) from exc

    image = _read_png(d / "image.png", scene_id)
    h, w = annot["size"]
    if image.shape != (h, w, 3):
        raise DatasetError(f"image has shape {image.shape}, expected {(h, w, 3)}", scene_id, d / "image.png")
    shapes, masks = [], []
    for rec in annot["instances"]:
        path = d / rec["mask_file"]
        m = _read_png(path, scene_id)
        if m.shape != (h, w):
            raise DatasetError(f"mask has shape {m.shape}, expected {(h, w)}", scene_id, path)
        masks.append(m > 127)
        sh = rec["shape"]
        if sh is not None:
            sh = ShapeInstance(**{k: tuple(v) if isinstance(v, list) else v for k, v in sh.items()})
        else:
            sh = ShapeInstance(rec["class_id"], "ellipse", (0.0, 0.0), (0.0, 0.0), z_order=rec["z_order"])
        shapes.append(sh)
    panoptic = _read_png(d / "panoptic.png", scene_id).astype(np.uint16)
    stuff_map = stuff_map_from_layout(annot["stuff_layout"], h)
    scene = _assemble(scene_id, image, shapes, masks, stuff_map, annot["stuff_layout"],
                      [tuple(p) for p in annot["pairs"]], annot["num_thing_classes"], list(annot["flags"]))
    if not np.array_equal(scene.panoptic, panoptic):
        raise DatasetError("panoptic map disagrees with instance masks", scene_id, d / "panoptic.png")
    return scene


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError("missing manifest", path=path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}", path=path) from exc


def read_dataset(directory: str | Path) -> list[SceneAnnotation]:
    manifest = read_manifest(directory)
    return [read_scene(directory, k) for k in manifest["scene_ids"]]
