# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Synthetic shapes with panoptic ground truth.

An image shows a background split by a random line into two stuff
regions, over which one to four shapes (disks, squares, triangles) are
drawn in order, later shapes occluding earlier ones. Clips animate such
scenes: shapes move with constant velocity, bounce off the borders, and
may enter or leave the scene.

Segment ids: stuff regions use ids 1 and up, in stuff-class order;
things use ids above the stuff ids, allocated in order of appearance and
never reused within a clip.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config import ConfigurationError
from .container import TensorContainer
from .metrics import PanopticMap, Segment
from .model import SyntheticSpec

PALETTE = [
    (0.90, 0.25, 0.20),
    (0.20, 0.75, 0.30),
    (0.25, 0.35, 0.95),
    (0.55, 0.50, 0.35),
    (0.15, 0.25, 0.40),
    (0.85, 0.80, 0.20),
    (0.70, 0.30, 0.80),
    (0.20, 0.75, 0.80),
]

SHAPES = ("disk", "square", "triangle")


class Split(Enum):
    TRAIN = "train"
    VAL = "val"

    @property
    def code(self) -> int:
        return 0 if self is Split.TRAIN else 1


@dataclass
class Shape:
    obj_id: int
    category: int
    center: np.ndarray
    """(row, col) in pixels."""

    radius: int
    color: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class Sample:
    image: np.ndarray
    """Pixels [3, H, W]."""

    panoptic: PanopticMap


@dataclass
class Clip:
    frames: np.ndarray
    """Pixels [F, 3, H, W]."""

    panoptic: List[PanopticMap]


def sample_rng(spec: SyntheticSpec, split: Split, index: int) -> np.random.Generator:
    """The generator of one sample, derived from (seed, split, index)."""
    return np.random.default_rng(np.random.SeedSequence([spec.seed, split.code, index]))


def class_color(category: int) -> np.ndarray:
    return np.array(PALETTE[category % len(PALETTE)])


def shape_mask(shape: Shape, kind: str, size: Sequence[int]) -> np.ndarray:
    """Rasterises a shape; pixel (y, x) is covered if its index lies inside."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = shape.center
    r = shape.radius
    if kind == "disk":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)
    if kind == "triangle":
        top = cy - r
        return (ys >= top) & (ys <= cy + r) & (np.abs(xs - cx) <= (ys - top) / 2.0)
    raise ValueError(f"Unknown shape {kind!r}")


def _kind(spec: SyntheticSpec, category: int) -> str:
    name = spec.thing_names[category]
    return name if name in SHAPES else SHAPES[category % len(SHAPES)]


def _stuff_raster(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Stuff class of every pixel: the background is cut by a random line."""
    h, w = spec.image_size
    n_things = len(spec.thing_names)
    n_stuff = len(spec.stuff_names)
    out = np.full((h, w), n_things, dtype=np.int64)
    theta = rng.uniform(0.0, np.pi)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    if n_stuff > 1:
        ys, xs = np.mgrid[0:h, 0:w]
        side = np.cos(theta) * (ys - cy) + np.sin(theta) * (xs - cx) > 0
        out[side] = n_things + 1
    return out


def _new_shape(
    spec: SyntheticSpec, rng: np.random.Generator, obj_id: int, moving: bool
) -> Shape:
    h, w = spec.image_size
    category = int(rng.integers(0, len(spec.thing_names)))
    radius = int(rng.integers(spec.min_radius, spec.max_radius + 1))
    center = np.array([rng.integers(0, h), rng.integers(0, w)], dtype=np.float64)
    jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
    velocity = np.zeros(2)
    if moving:
        velocity = rng.uniform(-spec.max_speed, spec.max_speed, size=2)
    return Shape(obj_id, category, center, radius, class_color(category) + jitter, velocity)


def render(
    spec: SyntheticSpec,
    stuff: np.ndarray,
    stuff_colors: np.ndarray,
    shapes: Sequence[Shape],
    noise: np.ndarray,
) -> Tuple[np.ndarray, PanopticMap]:
    """Draws shapes in order over the stuff regions.

    Shapes left with fewer than ``min_area`` visible pixels are removed,
    one at a time, and the scene is drawn again.
    """
    n_things = len(spec.thing_names)
    size = tuple(spec.image_size)
    visible = list(shapes)
    masks = [shape_mask(s, _kind(spec, s.category), size) for s in visible]
    while True:
        raster = stuff - n_things + 1
        for s, m in zip(visible, masks):
            raster = np.where(m, s.obj_id, raster)
        small = [
            i for i, s in enumerate(visible) if int((raster == s.obj_id).sum()) < spec.min_area
        ]
        if not small:
            break
        del visible[small[0]]
        del masks[small[0]]

    image = np.empty((3,) + size)
    image[:] = stuff_colors[:, stuff - n_things]
    segments = []
    for k in range(len(spec.stuff_names)):
        if np.any(raster == k + 1):
            segments.append(Segment(k + 1, n_things + k, False))
    for s in visible:
        sel = raster == s.obj_id
        image[:, sel] = s.color[:, None]
        segments.append(Segment(s.obj_id, s.category, True))
    image = (image + noise).astype(np.float32)
    return image, PanopticMap(raster.astype(np.int64), segments)


def _stuff_colors(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n_things = len(spec.thing_names)
    cols = [
        class_color(n_things + k) + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        for k in range(len(spec.stuff_names))
    ]
    return np.stack(cols, axis=0).T  # [3, S]


def generate_image(spec: SyntheticSpec, rng: np.random.Generator) -> Sample:
    """Generates one image and its panoptic ground truth."""
    h, w = spec.image_size
    stuff = _stuff_raster(spec, rng)
    stuff_colors = _stuff_colors(spec, rng)
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    first_id = len(spec.stuff_names) + 1
    shapes = [_new_shape(spec, rng, first_id + i, moving=False) for i in range(n)]
    noise = rng.normal(0.0, spec.noise_std, size=(3, h, w))
    image, pmap = render(spec, stuff, stuff_colors, shapes, noise)
    return Sample(image, pmap)


def _bounce(shape: Shape, size: Sequence[int]) -> None:
    for axis in range(2):
        hi = float(size[axis] - 1)
        pos = shape.center[axis] + shape.velocity[axis]
        if pos < 0.0:
            pos = -pos
            shape.velocity[axis] = -shape.velocity[axis]
        elif pos > hi:
            pos = 2 * hi - pos
            shape.velocity[axis] = -shape.velocity[axis]
        shape.center[axis] = pos


def generate_clip(spec: SyntheticSpec, rng: np.random.Generator) -> Clip:
    """Generates a clip of ``spec.frames_per_clip`` frames.

    The background, the colours and the pixel noise are fixed for the
    whole clip, so a static scene yields identical frames. At each frame
    after the first, every shape leaves with probability
    ``despawn_prob``, then one new shape enters with probability
    ``spawn_prob``.
    """
    h, w = spec.image_size
    stuff = _stuff_raster(spec, rng)
    stuff_colors = _stuff_colors(spec, rng)
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    next_id = len(spec.stuff_names) + 1
    shapes = []
    for _ in range(n):
        shapes.append(_new_shape(spec, rng, next_id, moving=True))
        next_id += 1
    noise = rng.normal(0.0, spec.noise_std, size=(3, h, w))

    frames, maps = [], []
    for t in range(spec.frames_per_clip):
        if t > 0:
            for s in shapes:
                _bounce(s, spec.image_size)
            leave = rng.random(len(shapes)) < spec.despawn_prob
            shapes = [s for s, gone in zip(shapes, leave) if not gone]
            if rng.random() < spec.spawn_prob:
                shapes.append(_new_shape(spec, rng, next_id, moving=True))
                next_id += 1
        image, pmap = render(spec, stuff, stuff_colors, shapes, noise)
        frames.append(image)
        maps.append(pmap)
    return Clip(np.stack(frames), maps)


@dataclass
class Targets:
    """Training targets of one image at mask resolution."""

    ids: np.ndarray
    classes: np.ndarray
    masks: np.ndarray
    """Binary masks [G, H/4, W/4]."""


def downsample_targets(pmap: PanopticMap, factor: int = 4) -> Targets:
    """Segment masks at 1/factor resolution (majority vote in each block).

    Segments that vanish at this resolution are dropped.
    """
    ids, classes, masks = pmap.masks()
    if len(ids) == 0:
        h, w = pmap.id_raster.shape
        return Targets(ids, classes, np.zeros((0, h // factor, w // factor)))
    g, h, w = masks.shape
    blocks = masks.reshape(g, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    small = blocks >= 0.5
    keep = small.reshape(g, -1).any(axis=1)
    return Targets(ids[keep], classes[keep], small[keep].astype(np.float64))


def dominant_class(pmap: PanopticMap) -> int:
    """Class of the largest visible thing, or of the largest region if none."""
    best, best_area, best_thing = -1, -1, False
    for s in pmap.segments:
        area = int((pmap.id_raster == s.id).sum())
        if (s.is_thing, area) > (best_thing, best_area):
            best, best_area, best_thing = s.category, area, s.is_thing
    return best


# Storage


def sample_container(sample: Any) -> TensorContainer:
    """Packs an image sample or a clip into a tensor container."""
    c = TensorContainer()
    if isinstance(sample, Clip):
        c.add("frames", sample.frames.astype(np.float32))
        c.add("ids", np.stack([m.id_raster for m in sample.panoptic]).astype(np.uint32))
        maps = sample.panoptic
    else:
        c.add("image", sample.image.astype(np.float32))
        c.add("ids", sample.panoptic.id_raster.astype(np.uint32))
        maps = [sample.panoptic]
    table: Dict[int, Segment] = {}
    for m in maps:
        for s in m.segments:
            table.setdefault(s.id, s)
    rows = [[s.id, s.category, int(s.is_thing)] for s in table.values()]
    c.add("segments", np.array(rows, dtype=np.uint32).reshape(-1, 3))
    return c


def _panoptic(ids: np.ndarray, table: np.ndarray) -> PanopticMap:
    present = set(int(i) for i in np.unique(ids))
    segs = [Segment(int(r[0]), int(r[1]), bool(r[2])) for r in table if int(r[0]) in present]
    return PanopticMap(ids.astype(np.int64), segs)


def sample_from_container(c: TensorContainer) -> Any:
    table = c["segments"]
    if "frames" in c:
        ids = c["ids"]
        return Clip(c["frames"], [_panoptic(ids[t], table) for t in range(ids.shape[0])])
    return Sample(c["image"], _panoptic(c["ids"], table))


class SyntheticDataset(object):
    """Images or clips of one split, read from disk or generated on demand.

    If the spec has a ``root`` holding a manifest, samples are read from
    the files it lists; otherwise sample ``i`` is generated from its
    derived seed.
    """

    def __init__(self, spec: SyntheticSpec, split: Split, video: bool = False):
        self.spec = spec
        self.split = split
        self.video = video
        self.files: Optional[List[str]] = None
        if spec.root is not None:
            manifest = os.path.join(spec.root, "manifest.yaml")
            if os.path.exists(manifest):
                self.files = load_manifest(manifest, split, video)

    def __len__(self) -> int:
        if self.files is not None:
            return len(self.files)
        return self.spec.train_size if self.split is Split.TRAIN else self.spec.val_size

    def __getitem__(self, index: int) -> Any:
        if index < 0 or index >= len(self):
            raise IndexError(f"Sample {index} out of range")
        if self.files is not None:
            assert self.spec.root is not None
            path = os.path.join(self.spec.root, self.files[index])
            return sample_from_container(TensorContainer.load(path))
        rng = sample_rng(self.spec, self.split, index)
        return generate_clip(self.spec, rng) if self.video else generate_image(self.spec, rng)


def load_manifest(path: str, split: Split, video: bool) -> List[str]:
    with open(path, "r") as f:
        manifest = yaml.load(f, Loader=yaml.FullLoader)
    mode = "video" if video else "image"
    if manifest.get("mode") != mode:
        raise ConfigurationError(f"{path} holds a {manifest.get('mode')} dataset, not {mode}")
    return list(manifest["splits"][split.value])


def write_dataset(
    spec: SyntheticSpec, out_dir: str, video: bool = False, threads: int = 1
) -> Dict[str, List[str]]:
    """Generates both splits into ``out_dir`` and writes the manifest.

    :returns: The relative file names of each split.
    """
    generated = SyntheticSpec.from_dict(spec.to_dict())
    generated.root = None
    splits: Dict[str, List[str]] = {}
    for split in Split:
        os.makedirs(os.path.join(out_dir, split.value), exist_ok=True)
        ds = SyntheticDataset(generated, split, video)
        names = [f"{split.value}/{i:05d}.pmtc" for i in range(len(ds))]

        def write(i: int) -> None:
            sample_container(ds[i]).save(os.path.join(out_dir, names[i]))

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            list(pool.map(write, range(len(ds))))
        splits[split.value] = names
        logging.info(f"Wrote {len(names)} {split.value} samples to {out_dir}")

    manifest = {
        "mode": "video" if video else "image",
        "spec": generated.to_dict(),
        "splits": splits,
    }
    with open(os.path.join(out_dir, "manifest.yaml"), "w") as f:
        yaml.dump(manifest, f, default_flow_style=False)
    return splits
