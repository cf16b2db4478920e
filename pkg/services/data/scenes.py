"""
Procedural paired scenes

A scene is a set of axis-aligned footprints on the unit ground plane
(x across, y = depth away from the ground camera). Each scene renders to:

- aerial: orthographic top-down view (far edge of the plane at the top row)
- ground: fixed camera looking along +y; the horizon sits at 40% of the
  image height, each object becomes a vertical quad spanning its own
  columns whose height grows with object height and shrinks with depth,
  drawn far-to-near over a sky gradient and a grass band
- semantic: the ground projection filled with palette colours

Grass patches are visible from above but blend into the grass band at
ground level, so every ground pixel differs from the background exactly
where the semantic map shows something other than sky or grass.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.common.exceptions import ConfigError
from services.engine.rng import Rng

logger = logging.getLogger(__name__)

SceneClass = Literal["road", "building", "tree", "car", "grass", "sky"]
RGB = Tuple[int, int, int]

PALETTE: Dict[str, RGB] = {
    "road": (128, 64, 128),
    "building": (70, 70, 70),
    "tree": (107, 142, 35),
    "car": (0, 0, 142),
    "grass": (152, 251, 152),
    "sky": (70, 130, 180),
}

AERIAL_GRASS: RGB = (86, 125, 70)
GROUND_GRASS: RGB = (86, 125, 70)
SKY_TOP: RGB = (110, 160, 225)
SKY_HORIZON: RGB = (200, 220, 245)

HORIZON_FRACTION = 0.4
SUPPORTED_SIZES = (32, 64, 128, 256)


class SceneObject(BaseModel):
    """One footprint: [x0, x1) x [y0, y1) on the unit plane"""

    model_config = ConfigDict(frozen=True)

    cls: SceneClass
    x0: float = Field(ge=0.0, le=1.0)
    y0: float = Field(ge=0.0, le=1.0)
    x1: float = Field(ge=0.0, le=1.0)
    y1: float = Field(ge=0.0, le=1.0)
    height: float = Field(0.0, ge=0.0)
    color: Tuple[int, int, int]

    @model_validator(mode="after")
    def check_footprint(self) -> "SceneObject":
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError("footprint must have positive extent")
        if self.cls == "sky":
            raise ValueError("sky is background only and cannot have a footprint")
        if any(not 0 <= v <= 255 for v in self.color):
            raise ValueError(f"color {self.color} outside 0..255")
        return self


class SceneSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 0
    objects: List[SceneObject] = Field(default_factory=list)


@dataclass
class ImageTriplet:
    """(aerial, semantic, ground) as H x W x 3 uint8 arrays"""

    aerial: np.ndarray
    semantic: np.ndarray
    ground: np.ndarray

    @property
    def size(self) -> int:
        return self.aerial.shape[0]


# ============ Scene sampling ============

_CLASS_SIZES = {
    # (min extent, max extent) along x and y
    "building": ((0.10, 0.25), (0.10, 0.25)),
    "tree": ((0.04, 0.08), (0.04, 0.08)),
    "car": ((0.04, 0.07), (0.03, 0.05)),
    "grass": ((0.10, 0.30), (0.10, 0.30)),
}
_CLASS_HEIGHTS = {"road": (0.0, 0.0), "grass": (0.0, 0.0), "building": (0.3, 0.8),
                  "tree": (0.2, 0.45), "car": (0.05, 0.10)}


def _appearance(cls: str, gen: np.random.Generator) -> RGB:
    # ranges are disjoint from the sky gradient and from GROUND_GRASS
    if cls == "road":
        g = int(gen.integers(60, 91))
        return (g, g, g)
    if cls == "building":
        r = int(gen.integers(120, 201))
        return (r, r + int(gen.integers(-10, 11)), r + int(gen.integers(-15, 6)))
    if cls == "tree":
        return (int(gen.integers(20, 61)), int(gen.integers(80, 111)), int(gen.integers(20, 51)))
    if cls == "car":
        return (int(gen.integers(150, 221)), int(gen.integers(20, 61)), int(gen.integers(20, 61)))
    return (int(gen.integers(110, 131)), int(gen.integers(160, 181)), int(gen.integers(80, 101)))


def _box(cls: str, gen: np.random.Generator) -> Tuple[float, float, float, float]:
    (wx_lo, wx_hi), (wy_lo, wy_hi) = _CLASS_SIZES[cls]
    wx, wy = gen.uniform(wx_lo, wx_hi), gen.uniform(wy_lo, wy_hi)
    x0, y0 = gen.uniform(0.0, 1.0 - wx), gen.uniform(0.0, 1.0 - wy)
    return float(x0), float(y0), float(x0 + wx), float(y0 + wy)


def random_scene(seed: int) -> SceneSpec:
    """Draw a scene: optional road band, 1-3 buildings, trees, cars and lawn patches"""
    gen = Rng(seed).fresh("scene")
    objects: List[SceneObject] = []

    if gen.uniform() < 0.7:
        thickness = float(gen.uniform(0.08, 0.15))
        start = float(gen.uniform(0.05, 0.6))
        if gen.uniform() < 0.5:
            box = (0.0, start, 1.0, start + thickness)
        else:
            box = (start, 0.0, start + thickness, 1.0)
        objects.append(SceneObject(cls="road", x0=box[0], y0=box[1], x1=box[2], y1=box[3],
                                   height=0.0, color=_appearance("road", gen)))

    counts = {
        "grass": int(gen.integers(0, 3)),
        "building": int(gen.integers(1, 4)),
        "tree": int(gen.integers(0, 5)),
        "car": int(gen.integers(0, 4)),
    }
    for cls, count in counts.items():
        lo, hi = _CLASS_HEIGHTS[cls]
        for _ in range(count):
            x0, y0, x1, y1 = _box(cls, gen)
            height = float(gen.uniform(lo, hi)) if hi > 0 else 0.0
            objects.append(SceneObject(cls=cls, x0=x0, y0=y0, x1=x1, y1=y1,
                                       height=height, color=_appearance(cls, gen)))
    return SceneSpec(seed=seed, objects=objects)


# ============ Rendering ============

def horizon_row(size: int) -> int:
    return int(np.floor(HORIZON_FRACTION * size + 0.5))


def sky_gradient(rows: int) -> np.ndarray:
    """rows x 3 uint8 colours, SKY_TOP at row 0 to SKY_HORIZON at the last row"""
    t = np.arange(rows, dtype=np.float64) / max(rows - 1, 1)
    top, bottom = np.array(SKY_TOP, dtype=np.float64), np.array(SKY_HORIZON, dtype=np.float64)
    return np.floor(top + t[:, None] * (bottom - top) + 0.5).astype(np.uint8)


def _pixel_centers(size: int) -> np.ndarray:
    return (np.arange(size, dtype=np.float64) + 0.5) / size


def render_aerial(spec: SceneSpec, size: int) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = AERIAL_GRASS
    xs = _pixel_centers(size)
    ys = 1.0 - xs  # row 0 is the far edge
    # taller objects are drawn last (seen from above they cover lower ones)
    for obj in sorted(spec.objects, key=lambda o: o.height):
        cols = (xs >= obj.x0) & (xs < obj.x1)
        rows = (ys >= obj.y0) & (ys < obj.y1)
        img[np.ix_(rows, cols)] = obj.color
    return img


def render_ground(spec: SceneSpec, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """(ground image, semantic map)"""
    hz = horizon_row(size)
    ground = np.empty((size, size, 3), dtype=np.uint8)
    semantic = np.empty((size, size, 3), dtype=np.uint8)
    ground[:hz] = sky_gradient(hz)[:, None, :]
    ground[hz:] = GROUND_GRASS
    semantic[:hz] = PALETTE["sky"]
    semantic[hz:] = PALETTE["grass"]

    xs = _pixel_centers(size)

    def base_row(depth: float) -> int:
        return int(np.floor(hz + (size - 1 - hz) * (1.0 - depth) + 0.5))

    # far-to-near by the near edge
    for obj in sorted(spec.objects, key=lambda o: -o.y0):
        cols = (xs >= obj.x0) & (xs < obj.x1)
        if not cols.any():
            continue
        lift = int(np.floor(obj.height * size / (1.0 + 2.0 * obj.y0) + 0.5))
        top = max(base_row(obj.y1) - lift, 0)
        bottom = base_row(obj.y0)
        color = GROUND_GRASS if obj.cls == "grass" else obj.color
        ground[top:bottom + 1, cols] = color
        semantic[top:bottom + 1, cols] = PALETTE[obj.cls]
    return ground, semantic


def synth_triplet(spec: SceneSpec, size: int) -> ImageTriplet:
    """
    Render a scene at `size` x `size`

    Raises:
        ConfigError: If size is not one of 32, 64, 128, 256
    """
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"scene size must be one of {SUPPORTED_SIZES}, got {size}", field="size")
    ground, semantic = render_ground(spec, size)
    return ImageTriplet(aerial=render_aerial(spec, size), semantic=semantic, ground=ground)


def background_mask(ground: np.ndarray) -> np.ndarray:
    """H x W boolean mask of pixels equal to the empty-scene background"""
    size = ground.shape[0]
    hz = horizon_row(size)
    expected = np.empty_like(ground)
    expected[:hz] = sky_gradient(hz)[:, None, :]
    expected[hz:] = GROUND_GRASS
    return np.all(ground == expected, axis=-1)
