"""Nearest-pixel rasteriser producing an RGB frame and a label mask."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import Box, Disc, SceneSpec, SimState

LABEL_BACKGROUND = 0
LABEL_FINGER = 1
LABEL_OBJECT0 = 2
LABEL_OBSTACLE = 254
LABEL_DISTRACTOR = 255

# 11 object colours, one per catalogue entry
OBJECT_COLORS = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (0, 128, 128),
    (170, 110, 40),
)


@dataclass(frozen=True)
class DistractorConfig:
    enabled: bool = False
    radius: float = 0.018  # metres
    sigma: float = 0.012  # metres per frame
    seed: int = 0


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 64
    view: tuple[float, float, float, float] = (-0.16, 0.16, -0.16, 0.16)  # xmin, xmax, ymin, ymax
    finger_radius: float = 0.01
    background: tuple[int, int, int] = (20, 20, 30)
    finger: tuple[int, int, int] = (250, 235, 215)
    obstacle: tuple[int, int, int] = (110, 110, 110)
    distractor_color: tuple[int, int, int] = (128, 0, 0)
    object_colors: tuple[tuple[int, int, int], ...] = OBJECT_COLORS
    distractor: DistractorConfig = field(default_factory=DistractorConfig)

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16")
        colors = [self.background, self.finger, self.obstacle, self.distractor_color, *self.object_colors]
        if len(set(map(tuple, colors))) != len(colors):
            raise ValueError("palette colours must be pairwise distinct")

    @property
    def pixel_size(self) -> tuple[float, float]:
        xmin, xmax, ymin, ymax = self.view
        return (xmax - xmin) / self.width, (ymax - ymin) / self.height

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xmin, xmax, ymin, ymax = self.view
        px, py = self.pixel_size
        xs = xmin + (np.arange(self.width) + 0.5) * px
        ys = ymax - (np.arange(self.height) + 0.5) * py  # row 0 at the top
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class LabeledImage:
    rgb: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8


@dataclass
class DistractorState:
    position: np.ndarray
    rng: np.random.Generator


def init_distractor(cfg: RenderConfig) -> DistractorState:
    rng = np.random.default_rng(cfg.distractor.seed)
    xmin, xmax, ymin, ymax = cfg.view
    pos = rng.uniform([xmin, ymin], [xmax, ymax])
    return DistractorState(pos, rng)


def _advance_distractor(state: DistractorState, cfg: RenderConfig) -> DistractorState:
    rng = np.random.Generator(type(state.rng.bit_generator)())
    rng.bit_generator.state = state.rng.bit_generator.state
    xmin, xmax, ymin, ymax = cfg.view
    lo = np.array([xmin, ymin])
    hi = np.array([xmax, ymax])
    pos = state.position + cfg.distractor.sigma * rng.standard_normal(2)
    # reflect at the view borders
    pos = np.where(pos < lo, 2 * lo - pos, pos)
    pos = np.where(pos > hi, 2 * hi - pos, pos)
    return DistractorState(np.clip(pos, lo, hi), rng)


def _segment_distance(xx, yy, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = ((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom if denom > 0 else np.zeros_like(xx)
    t = np.clip(t, 0.0, 1.0)
    dx = xx - (a[0] + t * ab[0])
    dy = yy - (a[1] + t * ab[1])
    return np.hypot(dx, dy)


def render(
    state: SimState,
    scene: SceneSpec,
    cfg: RenderConfig,
    distractor_state: DistractorState | None = None,
) -> tuple[LabeledImage, DistractorState | None]:
    """Draw background, obstacles, movable objects, finger, then the distractor.

    The distractor walk advances once per call, independently of `state`.
    """
    xx, yy = cfg.pixel_centers()
    rgb = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
    rgb[:] = cfg.background
    mask = np.zeros((cfg.height, cfg.width), dtype=np.uint8)

    def paint(region, color, label):
        rgb[region] = color
        mask[region] = label

    for shape in scene.static_obstacles:
        if isinstance(shape, Disc):
            region = np.hypot(xx - shape.center[0], yy - shape.center[1]) <= shape.radius
        elif isinstance(shape, Box):
            region = (xx >= shape.min[0]) & (xx <= shape.max[0]) & (yy >= shape.min[1]) & (yy <= shape.max[1])
        else:
            raise TypeError(f"unknown shape {shape!r}")
        paint(region, cfg.obstacle, LABEL_OBSTACLE)

    for k, obj in enumerate(scene.movable_objects):
        cx, cy = state.object_positions[k]
        region = np.hypot(xx - cx, yy - cy) <= obj.radius
        paint(region, cfg.object_colors[obj.color_id % len(cfg.object_colors)], LABEL_OBJECT0 + k)

    nodes = state.finger.node_positions
    region = np.zeros_like(mask, dtype=bool)
    for a, b in zip(nodes[:-1], nodes[1:]):
        region |= _segment_distance(xx, yy, a, b) <= cfg.finger_radius
    paint(region, cfg.finger, LABEL_FINGER)

    new_distractor = distractor_state
    if cfg.distractor.enabled:
        if distractor_state is None:
            distractor_state = init_distractor(cfg)
        new_distractor = _advance_distractor(distractor_state, cfg)
        cx, cy = new_distractor.position
        region = np.hypot(xx - cx, yy - cy) <= cfg.distractor.radius
        paint(region, cfg.distractor_color, LABEL_DISTRACTOR)

    return LabeledImage(rgb, mask), new_distractor


def save_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(Path(path), format="PNG")


def image_grid(rows: list[list[np.ndarray]], pad: int = 2, scale: int = 2) -> np.ndarray:
    """Tile uint8 RGB images into one panel (rows of equal-sized images)."""
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    out = np.full(
        (len(rows) * (h * scale + pad) + pad, n_cols * (w * scale + pad) + pad, 3), 255, dtype=np.uint8
    )
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            big = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
            y0 = pad + i * (h * scale + pad)
            x0 = pad + j * (w * scale + pad)
            out[y0 : y0 + h * scale, x0 : x0 + w * scale] = big
    return out
