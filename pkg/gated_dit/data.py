#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Toy Data
Procedural conditional-image tasks on a 3x32x32 canvas.

- Scenes: 1-3 shapes whose type and hue family are fixed by the class id
- Spatially aligned conditions: edge map (Sobel), box blur, grayscale
- Subject condition: same shape identity, new position, neutral background
- P6 portable pixmap I/O for inspection
"""
import colorsys
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from .errors import ClassIdError, DimensionError, GatedDiTError

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
EDGE_THRESHOLD = 0.25
SUBJECT_BACKGROUND = 0.5

# Random stream ids for batch_rng
STREAM_DATA, STREAM_NOISE, STREAM_INIT, STREAM_EVAL, STREAM_SAMPLE, STREAM_BENCH, STREAM_THROUGHPUT = range(7)

# Hue ranges per family (class // 3): warm, cool
HUE_FAMILIES = ((0.0, 0.12), (0.5, 0.7))


class TaskKind(Enum):
    EDGE = "edge"
    DEBLUR = "deblur"
    COLORIZE = "colorize"
    SUBJECT = "subject"

    @property
    def spatially_aligned(self) -> bool:
        return self is not TaskKind.SUBJECT


class ShapeKind(Enum):
    DISC = "disc"
    RECTANGLE = "rectangle"
    TRIANGLE = "triangle"


SHAPE_ORDER = (ShapeKind.DISC, ShapeKind.RECTANGLE, ShapeKind.TRIANGLE)


@dataclass
class ShapeSpec:
    kind: ShapeKind
    cx: float
    cy: float
    half_w: float
    half_h: float
    hue: float
    rgb: Tuple[float, float, float]


@dataclass
class ToyScene:
    """Rendered canvas plus the parameters that produced it"""
    canvas: np.ndarray                  # [3 x H x W] in [0, 1]
    class_id: int
    shapes: List[ShapeSpec] = field(default_factory=list)
    background: float = 0.3


@dataclass
class TaskSample:
    target: np.ndarray
    condition: np.ndarray
    class_id: int
    scene: Optional[ToyScene] = None


def class_identity(class_id: int) -> Tuple[ShapeKind, Tuple[float, float]]:
    """class id -> (shape type, hue range)"""
    return SHAPE_ORDER[class_id % 3], HUE_FAMILIES[(class_id // 3) % len(HUE_FAMILIES)]


def batch_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Independent stream per (seed, keys).
    SeedSequence zero-pads its entropy, so the key count is part of the entropy:
    (seed, k) and (seed, k, 0) must not share a stream.
    """
    entropy = [int(seed), len(keys)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@lru_cache(maxsize=8)
def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy.setflags(write=False)
    xx.setflags(write=False)
    return yy, xx


def shape_mask(shape: ShapeSpec, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    dx = xx - shape.cx
    dy = yy - shape.cy
    if shape.kind is ShapeKind.DISC:
        return dx * dx + dy * dy <= shape.half_w * shape.half_w
    if shape.kind is ShapeKind.RECTANGLE:
        return (np.abs(dx) <= shape.half_w) & (np.abs(dy) <= shape.half_h)
    # apex at the top, base on the bottom edge of the bounding box
    frac = (dy + shape.half_h) / (2.0 * shape.half_h)
    return (np.abs(dy) <= shape.half_h) & (np.abs(dx) <= frac * shape.half_w)


def render(shapes: List[ShapeSpec], size: int, background: float) -> np.ndarray:
    canvas = np.full((3, size, size), background, dtype=np.float64)
    for shape in shapes:
        mask = shape_mask(shape, size)
        canvas[:, mask] = np.asarray(shape.rgb)[:, None]
    return canvas


def _random_shape(kind: ShapeKind, hue_range: Tuple[float, float], rng: np.random.Generator,
                  size: int, hue: Optional[float] = None) -> ShapeSpec:
    max_half = max(2.0, size * 0.28)
    half_w = float(rng.uniform(max(2.0, size * 0.12), max_half))
    half_h = half_w if kind is ShapeKind.DISC else float(rng.uniform(0.6, 1.0) * half_w)
    # keep the whole shape on the canvas
    cx = float(rng.uniform(half_w, size - 1 - half_w))
    cy = float(rng.uniform(half_h, size - 1 - half_h))
    if hue is None:
        hue = float(rng.uniform(*hue_range))
    rgb = colorsys.hsv_to_rgb(hue, float(rng.uniform(0.7, 1.0)), float(rng.uniform(0.8, 1.0)))
    return ShapeSpec(kind, cx, cy, half_w, half_h, hue, tuple(float(c) for c in rgb))


def gen_scene(class_id: int, rng: np.random.Generator, image_size: int = 32,
              n_classes: int = 6) -> ToyScene:
    if not 0 <= class_id < n_classes:
        raise ClassIdError(f"class id {class_id} outside [0, {n_classes})")
    kind, hue_range = class_identity(class_id)
    background = float(rng.uniform(0.15, 0.4))
    n_shapes = int(rng.integers(1, 4))
    shapes = [_random_shape(kind, hue_range, rng, image_size) for _ in range(n_shapes)]
    return ToyScene(render(shapes, image_size, background), class_id, shapes, background)


# ==================== CONDITION OPERATORS ====================

def _check_image(op: str, image: np.ndarray):
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(op, image.shape, detail="expects a [3 x H x W] image")


def luminance(image: np.ndarray) -> np.ndarray:
    _check_image("luminance", image)
    return np.tensordot(LUMA, image, axes=1)


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """3x3 Sobel gradient magnitude with edge-replicated borders"""
    p = np.pad(gray, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]))
    gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]))
    return np.hypot(gx, gy)


def edge_map(image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary [H x W] edge map: Sobel magnitude >= threshold * max"""
    mag = sobel_magnitude(luminance(image))
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    return mag >= threshold * peak


def edge_condition(image: np.ndarray) -> np.ndarray:
    edges = edge_map(image).astype(np.float64)
    return np.repeat(edges[None], 3, axis=0)


def box_blur(image: np.ndarray, radius: int = 2) -> np.ndarray:
    """(2r+1)^2 box filter per channel, edge-clamped"""
    k = 2 * radius + 1
    p = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    h, w = image.shape[1:]
    # separable sums via cumulative sums
    c = np.cumsum(p, axis=2)
    c = np.concatenate([np.zeros_like(c[:, :, :1]), c], axis=2)
    rows = c[:, :, k:k + w] - c[:, :, :w]
    c = np.cumsum(rows, axis=1)
    c = np.concatenate([np.zeros_like(c[:, :1, :]), c], axis=1)
    return (c[:, k:k + h, :] - c[:, :h, :]) / float(k * k)


def blur_condition(image: np.ndarray) -> np.ndarray:
    _check_image("blur_condition", image)
    return box_blur(box_blur(image))


def gray_condition(image: np.ndarray) -> np.ndarray:
    return np.repeat(luminance(image)[None], 3, axis=0)


def subject_condition(scene: ToyScene, rng: np.random.Generator) -> np.ndarray:
    """The scene's first shape, same type and hue, redrawn elsewhere on neutral gray"""
    if not scene.shapes:
        raise GatedDiTError("subject condition needs a scene with at least one shape")
    subject = scene.shapes[0]
    size = scene.canvas.shape[-1]
    _, hue_range = class_identity(scene.class_id)
    moved = _random_shape(subject.kind, hue_range, rng, size, hue=subject.hue)
    moved.rgb = subject.rgb
    return render([moved], size, SUBJECT_BACKGROUND)


ALIGNED_OPERATORS = {
    TaskKind.EDGE: edge_condition,
    TaskKind.DEBLUR: blur_condition,
    TaskKind.COLORIZE: gray_condition,
}


def condition_operator(task: TaskKind):
    """Pixel-aligned condition operator of a task, or None for subject"""
    return ALIGNED_OPERATORS.get(TaskKind(task))


def make_condition(task: TaskKind, scene: ToyScene, rng: np.random.Generator) -> np.ndarray:
    task = TaskKind(task)
    if task is TaskKind.SUBJECT:
        return subject_condition(scene, rng)
    return ALIGNED_OPERATORS[task](scene.canvas)


def make_batch(task, batch_size: int, rng: np.random.Generator, image_size: int = 32,
               n_classes: int = 6) -> List[TaskSample]:
    try:
        task = TaskKind(task.value if isinstance(task, Enum) else task)
    except ValueError:
        raise GatedDiTError(f"unknown task '{task}' (known: {', '.join(t.value for t in TaskKind)})")
    if batch_size < 1:
        raise GatedDiTError("batch_size must be >= 1")
    batch = []
    for _ in range(batch_size):
        class_id = int(rng.integers(n_classes))
        scene = gen_scene(class_id, rng, image_size=image_size, n_classes=n_classes)
        batch.append(TaskSample(scene.canvas, make_condition(task, scene, rng), class_id, scene))
    return batch


def measure_throughput(n_scenes: int = 2000, seed: int = 0, image_size: int = 32) -> float:
    """Scenes per second for gen_scene alone"""
    rng = batch_rng(seed, STREAM_THROUGHPUT)
    start = time.perf_counter()
    for i in range(n_scenes):
        gen_scene(i % 6, rng, image_size=image_size)
    elapsed = time.perf_counter() - start
    return n_scenes / elapsed if elapsed > 0 else float("inf")


# ==================== PIXMAP I/O ====================

def to_bytes(image: np.ndarray) -> bytes:
    _check_image("to_bytes", image)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels.transpose(1, 2, 0).tobytes()


def write_ppm(path: str, image: np.ndarray) -> str:
    """Binary P6 pixmap, maxval 255"""
    h, w = image.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(image))
    return path


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GatedDiTError(f"{path}: truncated pixmap header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise GatedDiTError(f"{path}: not a P6 pixmap with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise GatedDiTError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
