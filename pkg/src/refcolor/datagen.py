"""Synthetic (sketch, color, mask) triples and the data transforms used around them.

Images are float32 numpy arrays shaped ``(C, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.interpolate import RBFInterpolator

from ._validation import check_image, check_mask, check_same_hw

SHAPE_KINDS = ("ellipse", "polygon", "capsule")
TEXTURES = ("flat", "gradient", "stripes")
STAGES = ("0", "1a", "1b", "2", "3")

# max-norm gap between the foreground and background base colours; per-shape and
# per-texture jitter stays small enough that every pair keeps a 0.3 separation
_BASE_SEPARATION = 0.5
_BG_JITTER = 0.06
_FG_JITTER = 0.08


@dataclass
class ImageTriple:
    sketch: np.ndarray
    color: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.sketch = check_image(self.sketch, channels=1, name="sketch")
        self.color = check_image(self.color, channels=3, name="color")
        self.mask = check_mask(self.mask, name="mask")
        check_same_hw(self.sketch, self.color, self.mask)


@dataclass
class Shape:
    kind: str
    params: dict
    color: tuple

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    """A synthetic scene. ``shapes`` left empty means "draw ``n_shapes`` at random from ``seed``"."""

    seed: int = 0
    image_size: int = 64
    n_shapes: int = 2
    shape_kinds: tuple = SHAPE_KINDS
    texture: str = "flat"
    background_palette: tuple = ((0.2, 0.5, 0.8), (0.25, 0.55, 0.85))
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_shapes < 1 and not self.shapes:
            raise ValueError("a scene needs at least one shape")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if not self.shape_kinds or not set(self.shape_kinds) <= set(SHAPE_KINDS):
            raise ValueError(f"shape_kinds must be drawn from {SHAPE_KINDS}")
        pal = np.asarray(self.background_palette, dtype=np.float64).reshape(-1, 3)
        if pal.size == 0 or pal.min() < 0 or pal.max() > 1:
            raise ValueError("background palette colours must lie in [0, 1]")
        for s in self.shapes:
            gap = np.abs(pal - np.asarray(s.color)).max(axis=1).min()
            if gap < 0.3:
                raise ValueError(f"shape colour {s.color} is within 0.3 of the background palette")


def _rand_color(rng, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=3)


def random_scene_spec(seed: int, image_size: int = 64) -> SceneSpec:
    """Draw palette, texture and shapes from ``seed``."""
    rng = np.random.default_rng(seed)
    while True:
        bg_base = _rand_color(rng, _BG_JITTER, 1 - _BG_JITTER)
        fg_base = _rand_color(rng, _FG_JITTER, 1 - _FG_JITTER)
        if np.abs(bg_base - fg_base).max() >= _BASE_SEPARATION:
            break
    palette = tuple(tuple(np.clip(bg_base + rng.uniform(-_BG_JITTER, _BG_JITTER, 3), 0, 1)) for _ in range(2))
    texture = TEXTURES[rng.integers(len(TEXTURES))]
    n = int(rng.integers(1, 4))
    shapes = [_random_shape(rng, image_size, fg_base) for _ in range(n)]
    return SceneSpec(seed=seed, image_size=image_size, n_shapes=n, texture=texture,
                     background_palette=palette, shapes=shapes)


def _random_shape(rng, size, fg_base, kinds=SHAPE_KINDS) -> Shape:
    kind = kinds[rng.integers(len(kinds))]
    color = tuple(np.clip(fg_base + rng.uniform(-_FG_JITTER, _FG_JITTER, 3), 0, 1))
    s = size / 64.0
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    if kind == "ellipse":
        params = dict(cy=cy, cx=cx, ry=rng.uniform(9, 18) * s, rx=rng.uniform(9, 18) * s, angle=rng.uniform(0, np.pi))
    elif kind == "polygon":
        k = int(rng.integers(3, 7))
        angles = (np.arange(k) + rng.uniform(-0.3, 0.3, k)) * (2 * np.pi / k) + rng.uniform(0, 2 * np.pi)
        r = rng.uniform(11, 20) * s
        params = dict(vertices=[(cy + r * np.sin(a), cx + r * np.cos(a)) for a in angles])
    else:
        ang = rng.uniform(0, np.pi)
        half = rng.uniform(8, 16) * s
        params = dict(
            p0=(cy - half * np.sin(ang), cx - half * np.cos(ang)),
            p1=(cy + half * np.sin(ang), cx + half * np.cos(ang)),
            radius=rng.uniform(5, 9) * s,
        )
    return Shape(kind, params, color)


def _shape_support(shape: Shape, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    p = shape.params
    if shape.kind == "ellipse":
        dy, dx = yy - p["cy"], xx - p["cx"]
        c, s = math.cos(p.get("angle", 0.0)), math.sin(p.get("angle", 0.0))
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / p["rx"]) ** 2 + (v / p["ry"]) ** 2 <= 1.0
    if shape.kind == "polygon":
        verts = np.asarray(p["vertices"], dtype=np.float64)
        centroid = verts.mean(axis=0)
        inside = np.ones((size, size), dtype=bool)
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            edge = b - a
            side = lambda y, x: edge[0] * (x - a[1]) - edge[1] * (y - a[0])  # noqa: E731
            inside &= np.sign(side(yy, xx)) * np.sign(side(*centroid)) >= 0
        return inside
    p0, p1 = np.asarray(p["p0"]), np.asarray(p["p1"])
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0, 1)
    dist2 = (yy - (p0[0] + t * d[0])) ** 2 + (xx - (p0[1] + t * d[1])) ** 2
    return dist2 <= p["radius"] ** 2


def _background(spec: SceneSpec, rng) -> np.ndarray:
    size = spec.image_size
    pal = np.asarray(spec.background_palette, dtype=np.float64).reshape(-1, 3)
    a, b = pal[0], pal[-1]
    if spec.texture == "flat":
        return np.broadcast_to(a[:, None, None], (3, size, size)).copy()
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ang = rng.uniform(0, np.pi)
    proj = np.cos(ang) * xx + np.sin(ang) * yy
    if spec.texture == "gradient":
        w = (proj - proj.min()) / max(np.ptp(proj), 1e-12)
    else:
        period = rng.uniform(8, 16) / size
        w = (np.floor(proj / period) % 2).astype(np.float64)
    return a[:, None, None] * (1 - w) + b[:, None, None] * w


def gen_synthetic_triple(spec: SceneSpec, id: str = "") -> ImageTriple:
    """Render the scene, its foreground mask and its extracted sketch."""
    rng = np.random.default_rng(spec.seed)
    shapes = spec.shapes
    if not shapes:
        pal = np.asarray(spec.background_palette, dtype=np.float64).reshape(-1, 3)
        while True:
            fg_base = _rand_color(rng, _FG_JITTER, 1 - _FG_JITTER)
            if np.abs(pal - fg_base).max(axis=1).min() >= 0.3 + _FG_JITTER:
                break
        shapes = [_random_shape(rng, spec.image_size, fg_base, tuple(spec.shape_kinds)) for _ in range(spec.n_shapes)]
    color = _background(spec, rng)
    mask = np.zeros((spec.image_size, spec.image_size), dtype=bool)
    for shape in shapes:
        sup = _shape_support(shape, spec.image_size)
        color[:, sup] = np.asarray(shape.color, dtype=np.float64)[:, None]
        mask |= sup
    color = color.astype(np.float32)
    return ImageTriple(extract_sketch(color), color, mask[None].astype(np.float32), id=id or f"seed{spec.seed}")


# -- transforms ---------------------------------------------------------------


def extract_sketch(color: np.ndarray, sigma: float = 0.5, k: float = 2.0, lo: float = 0.01, hi: float = 0.03) -> np.ndarray:
    """Difference-of-Gaussians line extraction: dark lines on white at colour discontinuities.

    The edge response is the largest per-channel ``|G_sigma * x - G_{k sigma} * x|``;
    responses below ``lo`` are white and above ``hi`` fully dark.
    """
    color = check_image(color, channels=3, name="color").astype(np.float64)
    resp = np.zeros(color.shape[1:])
    for c in color:
        dog = ndimage.gaussian_filter(c, sigma, mode="nearest") - ndimage.gaussian_filter(c, k * sigma, mode="nearest")
        resp = np.maximum(resp, np.abs(dog))
    line = np.clip((resp - lo) / (hi - lo), 0.0, 1.0)
    return (1.0 - line)[None].astype(np.float32)


def bleach_background(color: np.ndarray, mask: np.ndarray, invert: bool = False) -> np.ndarray:
    """Whiten the background (``mask <= 0.5``), or the foreground when ``invert`` is set."""
    color = check_image(color, channels=3, name="color")
    mask = check_mask(mask)
    check_same_hw(color, mask)
    region = mask[0] > 0.5 if invert else mask[0] <= 0.5
    return np.where(region[None], np.float32(1.0), color).astype(np.float32)


def merge_character_masks(m_s: np.ndarray, m_r: np.ndarray) -> np.ndarray:
    """Union of sketch and reference foreground masks."""
    m_s, m_r = check_mask(m_s, name="m_s"), check_mask(m_r, name="m_r")
    if m_s.shape != m_r.shape:
        raise ValueError(f"mask shapes differ: {m_s.shape} vs {m_r.shape}")
    return np.maximum(m_s, m_r)


@dataclass
class TPSParams:
    """Control points ``(row, col)`` with their displacements; ``lam`` is the smoothing weight."""

    points: np.ndarray
    displacements: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 2)
        if self.points.shape != self.displacements.shape:
            raise ValueError("need one displacement per control point")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @classmethod
    def grid(cls, image_size: int, k: int = 4, displacements=None, lam: float = 0.0, margin: float = 0.15):
        ticks = np.linspace(margin * (image_size - 1), (1 - margin) * (image_size - 1), k)
        pts = np.stack(np.meshgrid(ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 2)
        disp = np.zeros_like(pts) if displacements is None else displacements
        return cls(pts, disp, lam)

    @classmethod
    def random(cls, image_size: int, rng, k: int = 4, magnitude: float = 3.0, lam: float = 0.0):
        base = cls.grid(image_size, k, lam=lam)
        base.displacements = rng.uniform(-magnitude, magnitude, size=base.points.shape)
        return base

    def inverse(self) -> "TPSParams":
        return TPSParams(self.points.copy(), -self.displacements, self.lam)


def tps_warp(img: np.ndarray, params: TPSParams, order: int = 1) -> np.ndarray:
    """Warp ``img`` so content at a control point moves by its displacement.

    Output pixel ``p`` samples the input at ``p - D(p)`` where ``D`` is the thin
    plate spline (r^2 log r kernel plus affine part) through the control
    displacements. Bilinear resampling, edge-clamped.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError("image must be (C, H, W)")
    if not np.any(params.displacements):
        return img.copy()
    _check_tps_points(params.points, img.shape[1:])
    try:
        field_fn = RBFInterpolator(params.points, params.displacements, kernel="thin_plate_spline",
                                   smoothing=params.lam, degree=1)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ValueError(f"singular TPS system: {exc}") from exc
    H, W = img.shape[1:]
    coords = np.stack(np.mgrid[0:H, 0:W], axis=-1).reshape(-1, 2).astype(np.float64)
    src = (coords - field_fn(coords)).T.reshape(2, H, W)
    out = np.stack([ndimage.map_coordinates(c, src, order=order, mode="nearest") for c in img])
    return out.astype(np.float32)


def _check_tps_points(points: np.ndarray, hw) -> None:
    H, W = hw
    if points.shape[0] < 3:
        raise ValueError("TPS needs at least three control points")
    if np.any(points < 0) or np.any(points[:, 0] > H - 1) or np.any(points[:, 1] > W - 1):
        raise ValueError("control points must lie inside the image")
    if len(np.unique(points, axis=0)) != len(points):
        raise ValueError("singular TPS system: duplicate control points")
    affine = np.column_stack([np.ones(len(points)), points])
    if np.linalg.matrix_rank(affine) < 3:
        raise ValueError("singular TPS system: collinear control points")


# -- training batches --------------------------------------------------------------


@dataclass
class TrainingBatch:
    stage_id: str
    sketch: torch.Tensor  # (B, 1, S, S), cropped
    color: torch.Tensor  # (B, 3, S, S), cropped; the diffusion target
    mask: torch.Tensor  # (B, 1, S, S), cropped sketch mask
    reference: torch.Tensor  # (B, 3, S, S), resized directly, never cropped
    reference_mask: torch.Tensor  # (B, 1, S, S)
    crop_offsets: list
    merged_mask: torch.Tensor | None = None
    reference_bg: torch.Tensor | None = None  # reference with the merged foreground bleached

    def __len__(self):
        return self.color.shape[0]


def resize_target(image_size: int) -> int:
    """Pre-crop resize edge, keeping the 800/768 ratio of the full-scale recipe."""
    return math.ceil(image_size * 800 / 768)


def _resize(arr: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    if t.shape[-2:] == (size, size):
        return t[0]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0].clamp(0, 1)


def make_training_batch(triples: Sequence[ImageTriple], stage_id: str, rng: np.random.Generator,
                        image_size: int) -> TrainingBatch:
    """Resize, crop aligned inputs with one shared window, and resize references directly."""
    if stage_id not in STAGES:
        raise ValueError(f"unknown stage {stage_id!r}")
    big = resize_target(image_size)
    sketches, colors, masks, refs, ref_masks, offsets = [], [], [], [], [], []
    for tri in triples:
        if min(tri.color.shape[1:]) < 1:
            raise ValueError("empty image")
        s, c, m = _resize(tri.sketch, big), _resize(tri.color, big), _resize(tri.mask, big)
        if big < image_size:
            raise ValueError("image smaller than crop")
        top, left = (int(v) for v in rng.integers(0, big - image_size + 1, size=2))
        window = (slice(None), slice(top, top + image_size), slice(left, left + image_size))
        sketches.append(s[window])
        colors.append(c[window])
        masks.append(m[window])
        refs.append(_resize(tri.color, image_size))
        ref_masks.append(_resize(tri.mask, image_size))
        offsets.append((top, left))
    batch = TrainingBatch(stage_id, torch.stack(sketches), torch.stack(colors), torch.stack(masks),
                          torch.stack(refs), torch.stack(ref_masks), offsets)
    if stage_id in ("2", "3"):
        merged = torch.maximum(batch.mask, batch.reference_mask)
        batch.merged_mask = merged
        batch.reference_bg = torch.where(merged > 0.5, torch.ones_like(batch.reference), batch.reference)
    return batch


# -- dataset files -------------------------------------------------------------------


MANIFEST = "manifest.jsonl"


def _save_png(arr: np.ndarray, path: Path) -> None:
    a = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(a[0]) if a.shape[0] == 1 else Image.fromarray(np.ascontiguousarray(a.transpose(1, 2, 0)))
    img.save(path, format="PNG")


def load_png(path, channels: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        a = np.asarray(img, dtype=np.float32) / 255.0
    return a[None] if channels == 1 else a.transpose(2, 0, 1).copy()


def save_png(arr: np.ndarray, path) -> None:
    _save_png(arr, Path(path))


def triple_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_triples(count: int, seed: int, image_size: int = 64) -> list[ImageTriple]:
    return [
        gen_synthetic_triple(random_scene_spec(triple_seed(seed, i), image_size), id=f"{i:05d}")
        for i in range(count)
    ]


def write_dataset(triples: Sequence[ImageTriple], out_dir) -> Path:
    """Write PNGs plus a line-delimited manifest ordered by id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for tri in sorted(triples, key=lambda t: t.id):
        rec = {"id": tri.id}
        for kind in ("sketch", "color", "mask"):
            name = f"{tri.id}_{kind}.png"
            _save_png(getattr(tri, kind), out / name)
            rec[f"{kind}_path"] = name
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def read_dataset(data_dir) -> list[ImageTriple]:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    triples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        triples.append(ImageTriple(
            sketch=load_png(root / rec["sketch_path"], 1),
            color=load_png(root / rec["color_path"], 3),
            mask=load_png(root / rec["mask_path"], 1),
            id=rec["id"],
        ))
    return triples
