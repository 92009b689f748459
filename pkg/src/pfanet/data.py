"""Synthetic scenes, the KITTI-style PNG loader, augmentation and batching.

Dataset directories follow ``<root>/rgb/<id>.png`` and ``<root>/depth/<id>.png``
with newline-separated id lists in ``train.txt`` / ``val.txt``. Depth PNGs are
16-bit grayscale holding ``round(meters * 256)``; 0 marks a missing value.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0
KITTI_MAX_DEPTH = 80.0


class DatasetError(Exception):
    pass


class UnreadableImageError(DatasetError):
    pass


class BitDepthError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


@dataclass
class DepthSample:
    rgb: np.ndarray    # 3 x H x W in [0, 1]
    depth: np.ndarray  # 1 x H x W meters, 0 where unknown
    mask: np.ndarray   # 1 x H x W bool
    id: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


# -- synthetic scenes -------------------------------------------------------


@dataclass
class SynthSceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 128
    min_objects: int = 2
    max_objects: int = 5
    min_depth: float = 3.0
    max_depth: float = 60.0
    invalid_fraction: float = 0.0
    shapes: tuple = ("rectangle", "circle")


def _shade(depth: np.ndarray, spec: SynthSceneSpec) -> np.ndarray:
    # brightness falls off with log depth, so intensity carries depth information
    t = (np.log(depth) - math.log(spec.min_depth)) / (math.log(spec.max_depth) - math.log(spec.min_depth))
    return 1.0 - 0.75 * np.clip(t, 0.0, 1.0)


def generate_synth(spec: SynthSceneSpec) -> DepthSample:
    """Render a layered scene: a perspective ground plane plus occluders.

    Depth on the empty plane is constant along each row and grows strictly
    from the bottom row (``min_depth``) to the top row (``max_depth``).
    Occluders are fronto-parallel rectangles or discs painted far-to-near.
    """
    h, w = spec.height, spec.width
    if h % 32 or w % 32:
        raise ValueError(f"synthetic image size {h}x{w} must be divisible by 32")
    if not 0 < spec.min_depth < spec.max_depth <= KITTI_MAX_DEPTH:
        raise ValueError(f"bad depth range [{spec.min_depth}, {spec.max_depth}]")
    if spec.min_objects < 0 or spec.max_objects < spec.min_objects:
        raise ValueError("bad object count range")
    rng = np.random.default_rng(spec.seed)

    rows = np.arange(h, dtype=np.float64)
    # inverse depth linear in the row index, as for a plane seen in perspective
    inv = 1 / spec.max_depth + (1 / spec.min_depth - 1 / spec.max_depth) * rows / (h - 1)
    depth = np.repeat((1 / inv)[:, None], w, axis=1)
    ground = np.array([0.45, 0.55, 0.35]) + rng.uniform(-0.1, 0.1, 3)
    albedo = np.broadcast_to(ground[:, None, None], (3, h, w)).copy()
    stripes = 0.85 + 0.15 * ((np.arange(h) // 4) % 2)
    albedo *= stripes[None, :, None]

    yy, xx = np.mgrid[0:h, 0:w]
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for _ in range(count):
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        z = float(np.exp(rng.uniform(math.log(spec.min_depth), math.log(spec.max_depth))))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        # nearer objects look bigger
        size = float(np.clip(3.0 * h / z, 3, h / 2))
        color = rng.uniform(0.3, 1.0, 3)
        objects.append((z, kind, cy, cx, size, color))
    for z, kind, cy, cx, size, color in sorted(objects, key=lambda o: -o[0]):
        if kind == "rectangle":
            region = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 1.4 * size)
        elif kind == "circle":
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
        else:
            raise ValueError(f"unknown shape {kind!r}")
        region &= depth > z
        depth[region] = z
        albedo[:, region] = color[:, None]

    rgb = np.clip(albedo * _shade(depth, spec)[None], 0.0, 1.0)
    mask = np.ones((h, w), dtype=bool)
    if spec.invalid_fraction > 0:
        mask &= rng.random((h, w)) >= spec.invalid_fraction
    depth = np.where(mask, depth, 0.0)
    return DepthSample(rgb, depth[None], mask[None], id=f"synth_{spec.seed:06d}")


def synth_dataset(spec: SynthSceneSpec, count: int) -> list[DepthSample]:
    """``count`` scenes with seeds spec.seed, spec.seed + 1, ..."""
    return [generate_synth(replace(spec, seed=spec.seed + i)) for i in range(count)]


# -- PNG files --------------------------------------------------------------


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise UnreadableImageError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise UnreadableImageError(f"{path}: {exc}") from None
    return img


def load_depth_png(path) -> tuple[np.ndarray, np.ndarray]:
    img = _open(path)
    if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise BitDepthError(f"{path}: depth PNG must be 16-bit grayscale, got mode {img.mode}")
    raw = np.array(img, dtype=np.int64)
    if img.mode == "I" and (raw.min() < 0 or raw.max() > 65535):
        raise BitDepthError(f"{path}: values outside the 16-bit range")
    depth = raw.astype(np.float64) / DEPTH_SCALE
    return depth, raw > 0


def load_rgb_png(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("RGB", "RGBA", "L"):
        raise BitDepthError(f"{path}: expected an 8-bit RGB image, got mode {img.mode}")
    return np.array(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_kitti_sample(rgb_path, depth_path, sample_id: str | None = None) -> DepthSample:
    rgb = load_rgb_png(rgb_path)
    depth, mask = load_depth_png(depth_path)
    if rgb.shape[1:] != depth.shape:
        raise SizeMismatchError(
            f"{rgb_path} is {rgb.shape[1]}x{rgb.shape[2]} but {depth_path} is "
            f"{depth.shape[0]}x{depth.shape[1]}")
    return DepthSample(rgb, depth[None], mask[None], id=sample_id or Path(rgb_path).stem)


def save_depth_png(path, depth: np.ndarray, mask: np.ndarray | None = None) -> None:
    depth = np.asarray(depth, dtype=np.float64).reshape(depth.shape[-2:])
    raw = np.clip(np.rint(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    if mask is not None:
        raw[~np.asarray(mask, bool).reshape(raw.shape)] = 0
    Image.fromarray(raw).save(path)


def save_rgb_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_sample(root, sample: DepthSample) -> None:
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    save_rgb_png(root / "rgb" / f"{sample.id}.png", sample.rgb)
    save_depth_png(root / "depth" / f"{sample.id}.png", sample.depth, sample.mask)


def read_split(root, split: str | None = None) -> list[str]:
    """Ids from ``<split>.txt``; without a split, every PNG under ``rgb/``."""
    root = Path(root)
    if split:
        path = root / f"{split}.txt"
        if not path.exists():
            raise DatasetError(f"split file {path} not found")
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]
    return sorted(p.stem for p in (root / "rgb").glob("*.png"))


def load_dataset(root, split: str | None = None) -> list[DepthSample]:
    root = Path(root)
    ids = read_split(root, split)
    if not ids:
        raise DatasetError(f"no samples found under {root}")
    return [load_kitti_sample(root / "rgb" / f"{i}.png", root / "depth" / f"{i}.png", i)
            for i in ids]


# -- augmentation -----------------------------------------------------------


@dataclass
class AugmentConfig:
    rotation_deg: float = 2.5
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    color: float = 0.1
    crop_height: int = 64
    crop_width: int = 128
    random_crop: bool = True

    @classmethod
    def identity(cls, crop_height: int, crop_width: int) -> AugmentConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, crop_height, crop_width, random_crop=False)


def rotation_source(h: int, w: int, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates (row, col) that each output pixel samples from."""
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    # inverse map: rotate output offsets by -theta
    return c * dy - s * dx + cy, s * dy + c * dx + cx


def rotate(sample: DepthSample, angle_deg: float) -> DepthSample:
    """Rotate about the image centre: bilinear RGB, nearest depth and mask.

    Output pixels whose nearest source lies outside the frame become invalid.
    """
    h, w = sample.size
    sy, sx = rotation_source(h, w, angle_deg)
    ny, nx = np.floor(sy + 0.5).astype(int), np.floor(sx + 0.5).astype(int)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    nyc, nxc = np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)
    mask = sample.mask[0][nyc, nxc] & inside
    depth = np.where(mask, sample.depth[0][nyc, nxc], 0.0)

    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    rgb = np.zeros_like(sample.rgb)
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = sample.rgb[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        rgb += np.where(ok, wt, 0.0)[None] * vals
    return DepthSample(rgb, depth[None], mask[None], sample.id)


def hflip(sample: DepthSample) -> DepthSample:
    return DepthSample(sample.rgb[:, :, ::-1].copy(), sample.depth[:, :, ::-1].copy(),
                       sample.mask[:, :, ::-1].copy(), sample.id)


def photometric(rgb: np.ndarray, brightness: float, contrast: float,
                color: np.ndarray) -> np.ndarray:
    out = rgb * brightness
    gray = out.mean()
    out = out * contrast + gray * (1 - contrast)
    out = out * np.asarray(color)[:, None, None]
    return np.clip(out, 0.0, 1.0)


def crop(sample: DepthSample, top: int, left: int, height: int, width: int) -> DepthSample:
    sl = np.s_[:, top:top + height, left:left + width]
    return DepthSample(sample.rgb[sl].copy(), sample.depth[sl].copy(), sample.mask[sl].copy(),
                       sample.id)


def augment(sample: DepthSample, cfg: AugmentConfig, rng: np.random.Generator) -> DepthSample:
    """Rotation, flip, colour jitter and crop; geometry is shared by all maps."""
    h, w = sample.size
    if cfg.crop_height > h or cfg.crop_width > w:
        raise ValueError(f"crop {cfg.crop_height}x{cfg.crop_width} exceeds image {h}x{w}")
    out = sample
    if cfg.rotation_deg > 0:
        out = rotate(out, rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        out = hflip(out)
    if cfg.brightness > 0 or cfg.contrast > 0 or cfg.color > 0:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        col = rng.uniform(1 - cfg.color, 1 + cfg.color, 3)
        out = replace(out, rgb=photometric(out.rgb, b, c, col))
    if cfg.random_crop:
        top = int(rng.integers(h - cfg.crop_height + 1))
        left = int(rng.integers(w - cfg.crop_width + 1))
    else:
        top, left = (h - cfg.crop_height) // 2, (w - cfg.crop_width) // 2
    return crop(out, top, left, cfg.crop_height, cfg.crop_width)


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    ids: list = field(default_factory=list)
    indices: list = field(default_factory=list)


def collate(samples: Sequence[DepthSample], indices: Sequence[int] = ()) -> Batch:
    return Batch(np.stack([s.rgb for s in samples]), np.stack([s.depth for s in samples]),
                 np.stack([s.mask for s in samples]), [s.id for s in samples], list(indices))


def epoch_order(n: int, shuffle_seed: int, epoch: int = 0) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(dataset: Sequence[DepthSample], batch_size: int, shuffle_seed: int,
               epoch: int = 0) -> Iterator[Batch]:
    """Shuffled batches for one epoch; the last batch may be short."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([dataset[i] for i in idx], idx.tolist())


def materialize_synth(out_dir, spec: SynthSceneSpec, count: int) -> list[str]:
    """Write ``count`` synthetic scenes in the dataset directory layout."""
    out_dir = Path(out_dir)
    ids = []
    for sample in synth_dataset(spec, count):
        write_sample(out_dir, sample)
        ids.append(sample.id)
    (out_dir / "train.txt").write_text("\n".join(ids) + "\n")
    return ids
