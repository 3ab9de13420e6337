"""Synthetic single-object detection data and a plain on-disk layout.

Each image holds one high-contrast rectangle or ellipse over smooth textured
noise. Object area ratios (box area / image area) follow a log-normal fitted
so that 31% of objects fall below 1% of the image and 91% below 9%.

On disk a dataset is a directory of ``<id>.ppm`` (binary P6, 8-bit) images,
each paired with ``<id>.txt`` holding one line ``x_min y_min x_max y_max`` in
normalized coordinates.
"""
import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .boxes import Box


class DataError(ValueError):
    pass


# log-normal fit of the area ratio through P(r < 0.01) = 0.31, P(r < 0.09) = 0.91
RATIO_LOG_MEAN = -4.011959
RATIO_LOG_STD = 1.196351


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 500
    image_hw: tuple = (160, 320)
    ratio_log_mean: float = RATIO_LOG_MEAN
    ratio_log_std: float = RATIO_LOG_STD
    ratio_max: float = 0.5
    min_side: int = 4
    aspect_range: tuple = (0.5, 2.0)
    fixed_ratio: Optional[float] = None
    noise_level: float = 0.06
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        object.__setattr__(self, "aspect_range", tuple(float(v) for v in self.aspect_range))
        if self.count < 0:
            raise DataError("dataset count must be non-negative")
        if self.fixed_ratio is not None and not 0 < self.fixed_ratio <= 1:
            raise DataError(f"object larger than image: area ratio {self.fixed_ratio} not in (0, 1]")
        if min(self.image_hw) < self.min_side:
            raise DataError(f"image {self.image_hw} smaller than minimum object side {self.min_side}")

    def to_dict(self):
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        d["aspect_range"] = list(self.aspect_range)
        return d


@dataclass
class Dataset:
    """``images`` is uint8 (N, 3, H, W); ``boxes`` is float64 (N, 4) normalized corners."""

    images: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.boxes):
            raise DataError(f"{len(self.images)} images but {len(self.boxes)} boxes")

    def __len__(self):
        return len(self.boxes)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def float_images(self, idx=None, dtype=np.float64):
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(dtype) / 255.0

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], self.boxes[idx])

    def split(self, val_fraction=0.2, seed=0):
        """Disjoint, exhaustive train/validation split keyed on (seed, index) hashes."""
        val = np.array([_unit_hash(seed, i) < val_fraction for i in range(len(self))], dtype=bool)
        return self.subset(np.flatnonzero(~val)), self.subset(np.flatnonzero(val))


def _unit_hash(seed, i):
    h = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2**64


def _sample_rng(spec, index):
    return np.random.default_rng([spec.seed, index])


def sample_box_pixels(spec: DatasetSpec, rng):
    """Object size and placement in pixels: ``(x0, y0, w, h)``."""
    H, W = spec.image_hw
    lo, hi = (math.log(a) for a in spec.aspect_range)
    if spec.fixed_ratio is not None:
        # keep the image aspect so the ratio survives rounding as closely as possible
        w = int(round(math.sqrt(spec.fixed_ratio) * W))
        h = int(round(math.sqrt(spec.fixed_ratio) * H))
        if w > W or h > H:
            raise DataError(f"object {w}x{h} larger than image {W}x{H}")
    else:
        r = math.exp(rng.normal(spec.ratio_log_mean, spec.ratio_log_std))
        r = min(r, spec.ratio_max)
        a = math.exp(rng.uniform(lo, hi))
        w = int(round(math.sqrt(r * H * W * a)))
        h = int(round(math.sqrt(r * H * W / a)))
        w = min(max(w, spec.min_side), W)
        h = min(max(h, spec.min_side), H)
    x0 = int(rng.integers(0, W - w + 1))
    y0 = int(rng.integers(0, H - h + 1))
    return x0, y0, w, h


def _texture(rng, H, W, noise):
    coarse = rng.uniform(0.15, 0.55, size=(3, max(1, H // 16) + 1, max(1, W // 16) + 1))
    ys = np.linspace(0, coarse.shape[1] - 1, H)
    xs = np.linspace(0, coarse.shape[2] - 1, W)
    y0 = np.floor(ys).astype(int).clip(0, coarse.shape[1] - 2) if coarse.shape[1] > 1 else np.zeros(H, int)
    x0 = np.floor(xs).astype(int).clip(0, coarse.shape[2] - 2) if coarse.shape[2] > 1 else np.zeros(W, int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    y1 = np.minimum(y0 + 1, coarse.shape[1] - 1)
    x1 = np.minimum(x0 + 1, coarse.shape[2] - 1)
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x1]
    c10 = coarse[:, y1][:, :, x0]
    c11 = coarse[:, y1][:, :, x1]
    smooth = (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy
    return smooth + rng.normal(0.0, noise, size=(3, H, W))


def render_sample(spec: DatasetSpec, index):
    """Image (uint8, 3 x H x W) and its tight normalized box for sample ``index``."""
    rng = _sample_rng(spec, index)
    H, W = spec.image_hw
    x0, y0, w, h = sample_box_pixels(spec, rng)
    img = _texture(rng, H, W, spec.noise_level)
    yy, xx = np.mgrid[y0:y0 + h, x0:x0 + w]
    if rng.random() < 0.5:
        mask = np.ones((h, w), dtype=bool)
    else:
        cy, cx = y0 + h / 2, x0 + w / 2
        mask = ((xx + 0.5 - cx) / (w / 2)) ** 2 + ((yy + 0.5 - cy) / (h / 2)) ** 2 <= 1.0
    # saturated colour with one bright channel keeps the object well apart from the background
    color = rng.uniform(0.0, 0.25, size=3)
    color[int(rng.integers(0, 3))] = rng.uniform(0.85, 1.0)
    region = img[:, y0:y0 + h, x0:x0 + w]
    region[:, mask] = color[:, None] + rng.normal(0.0, spec.noise_level / 2, size=(3, int(mask.sum())))
    img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = (
        (x0 + cols[0]) / W,
        (y0 + rows[0]) / H,
        (x0 + cols[-1] + 1) / W,
        (y0 + rows[-1] + 1) / H,
    )
    return img, box


def generate(spec: DatasetSpec):
    H, W = spec.image_hw
    images = np.empty((spec.count, 3, H, W), dtype=np.uint8)
    boxes = np.empty((spec.count, 4), dtype=np.float64)
    for i in range(spec.count):
        images[i], boxes[i] = render_sample(spec, i)
    return Dataset(images, boxes)


def area_ratios(spec: DatasetSpec, count=None):
    """Box area ratios the generator would produce, without rendering pixels."""
    H, W = spec.image_hw
    out = np.empty(spec.count if count is None else count)
    for i in range(len(out)):
        _, _, w, h = sample_box_pixels(spec, _sample_rng(spec, i))
        out[i] = w * h / (H * W)
    return out


# --- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    jitter: float = 0.1
    crop: float = 0.0

    def to_dict(self):
        return asdict(self)


def augment(images, boxes, rng, cfg: AugmentConfig):
    """Random flip, brightness/contrast jitter and crop-resize on a float batch."""
    images = images.copy()
    boxes = boxes.copy()
    B, _, H, W = images.shape
    if cfg.flip:
        flip = rng.random(B) < 0.5
        images[flip] = images[flip][..., ::-1]
        boxes[flip, 0], boxes[flip, 2] = 1 - boxes[flip, 2], 1 - boxes[flip, 0]
    if cfg.jitter:
        gain = 1 + rng.uniform(-cfg.jitter, cfg.jitter, size=(B, 3, 1, 1))
        bias = rng.uniform(-cfg.jitter, cfg.jitter, size=(B, 1, 1, 1)) / 2
        images = np.clip(images * gain + bias, 0.0, 1.0)
    if cfg.crop:
        for i in range(B):
            images[i], boxes[i] = _crop_resize(images[i], boxes[i], rng, cfg.crop)
    return images, boxes


def _crop_resize(img, box, rng, amount):
    _, H, W = img.shape
    # crop window always contains the object so the single-object contract holds
    s = 1 - rng.uniform(0, amount)
    cw, ch = s * W, s * H
    x_lo = max(0.0, box[2] * W - cw)
    x_hi = min(box[0] * W, W - cw)
    y_lo = max(0.0, box[3] * H - ch)
    y_hi = min(box[1] * H, H - ch)
    if x_lo > x_hi or y_lo > y_hi:
        return img, box
    cx0 = rng.uniform(x_lo, x_hi)
    cy0 = rng.uniform(y_lo, y_hi)
    ys = np.clip((cy0 + (np.arange(H) + 0.5) * ch / H).astype(int), 0, H - 1)
    xs = np.clip((cx0 + (np.arange(W) + 0.5) * cw / W).astype(int), 0, W - 1)
    out = img[:, ys][:, :, xs]
    nb = np.array(
        [(box[0] * W - cx0) / cw, (box[1] * H - cy0) / ch, (box[2] * W - cx0) / cw, (box[3] * H - cy0) / ch]
    )
    return out, np.clip(nb, 0.0, 1.0)


# --- PPM codec and directory layout ---------------------------------------------

def write_ppm(path, img):
    """Binary P6, 8-bit; ``img`` is uint8 (3, H, W)."""
    _, H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DataError(f"{path}: only 8-bit binary P6 images are supported")
    W, H = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data, dtype=np.uint8, count=H * W * 3, offset=pos)
    return raw.reshape(H, W, 3).transpose(2, 0, 1).copy()


def save_dataset(ds: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_ppm(path / f"{i:06d}.ppm", ds.images[i])
        (path / f"{i:06d}.txt").write_text(" ".join(repr(float(v)) for v in ds.boxes[i]) + "\n")


def read_box_file(path):
    lines = [l for l in Path(path).read_text().splitlines()]
    content = [(n, l) for n, l in enumerate(lines, 1) if l.strip() and not l.lstrip().startswith("#")]
    if len(content) != 1:
        raise DataError(f"{path}: expected exactly one box line, found {len(content)}")
    n, line = content[0]
    parts = line.split()
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise DataError(f"{path}:{n}: box values must be numbers, got {line!r}") from None
    if len(vals) != 4:
        raise DataError(f"{path}:{n}: expected 4 values 'x_min y_min x_max y_max', got {len(vals)}")
    try:
        Box(*vals)
    except ValueError as e:
        raise DataError(f"{path}:{n}: {e}") from None
    return vals


def load_dataset(path):
    """Load ``<id>.ppm`` / ``<id>.txt`` pairs sorted by id; an empty directory gives an empty dataset."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    images, boxes = [], []
    for img_path in sorted(path.glob("*.ppm")):
        box_path = img_path.with_suffix(".txt")
        if not box_path.exists():
            raise DataError(f"{img_path}: missing box file {box_path.name}")
        images.append(read_ppm(img_path))
        boxes.append(read_box_file(box_path))
    if not images:
        return Dataset(np.zeros((0, 3, 1, 1), np.uint8), np.zeros((0, 4)))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{path}: images have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(boxes, dtype=np.float64))
