"""Dataset plumbing: preprocessing, augmentation, synthetic data, disk IO.

Preprocessing follows the training recipe: strip black borders, resize to
the working resolution (bilinear for images, nearest for masks so they
stay binary), then normalize with per-channel train-set statistics.

Clinical data is not redistributable, so :func:`gen_synthetic` builds a
stand-in corpus: low-contrast textured backgrounds with one to three
smooth ovoid blobs whose irregular outlines are stored as polygons, which
makes the ground-truth masks exactly reproducible from the stored
parameters.

Everything is a pure function of its inputs plus an explicit seed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError
from .tensor import bilinear_resize_array

logger = logging.getLogger(__name__)

BLACK_BORDER_THRESHOLD = 16.0 / 255.0
MASK_BINARIZE_LEVEL = 128
MIN_BLOB_AREA_AT_384 = 150.0


@dataclass
class ImageSample:
    """One RGB image in [0,1] with its binary mask."""

    image: np.ndarray  # (1,3,h,w) float32
    mask: np.ndarray   # (h,w) bool
    id: str

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise DataError(f"sample {self.id}: image must be (1,3,h,w), got {self.image.shape}")
        if self.mask.shape != self.image.shape[2:]:
            raise DataError(
                f"sample {self.id}: mask {self.mask.shape} does not match image "
                f"{self.image.shape[2:]}"
            )


@dataclass(frozen=True)
class DatasetStats:
    """Per-channel mean and population std over a train set."""

    mean: tuple
    std: tuple


@dataclass(frozen=True)
class AugmentPolicy:
    """Switches and ranges for the augmentation transforms.

    One affine transform (flips, rotation, shear, skew, zoom about the
    image center) is sampled per call and applied to image and mask
    together; brightness/contrast touch the image only.
    """

    rotate: bool = True
    rotate_deg: tuple = (-25.0, 25.0)
    hflip: bool = True
    hflip_p: float = 0.5
    vflip: bool = True
    vflip_p: float = 0.5
    zoom: bool = True
    zoom_range: tuple = (0.8, 1.2)
    shear: bool = True
    shear_deg: tuple = (-10.0, 10.0)
    skew: bool = True
    skew_deg: tuple = (-10.0, 10.0)
    brightness: bool = True
    brightness_range: tuple = (-0.2, 0.2)
    contrast: bool = True
    contrast_range: tuple = (0.8, 1.2)

    @classmethod
    def none(cls):
        return cls(rotate=False, hflip=False, vflip=False, zoom=False,
                   shear=False, skew=False, brightness=False, contrast=False)


# ---------------------------------------------------------------------------
# preprocessing


def remove_black_border(image, threshold=BLACK_BORDER_THRESHOLD):
    """Strip margin rows/cols whose brightest channel stays below ``threshold``.

    Returns (cropped image, (y0, x0, y1, x1)) with inclusive coordinates so
    the same rectangle can be applied to the mask.
    """
    peak = image.max(axis=(0, 1))
    row_keep = (peak >= threshold).any(axis=1)
    col_keep = (peak >= threshold).any(axis=0)
    if not row_keep.any():
        raise DataError("image is entirely black; nothing to crop to")
    ys = np.nonzero(row_keep)[0]
    xs = np.nonzero(col_keep)[0]
    y0, y1 = int(ys[0]), int(ys[-1])
    x0, x1 = int(xs[0]), int(xs[-1])
    return image[:, :, y0:y1 + 1, x0:x1 + 1], (y0, x0, y1, x1)


def crop_rect(mask, rect):
    """Apply a remove_black_border rectangle to a 2-D mask."""
    y0, x0, y1, x1 = rect
    return mask[y0:y1 + 1, x0:x1 + 1]


def resize_bilinear(image, target_hw):
    """Half-pixel bilinear resize of a (n,c,h,w) float32 array."""
    out = bilinear_resize_array(np.asarray(image, dtype=np.float32), tuple(target_hw))
    return out


def _nearest_axis(src, dst):
    idx = ((np.arange(dst, dtype=np.float64) + 0.5) * src / dst).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_nearest(mask, target_hw):
    """Nearest-neighbor resize of a 2-D mask; output stays boolean."""
    h, w = mask.shape
    th, tw = target_hw
    ys = _nearest_axis(h, th)
    xs = _nearest_axis(w, tw)
    return mask[ys[:, None], xs[None, :]]


def compute_dataset_stats(samples):
    """Exact per-channel mean/population-std over every pixel (float64)."""
    if not samples:
        raise DataError("cannot compute statistics of an empty dataset")
    total = np.zeros(3, np.float64)
    total_sq = np.zeros(3, np.float64)
    count = 0
    for s in samples:
        px = s.image[0].astype(np.float64)
        total += px.sum(axis=(1, 2))
        total_sq += (px * px).sum(axis=(1, 2))
        count += px.shape[1] * px.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return DatasetStats(mean=tuple(mean), std=tuple(np.sqrt(var)))


def normalize(image, stats):
    """(pixel - mean_c) / std_c per channel; zero std is an error."""
    mean = np.asarray(stats.mean, np.float64)
    std = np.asarray(stats.std, np.float64)
    if (std <= 0).any():
        raise DataError(f"normalization std must be positive, got {tuple(std)}")
    out = (image.astype(np.float64) - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
    return out.astype(np.float32)


def save_stats(path, stats):
    text = ("mean=" + ",".join(repr(float(v)) for v in stats.mean) + "\n"
            + "std=" + ",".join(repr(float(v)) for v in stats.std) + "\n")
    Path(path).write_text(text)


def load_stats(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, rest = line.partition("=")
        values[key.strip()] = tuple(float(p) for p in rest.split(","))
    if "mean" not in values or "std" not in values:
        raise DataError(f"stats file {path} is missing mean/std lines")
    return DatasetStats(mean=values["mean"], std=values["std"])


# ---------------------------------------------------------------------------
# augmentation


def _affine_matrix(policy, rng, hw):
    h, w = hw
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    m = np.eye(3)

    def compose(a2x2):
        nonlocal m
        a = np.eye(3)
        a[:2, :2] = a2x2
        m = a @ m

    if policy.hflip and rng.random() < policy.hflip_p:
        compose([[-1, 0], [0, 1]])
    if policy.vflip and rng.random() < policy.vflip_p:
        compose([[1, 0], [0, -1]])
    if policy.rotate:
        theta = math.radians(rng.uniform(*policy.rotate_deg))
        compose([[math.cos(theta), -math.sin(theta)],
                 [math.sin(theta), math.cos(theta)]])
    if policy.shear:
        sh = math.tan(math.radians(rng.uniform(*policy.shear_deg)))
        compose([[1, sh], [0, 1]])
    if policy.skew:
        sk = math.tan(math.radians(rng.uniform(*policy.skew_deg)))
        compose([[1, 0], [sk, 1]])
    if policy.zoom:
        z = rng.uniform(*policy.zoom_range)
        compose([[z, 0], [0, z]])
    center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    uncenter = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    return center @ m @ uncenter


def _sample_bilinear_replicate(image, src_x, src_y):
    h, w = image.shape[2], image.shape[3]
    x = np.clip(src_x, 0.0, w - 1)
    y = np.clip(src_y, 0.0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).astype(np.float32)
    fy = (y - y0).astype(np.float32)
    p00 = image[:, :, y0, x0]
    p01 = image[:, :, y0, x1]
    p10 = image[:, :, y1, x0]
    p11 = image[:, :, y1, x1]
    return ((1 - fy) * (1 - fx) * p00 + (1 - fy) * fx * p01
            + fy * (1 - fx) * p10 + fy * fx * p11)


def augment(sample, policy, seed):
    """Seeded augmentation of one sample; image and mask stay registered."""
    rng = np.random.default_rng(seed)
    h, w = sample.mask.shape
    m = _affine_matrix(policy, rng, (h, w))
    inv = np.linalg.inv(m)

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    image = _sample_bilinear_replicate(sample.image, src_x, src_y)
    nx = np.clip(np.rint(src_x), 0, w - 1).astype(np.int64)
    ny = np.clip(np.rint(src_y), 0, h - 1).astype(np.int64)
    mask = sample.mask[ny, nx]

    if policy.brightness:
        image = image + np.float32(rng.uniform(*policy.brightness_range))
    if policy.contrast:
        c = np.float32(rng.uniform(*policy.contrast_range))
        image = (image - np.float32(0.5)) * c + np.float32(0.5)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return ImageSample(image=image, mask=mask, id=sample.id)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Blob:
    """One synthetic lesion: a closed polygon traced from a wobbly ellipse."""

    vertices: np.ndarray  # (k, 2) float64 columns (x, y)


def rasterize_blobs(blobs, size):
    """Union of even-odd polygon interiors, evaluated at pixel centers."""
    h, w = size
    mask = np.zeros((h, w), bool)
    px, py = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    for blob in blobs:
        verts = blob.vertices
        crossings = np.zeros((h, w), np.int64)
        for i in range(len(verts)):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % len(verts)]
            straddles = (y0 > py) != (y1 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            crossings += straddles & (px < xint)
        mask |= (crossings % 2) == 1
    return mask


def _sample_blob(rng, size, min_area):
    h, w = size
    lo = max(min_area * 1.6, 0.010 * h * w)
    hi = max(min_area * 3.0, 0.045 * h * w)
    target = rng.uniform(lo, hi)
    base_r = math.sqrt(target / math.pi)
    squeeze = rng.uniform(0.7, 1.35)
    rx, ry = base_r * squeeze, base_r / squeeze
    margin = max(rx, ry) * 1.2 + 1
    cx = rng.uniform(min(margin, w / 2), max(w - margin, w / 2))
    cy = rng.uniform(min(margin, h / 2), max(h - margin, h / 2))
    tilt = rng.uniform(0, math.pi)
    amps = rng.uniform(0.02, 0.09, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    for attempt in range(8):
        grow = 1.12 ** attempt
        theta = np.linspace(0, 2 * math.pi, 64, endpoint=False)
        radial = 1.0 + sum(a * np.cos((k + 2) * theta + p)
                           for k, (a, p) in enumerate(zip(amps, phases)))
        ex = rx * grow * radial * np.cos(theta)
        ey = ry * grow * radial * np.sin(theta)
        vx = cx + ex * math.cos(tilt) - ey * math.sin(tilt)
        vy = cy + ex * math.sin(tilt) + ey * math.cos(tilt)
        blob = Blob(vertices=np.stack([vx, vy], axis=1))
        if rasterize_blobs([blob], size).sum() >= min_area:
            return blob
    raise DataError(f"could not fit a blob of area >= {min_area} into {size}")


def _render_image(rng, size, blobs):
    h, w = size
    base = np.array([rng.uniform(0.50, 0.62), rng.uniform(0.30, 0.40),
                     rng.uniform(0.26, 0.34)])
    image = np.tile(base.reshape(3, 1, 1), (1, h, w))
    coarse = rng.uniform(-0.05, 0.05, size=(max(2, h // 8), max(2, w // 8)))
    texture = bilinear_resize_array(
        coarse[None, None].astype(np.float32), (h, w))[0, 0].astype(np.float64)
    image += texture
    image += rng.uniform(-0.015, 0.015, size=(3, h, w))
    for blob in blobs:
        soft = ndimage.gaussian_filter(
            rasterize_blobs([blob], size).astype(np.float64), sigma=1.5)
        tint = np.array([rng.uniform(0.06, 0.14), rng.uniform(-0.01, 0.04),
                         rng.uniform(-0.04, 0.01)])
        image += tint.reshape(3, 1, 1) * soft
    return np.clip(image, 0.0, 1.0).astype(np.float32)[None]


def gen_synthetic_with_scenes(n, size=(64, 64), seed=0):
    """Synthetic dataset plus the blob parameters behind every mask."""
    if n <= 0:
        raise DataError("synthetic dataset size must be positive")
    h, w = size
    min_area = MIN_BLOB_AREA_AT_384 * (h * w) / (384.0 * 384.0)
    rng = np.random.default_rng(seed)
    samples, scenes = [], []
    for i in range(n):
        blobs = [_sample_blob(rng, size, min_area)
                 for _ in range(int(rng.integers(1, 4)))]
        mask = rasterize_blobs(blobs, size)
        image = _render_image(rng, size, blobs)
        samples.append(ImageSample(image=image, mask=mask, id=f"synth_{i:04d}"))
        scenes.append(tuple(blobs))
    return samples, scenes


def gen_synthetic(n, size=(64, 64), seed=0):
    """Synthetic low-contrast blob dataset; deterministic in ``seed``."""
    return gen_synthetic_with_scenes(n, size=size, seed=seed)[0]


# ---------------------------------------------------------------------------
# disk IO


def write_image_png(path, image):
    arr = np.clip(np.rint(image[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_image_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]


def write_mask_png(path, mask):
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= MASK_BINARIZE_LEVEL


def save_dataset(out_dir, samples):
    """Write samples in the images/ + masks/ paired-stem layout."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image_png(out / "images" / f"{s.id}.png", s.image)
        write_mask_png(out / "masks" / f"{s.id}.png", s.mask)


def load_dataset(data_dir, drop_empty=False):
    """Load images/*.png + masks/*.png pairs, sorted by stem.

    ``drop_empty`` removes samples whose mask has no foreground (frames
    with nothing to segment are excluded from training) and logs how many
    were dropped.
    """
    root = Path(data_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{data_dir} must contain images/ and masks/ directories")
    image_stems = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    mask_stems = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    if not image_stems:
        raise DataError(f"no PNG images found under {img_dir}")
    missing = sorted(set(image_stems) ^ set(mask_stems))
    if missing:
        raise DataError(f"unpaired image/mask stems: {', '.join(missing)}")
    samples = []
    for stem in sorted(image_stems):
        image = read_image_png(image_stems[stem])
        mask = read_mask_png(mask_stems[stem])
        if mask.shape != image.shape[2:]:
            raise DataError(
                f"{mask_stems[stem]}: mask {mask.shape} does not match image "
                f"{image.shape[2:]}"
            )
        samples.append(ImageSample(image=image, mask=mask, id=stem))
    if drop_empty:
        kept = [s for s in samples if s.mask.any()]
        dropped = len(samples) - len(kept)
        if dropped:
            logger.info("dropped %d empty-mask samples from %s", dropped, data_dir)
        samples = kept
    return samples
