"""Dataset codecs, preprocessing and the synthetic random-dot stereo generator."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


# ---------------------------------------------------------------- PFM

class PFMError(ValueError):
    pass


class BadMagic(PFMError):
    pass


class TruncatedPayload(PFMError):
    pass


class ZeroScale(PFMError):
    pass


def _header_fields(buf, count):
    # PFM headers are three whitespace-terminated tokens groups; the magic,
    # "W H" and the scale each end with a single newline
    pos, lines = 0, []
    for _ in range(count):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise TruncatedPayload("truncated payload: incomplete header")
        lines.append(buf[pos:end].decode("ascii", errors="replace").strip())
        pos = end + 1
    return lines, pos


def read_pfm(buf: bytes) -> np.ndarray:
    """Decode a single-channel PFM into an (H, W) float32 array, top row first."""
    if not buf.startswith(b"Pf"):
        raise BadMagic(f"bad magic {buf[:2]!r}: expected b'Pf' (single-channel PFM)")
    (magic, dims, scale_s), offset = _header_fields(buf, 3)
    if magic != "Pf":
        raise BadMagic(f"bad magic {magic!r}: expected 'Pf'")
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise PFMError(f"malformed dimension line {dims!r}")
    width, height = int(m.group(1)), int(m.group(2))
    scale = float(scale_s)
    if scale == 0:
        raise ZeroScale("zero scale in PFM header")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = width * height * 4
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise TruncatedPayload(f"truncated payload: need {need} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float32)


def write_pfm(arr) -> bytes:
    """Encode an (H, W) map as little-endian single-channel PFM bytes."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects an (H, W) map, got shape {arr.shape}")
    height, width = arr.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.flipud(arr).astype("<f4").tobytes()


def load_pfm(path) -> np.ndarray:
    return read_pfm(Path(path).read_bytes())


def save_pfm(path, arr):
    Path(path).write_bytes(write_pfm(arr))


# ---------------------------------------------------------------- KITTI 16-bit PNG

KITTI_SCALE = 256.0


def decode_kitti_disparity(pixels):
    """uint16 samples -> (disparity float32, valid bool); stored 0 marks invalid."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint16:
        raise TypeError(f"KITTI disparity maps are 16-bit, got dtype {pixels.dtype}")
    if pixels.ndim != 2:
        raise ValueError(f"KITTI disparity maps are single-channel, got shape {pixels.shape}")
    valid = pixels > 0
    return (pixels.astype(np.float32) / KITTI_SCALE), valid


def encode_kitti_disparity(gt, valid=None):
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    stored = np.clip(np.rint(gt * KITTI_SCALE), 1, 65535)
    return np.where(valid, stored, 0).astype(np.uint16)


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise TypeError(f"{path}: expected a 16-bit grayscale PNG, got mode {im.mode}")
        arr = np.array(im)
    if arr.dtype != np.uint16:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise TypeError(f"{path}: values outside the 16-bit range")
        arr = arr.astype(np.uint16)
    return arr


def write_png16(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint16:
        raise TypeError(f"expected uint16 pixels, got {pixels.dtype}")
    Image.fromarray(pixels).save(path, format="PNG")


def read_rgb8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_rgb8(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- samples

def normalize_image(rgb) -> np.ndarray:
    """8-bit (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise TypeError(f"expected 8-bit image channels, got {rgb.dtype}")
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return (rgb.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def to_uint8(img) -> np.ndarray:
    """Inverse of normalize_image: (3, H, W) [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.left.shape != self.right.shape or self.left.ndim != 3 or self.left.shape[0] != 3:
            raise ValueError(f"left/right must share a (3, H, W) shape, got "
                             f"{self.left.shape} / {self.right.shape}")
        hw = self.left.shape[1:]
        if self.gt.shape != hw or self.valid.shape != hw:
            raise ValueError(f"gt {self.gt.shape} / valid {self.valid.shape} do not match images {hw}")
        if np.any(self.gt < 0):
            raise ValueError("ground-truth disparities must be non-negative")
        self.valid = np.asarray(self.valid, dtype=bool) & (self.gt != 0)

    @property
    def height(self):
        return self.left.shape[1]

    @property
    def width(self):
        return self.left.shape[2]


def random_crop(sample: StereoSample, crop_h: int, crop_w: int, seed=None) -> StereoSample:
    """Apply one random window to all four maps; ``seed`` may be an int or a Generator."""
    H, W = sample.height, sample.width
    if crop_h > H or crop_w > W or crop_h < 1 or crop_w < 1:
        raise ValueError(f"crop {crop_h}x{crop_w} does not fit inside image {H}x{W}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y = int(rng.integers(0, H - crop_h + 1))
    x = int(rng.integers(0, W - crop_w + 1))
    win = (slice(y, y + crop_h), slice(x, x + crop_w))
    return StereoSample(sample.left[:, win[0], win[1]].copy(), sample.right[:, win[0], win[1]].copy(),
                        sample.gt[win].copy(), sample.valid[win].copy())


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    height: int
    width: int
    background_disparity: int
    blocks: list = field(default_factory=list)  # (x, y, w, h, disparity); later blocks on top
    seed: int = 0

    def validate(self):
        for d in [self.background_disparity] + [b[4] for b in self.blocks]:
            if not 0 <= d < self.width:
                raise ValueError(f"disparity {d} must lie in [0, width={self.width})")
        for x, y, w, h, _ in self.blocks:
            if x < 0 or y < 0 or w < 1 or h < 1 or x + w > self.width or y + h > self.height:
                raise ValueError(f"block {(x, y, w, h)} outside {self.height}x{self.width} image")


def generate_synthetic_pair(spec: SynthSpec) -> StereoSample:
    """Random-dot pair with exact integer ground truth: left(x, y) = right(x - d, y)."""
    spec.validate()
    H, W = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    right = rng.integers(0, 256, size=(H, W, 3), dtype=np.uint8)
    filler = rng.integers(0, 256, size=(H, W, 3), dtype=np.uint8)
    gt = np.full((H, W), spec.background_disparity, dtype=np.int64)
    for x, y, w, h, d in spec.blocks:
        gt[y:y + h, x:x + w] = d
    cols = np.arange(W)[None, :] - gt
    valid = (cols >= 0) & (gt > 0)
    rows = np.repeat(np.arange(H)[:, None], W, axis=1)
    left = np.where(valid[..., None], right[rows, np.maximum(cols, 0)], filler)
    gt = np.where(valid, gt, 0).astype(np.float32)
    return StereoSample(normalize_image(left), normalize_image(right), gt, valid)


def random_synth_spec(rng, height, width, max_disparity, seed=None) -> SynthSpec:
    """Background plus one rectangular block at a different disparity."""
    hi = min(max_disparity - 1, width - 1)
    bg = int(rng.integers(1, max(2, hi // 2)))
    d = int(rng.integers(bg + 2, hi + 1)) if bg + 2 <= hi else hi
    bh = int(rng.integers(height // 4, height // 2 + 1))
    bw = int(rng.integers(width // 4, width // 2 + 1))
    y = int(rng.integers(0, height - bh + 1))
    x = int(rng.integers(0, width - bw + 1))
    s = int(rng.integers(0, 2 ** 63)) if seed is None else seed
    return SynthSpec(height, width, bg, [(x, y, bw, bh, d)], s)


def synthetic_dataset(count, height, width, max_disparity, seed=0):
    rng = np.random.default_rng(seed)
    return [generate_synthetic_pair(random_synth_spec(rng, height, width, max_disparity))
            for _ in range(count)]


# ---------------------------------------------------------------- directory layout

def sample_paths(root, index):
    root = Path(root)
    stem = f"{index:04d}"
    return root / "left" / f"{stem}.png", root / "right" / f"{stem}.png", root / "disp" / f"{stem}.pfm"


def save_dataset(root, samples):
    root = Path(root)
    for sub in ("left", "right", "disp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        lp, rp, dp = sample_paths(root, i)
        write_rgb8(lp, to_uint8(s.left))
        write_rgb8(rp, to_uint8(s.right))
        save_pfm(dp, np.where(s.valid, s.gt, 0))


def load_sample(root, index) -> StereoSample:
    lp, rp, dp = sample_paths(root, index)
    left = normalize_image(read_rgb8(lp))
    right = normalize_image(read_rgb8(rp))
    if dp.exists():
        gt = load_pfm(dp)
        gt = np.where(np.isfinite(gt) & (gt > 0), gt, 0).astype(np.float32)
        valid = gt > 0
    else:
        gt, valid = decode_kitti_disparity(read_png16(dp.with_suffix(".png")))
    return StereoSample(left, right, gt, valid)


def dataset_indices(root):
    return sorted(int(p.stem) for p in (Path(root) / "left").glob("*.png") if p.stem.isdigit())


def load_dataset(root):
    idx = dataset_indices(root)
    if not idx:
        raise FileNotFoundError(f"no samples under {Path(root) / 'left'}")
    return [load_sample(root, i) for i in idx]


def epoch_order(n, epoch, seed):
    """Sample order for one epoch: a deterministic function of (epoch, seed)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def split_indices(n, train_fraction=0.8, seed=0):
    """Seeded train/validation index split (e.g. 80/20 for small real datasets)."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])
