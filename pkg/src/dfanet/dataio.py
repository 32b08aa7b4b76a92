"""Image/label files, the synthetic toy dataset, augmentation and checkpoints."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ops import IGNORE_LABEL, interp_matrix
from .tensor import DTYPE_FROM_CODE, DTYPES

DEFAULT_MEAN = (0.485, 0.456, 0.406)

# Mask colors for classes 0..18; classes beyond wrap around.
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
], dtype=np.uint8)
IGNORE_COLOR = (0, 0, 0)


class ParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --- PPM / PGM -------------------------------------------------------------

def _read_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise ParseError(f"expected magic {magic!r}, found {buf[:2]!r}", 0)
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("expected a decimal header field", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("header must end with one whitespace byte", pos)
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"bad geometry {width}x{height}", pos)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", pos)
    return width, height, pos + 1


def parse_ppm(buf: bytes) -> np.ndarray:
    """P6 bytes -> uint8 array (H, W, 3)."""
    w, h, off = _read_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - off < need:
        raise ParseError(f"payload truncated: {len(buf) - off} of {need} bytes", len(buf))
    return np.frombuffer(buf, np.uint8, need, off).reshape(h, w, 3).copy()


def parse_pgm(buf: bytes) -> np.ndarray:
    """P5 bytes -> uint8 array (H, W)."""
    w, h, off = _read_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise ParseError(f"payload truncated: {len(buf) - off} of {need} bytes", len(buf))
    return np.frombuffer(buf, np.uint8, need, off).reshape(h, w).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, np.uint8).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, np.uint8).tobytes()


def load_image_ppm(path) -> np.ndarray:
    """Read a P6 file as float32 (1, 3, H, W) in [0, 1]."""
    rgb = parse_ppm(Path(path).read_bytes())
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def save_image_ppm(image: np.ndarray, path) -> None:
    """Write a (1,3,H,W) or (3,H,W) array in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    rgb = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(encode_ppm(rgb))


def load_labels_pgm(path, num_classes: Optional[int] = None) -> np.ndarray:
    """Read a P5 label map as int64 (1, H, W)."""
    labels = parse_pgm(Path(path).read_bytes()).astype(np.int64)
    if num_classes is not None:
        bad = (labels != IGNORE_LABEL) & (labels >= num_classes)
        if bad.any():
            y, x = (int(v) for v in np.argwhere(bad)[0])
            raise DataError(f"{path}: label {labels[y, x]} at ({y}, {x}) exceeds {num_classes - 1}")
    return labels[None]


def save_labels_pgm(labels: np.ndarray, path) -> None:
    lab = np.asarray(labels)
    if lab.ndim == 3:
        lab = lab[0]
    Path(path).write_bytes(encode_pgm(lab.astype(np.uint8)))


def palette_colors(num_classes: int) -> np.ndarray:
    return PALETTE[np.arange(num_classes) % len(PALETTE)]


def colorize(classes: np.ndarray, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.ndim == 3:
        classes = classes[0]
    pal = palette_colors(num_classes)
    rgb = np.zeros(classes.shape + (3,), np.uint8)
    valid = classes != IGNORE_LABEL
    rgb[valid] = pal[classes[valid]]
    rgb[~valid] = IGNORE_COLOR
    return rgb


def save_mask_ppm(classes: np.ndarray, path, num_classes: int) -> None:
    Path(path).write_bytes(encode_ppm(colorize(classes, num_classes)))


def load_mask_ppm(path, num_classes: int) -> np.ndarray:
    """Invert :func:`save_mask_ppm`; unknown colors map to the ignore label."""
    rgb = parse_ppm(Path(path).read_bytes()).astype(np.int64)
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(key.shape, IGNORE_LABEL, np.int64)
    pal = palette_colors(num_classes).astype(np.int64)
    # First class wins when the palette wraps.
    for k in range(num_classes - 1, -1, -1):
        out[key == ((pal[k, 0] << 16) | (pal[k, 1] << 8) | pal[k, 2])] = k
    return out


# --- samples and the toy dataset ---------------------------------------------

@dataclass
class SegSample:
    image: np.ndarray   # float32 (1, 3, H, W)
    labels: np.ndarray  # int64 (1, H, W)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise DataError(f"image must be (1,3,H,W), got {self.image.shape}")
        if self.labels.shape != (1,) + self.image.shape[2:]:
            raise DataError(f"labels {self.labels.shape} do not match image {self.image.shape}")


# Base colors for toy classes; background first.
TOY_COLORS = np.array([
    (0.15, 0.15, 0.15), (0.90, 0.20, 0.20), (0.20, 0.80, 0.25), (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20), (0.85, 0.30, 0.90), (0.20, 0.85, 0.90), (0.95, 0.60, 0.25),
])
TOY_NOISE = 0.05


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_toy_sample(seed: int, index: int, size: int, num_classes: int) -> SegSample:
    if not 2 <= num_classes <= len(TOY_COLORS):
        raise DataError(f"toy datasets support 2..{len(TOY_COLORS)} classes, got {num_classes}")
    rng = sample_rng(seed, index)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    while True:
        labels = np.zeros((h, w), np.int64)
        for cls in rng.permutation(np.arange(1, num_classes)):
            if rng.random() < 0.5:
                rh, rw = rng.integers(size // 4, size // 2 + 1, size=2)
                y0 = rng.integers(0, h - rh + 1)
                x0 = rng.integers(0, w - rw + 1)
                labels[y0:y0 + rh, x0:x0 + rw] = cls
            else:
                r = rng.uniform(size / 8, size / 4)
                cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
                labels[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r] = cls
        if len(np.unique(labels)) == num_classes:
            break
    jitter = rng.uniform(-0.08, 0.08, size=(num_classes, 3))
    colors = np.clip(TOY_COLORS[:num_classes] + jitter, 0, 1)
    img = colors[labels] + rng.normal(0.0, TOY_NOISE, size=(h, w, 3))
    img = np.clip(img, 0, 1).astype(np.float32).transpose(2, 0, 1)[None]
    return SegSample(np.ascontiguousarray(img), labels[None])


def generate_toy_dataset(seed: int, count: int, size: int, num_classes: int) -> List[SegSample]:
    return [generate_toy_sample(seed, i, size, num_classes) for i in range(count)]


def quantize(sample: SegSample) -> SegSample:
    """Round-trip an image through 8-bit storage, as written to disk."""
    img = np.rint(np.clip(sample.image, 0, 1) * 255.0).astype(np.float32) / 255.0
    return SegSample(img, sample.labels)


def write_dataset(samples: Sequence[SegSample], root, num_classes: int) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_image_ppm(s.image, root / "images" / f"{i:04d}.ppm")
        save_labels_pgm(s.labels, root / "labels" / f"{i:04d}.pgm")
    (root / "meta.txt").write_text(f"num_classes={num_classes}\ncount={len(samples)}\n")


def read_meta(root) -> Dict[str, str]:
    path = Path(root) / "meta.txt"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_dataset(root, num_classes: Optional[int] = None) -> List[SegSample]:
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise FileNotFoundError(f"{root} lacks images/ and labels/ directories")
    if num_classes is None and "num_classes" in read_meta(root):
        num_classes = int(read_meta(root)["num_classes"])
    samples = []
    for img_path in sorted(img_dir.glob("*.ppm")):
        lab_path = lab_dir / (img_path.stem + ".pgm")
        if not lab_path.exists():
            raise FileNotFoundError(f"missing labels for {img_path.name}")
        samples.append(SegSample(load_image_ppm(img_path), load_labels_pgm(lab_path, num_classes)))
    if not samples:
        raise FileNotFoundError(f"no images in {img_dir}")
    return samples


# --- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: Tuple[int, int]
    hflip_prob: float = 0.5
    scale_range: Tuple[float, float] = (0.75, 1.75)
    mean: Tuple[float, float, float] = DEFAULT_MEAN

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid scale range {self.scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if min(self.crop) <= 0:
            raise ValueError(f"crop extents must be positive: {self.crop}")

    def validate_scale(self, scale: float) -> float:
        lo, hi = self.scale_range
        if not lo <= scale <= hi:
            raise ValueError(f"scale {scale} outside configured range [{lo}, {hi}]")
        return scale


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, _, h, w = img.shape
    mh = interp_matrix(h, out_h, img.dtype.name)
    mw = interp_matrix(w, out_w, img.dtype.name)
    return np.matmul(np.matmul(mh, img), mw.T)


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with half-pixel centers."""
    _, h, w = labels.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[:, ys][:, :, xs]


def subtract_mean(img: np.ndarray, mean) -> np.ndarray:
    return (img - np.asarray(mean, img.dtype).reshape(1, 3, 1, 1)).astype(img.dtype)


def hflip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[..., ::-1].copy(), sample.labels[..., ::-1].copy())


def augment(sample: SegSample, cfg: AugmentConfig, rng: np.random.Generator,
            scale: Optional[float] = None) -> SegSample:
    """Mean subtraction, random flip, random rescale, random crop (padding with
    zero image / ignore labels when the rescaled sample is smaller)."""
    img = subtract_mean(sample.image, cfg.mean)
    labels = sample.labels
    if rng.random() < cfg.hflip_prob:
        img, labels = img[..., ::-1], labels[..., ::-1]
    lo, hi = cfg.scale_range
    s = cfg.validate_scale(scale) if scale is not None else (lo if lo == hi else rng.uniform(lo, hi))
    _, _, h, w = img.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        img = resize_image(np.ascontiguousarray(img), nh, nw)
        labels = resize_labels(labels, nh, nw)
    ch, cw = cfg.crop
    ph, pw = max(0, ch - nh), max(0, cw - nw)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)))
        labels = np.pad(labels, ((0, 0), (0, ph), (0, pw)), constant_values=IGNORE_LABEL)
    y0 = int(rng.integers(0, img.shape[2] - ch + 1))
    x0 = int(rng.integers(0, img.shape[3] - cw + 1))
    img = np.ascontiguousarray(img[:, :, y0:y0 + ch, x0:x0 + cw], dtype=np.float32)
    labels = np.ascontiguousarray(labels[:, y0:y0 + ch, x0:x0 + cw])
    return SegSample(img, labels)


def pad_to_multiple(img: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Zero-pad (bottom/right) so both extents divide ``multiple``."""
    _, _, h, w = img.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return img, (h, w)


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DFAC"
CKPT_VERSION = 1
_ENTRY = struct.Struct("<B4I")


def _config_text(items) -> bytes:
    lines = []
    for k, v in items:
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"config entry {k!r} cannot be serialized")
        lines.append(f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def model_state(model) -> List[Tuple[str, np.ndarray]]:
    """Parameters then batch-norm running statistics, as rank-4 arrays."""
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for name, buf in model.named_buffers():
        entries.append((name, buf.reshape(1, -1, 1, 1)))
    return entries


def checkpoint_bytes(model, extra: Optional[Dict[str, str]] = None) -> bytes:
    items = list(model.spec.config_items())
    items.append(("seed", str(model.seed)))
    for k, v in (extra or {}).items():
        items.append((k, v))
    cfg = _config_text(items)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, arr in model_state(model):
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_ENTRY.pack(DTYPES[arr.dtype], *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model, path, extra: Optional[Dict[str, str]] = None) -> None:
    data = checkpoint_bytes(model, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(buf: bytes):
    """Validate and split a checkpoint into ``(config dict, {name: array})``."""
    if len(buf) < 16:
        raise CheckpointError("checkpoint too short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC32 mismatch: checkpoint is corrupted")
    if body[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", body, 8)
    pos = 12 + cfg_len
    if pos > len(body):
        raise CheckpointError("config block overruns file")
    config = _parse_config(body[12:pos].decode("utf-8"))
    tensors: Dict[str, np.ndarray] = {}
    while pos < len(body):
        try:
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            code, *dims = _ENTRY.unpack_from(body, pos)
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed tensor entry at byte {pos}: {exc}") from None
        pos += _ENTRY.size
        if code not in DTYPE_FROM_CODE:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
        dt = DTYPE_FROM_CODE[code]
        nbytes = int(np.prod(dims)) * dt.itemsize
        if pos + nbytes > len(body):
            raise CheckpointError(f"entry {name!r} payload overruns file")
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}")
        arr = np.frombuffer(body, dt.newbyteorder("<"), int(np.prod(dims)), pos)
        tensors[name] = arr.astype(dt).reshape(dims)
        pos += nbytes
    return config, tensors


def load_state(model, tensors: Dict[str, np.ndarray]) -> None:
    expected = dict(model_state(model))
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} entries, e.g. {missing[0]!r}")
    unexpected = [n for n in tensors if n not in expected]
    if unexpected:
        raise CheckpointError(f"checkpoint has unknown entry {unexpected[0]!r}")
    params = dict(model.named_parameters())
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"entry {name!r} has shape {arr.shape}, model needs "
                                  f"{expected[name].shape}")
        if name in params:
            params[name].data = arr.copy()
    for name, buf in model.named_buffers():
        buf[...] = tensors[name].reshape(buf.shape)


def load_checkpoint(path, spec=None):
    """Rebuild the model stored at ``path``; returns ``(model, config)``.

    When ``spec`` is given, the stored architecture must match it.
    """
    from .model import DFANet, spec_from_config

    config, tensors = parse_checkpoint(Path(path).read_bytes())
    stored = spec_from_config(config)
    if spec is not None and stored.config_items() != spec.config_items():
        raise CheckpointError(
            f"spec mismatch: checkpoint holds {dict(stored.config_items())}, "
            f"expected {dict(spec.config_items())}")
    model = DFANet(stored, seed=int(config.get("seed", 0)))
    load_state(model, tensors)
    return model, config


def mean_from_config(config: Dict[str, str]) -> Tuple[float, float, float]:
    if "mean" not in config:
        return DEFAULT_MEAN
    vals = tuple(float(v) for v in config["mean"].split(","))
    if len(vals) != 3:
        raise CheckpointError(f"mean must have 3 components: {config['mean']!r}")
    return vals
