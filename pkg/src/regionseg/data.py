"""Synthetic labeled scenes, binary PPM/PGM I/O and the on-disk dataset layout."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .regions import VOID

SHAPES = ("rectangle", "disc", "triangle")


class NetpbmError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene generator.

    Object classes ``1..C-1`` are drawn with probability proportional to
    ``c ** -freq_exponent`` and shrink with class id, so pixel frequencies fall
    off steeply. Class colors come in pairs sharing a hue family, so color
    alone does not separate every class. Every object and the background
    carry a two-tone stripe texture of amplitude ``texture``, which breaks
    color-based superpixels into object parts.
    """

    size: int = 32
    num_classes: int = 8
    freq_exponent: float = 2.0
    min_objects: int = 1
    max_objects: int = 4
    background: int = 0
    seed: int = 0
    color_jitter: float = 0.06
    pixel_noise: float = 0.05
    min_radius: float = 3.0
    max_radius: float = 9.0
    texture: float = 0.15

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.size < 16:
            raise ValueError("images must be at least 16x16")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.texture < 0:
            raise ValueError("texture amplitude must be non-negative")
        if not 0 <= self.background < self.num_classes:
            raise ValueError("background class out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @property
    def object_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if c != self.background]

    def class_shape(self, c: int) -> str:
        return SHAPES[c % len(SHAPES)]

    def class_colors(self) -> np.ndarray:
        """Mean RGB per class, deterministic in the class count only."""
        rng = np.random.default_rng(1234 + self.num_classes)
        colors = np.empty((self.num_classes, 3))
        for c in range(self.num_classes):
            colors[c] = rng.uniform(0.15, 0.85, size=3)
        colors[self.background] = (0.45, 0.45, 0.45)
        # odd/even object classes share a base color up to a small offset
        objs = self.object_classes
        for a, b in zip(objs[::2], objs[1::2]):
            colors[b] = np.clip(colors[a] + rng.uniform(-0.12, 0.12, size=3), 0.05, 0.95)
        return colors

    def class_probs(self) -> np.ndarray:
        objs = np.array(self.object_classes, dtype=float)
        rank = np.arange(1, objs.size + 1, dtype=float)
        p = rank ** -self.freq_exponent
        return p / p.sum()


def _shape_mask(shape, cx, cy, r, aspect, size):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "rectangle":
        return (np.abs(dx) <= r * aspect) & (np.abs(dy) <= r / aspect)
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    # upward triangle with apex at (cx, cy - r) and base at cy + r
    t = (dy + r) / (2 * r)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r * aspect)


def _stripes(rng, amp, size):
    """Square-wave luminance stripes with random orientation, period and phase."""
    if amp == 0:
        return np.zeros((size, size))
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 7.0)
    t = (xs * np.cos(theta) + ys * np.sin(theta)) / period + rng.uniform(0, 1)
    return amp * np.where((t % 1.0) < 0.5, 1.0, -1.0)


def synthesize(spec: SceneSpec, index: int):
    """Return ``(image, labels)`` for scene ``index``; deterministic in ``(spec.seed, index)``.

    The image is H x W x 3 in [0, 1], quantized to multiples of 1/255 so it
    round-trips through 8-bit PPM exactly.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    colors = spec.class_colors()
    objs = spec.object_classes
    probs = spec.class_probs()

    labels = np.full((n, n), spec.background, dtype=np.int64)
    image = np.empty((n, n, 3))
    image[:] = colors[spec.background] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
    image += _stripes(rng, spec.texture, n)[..., None]

    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    rank_span = max(len(objs) - 1, 1)
    for _ in range(k):
        ci = int(rng.choice(len(objs), p=probs))
        c = objs[ci]
        shrink = 1.0 - 0.55 * ci / rank_span
        r = rng.uniform(spec.min_radius, spec.max_radius) * shrink
        r = max(r, 1.5)
        aspect = rng.uniform(0.7, 1.4)
        cx, cy = rng.uniform(0, n, size=2)
        mask = _shape_mask(spec.class_shape(c), cx, cy, r, aspect, n)
        if not mask.any():
            continue
        labels[mask] = c
        tone = colors[c] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        image[mask] = tone + _stripes(rng, spec.texture, n)[mask][:, None]

    image = image + rng.normal(0.0, spec.pixel_noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image, labels


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def _header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise NetpbmError(f"expected magic {magic.decode()}, got {data[:2]!r}", 0)
    pos, values = 2, []
    while len(values) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("malformed header: expected an integer", start)
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: missing whitespace after maxval", pos)
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise NetpbmError("non-positive image dimensions", 2)
    if not 0 < maxval < 256:
        raise NetpbmError(f"unsupported maxval {maxval}", pos)
    return width, height, maxval, pos + 1


def _payload(data, offset, n):
    if len(data) - offset < n:
        raise NetpbmError(f"truncated payload: need {n} bytes, have {len(data) - offset}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM image must be H x W x 3")
    raw = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + raw.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, maxval, off = _header(data, b"P6")
    raw = _payload(data, off, w * h * 3)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def encode_pgm(labels: np.ndarray) -> bytes:
    lab = np.asarray(labels)
    if lab.ndim != 2 or lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("PGM labels must be a 2-D array of values in [0, 255]")
    return b"P5\n%d %d\n255\n" % (lab.shape[1], lab.shape[0]) + lab.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, _, off = _header(data, b"P5")
    return _payload(data, off, w * h).reshape(h, w).astype(np.int64)


def write_image(path, image):
    Path(path).write_bytes(encode_ppm(image))


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_labels(path, labels):
    Path(path).write_bytes(encode_pgm(labels))


def read_labels(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def default_palette(num_classes: int) -> np.ndarray:
    """Distinct 8-bit colors for ``num_classes`` classes (row i is class i)."""
    out = np.zeros((num_classes, 3), dtype=np.int64)
    for c in range(num_classes):
        # PASCAL-style bit interleaving of the class id (offset by one to keep black for VOID)
        v, r, g, b = c + 1, 0, 0, 0
        for shift in range(7, -1, -1):
            r |= (v & 1) << shift
            g |= ((v >> 1) & 1) << shift
            b |= ((v >> 2) & 1) << shift
            v >>= 3
        out[c] = (r, g, b)
    return out


def colorize_labels(labels: np.ndarray, palette) -> np.ndarray:
    """Map class ids to palette colors (0..1 floats); VOID is black."""
    lab = np.asarray(labels)
    pal = np.asarray(palette, dtype=np.float64)
    present = np.unique(lab[lab != VOID])
    if present.size and present.max() >= pal.shape[0]:
        raise ValueError(f"palette has {pal.shape[0]} entries, labels use class {int(present.max())}")
    out = np.zeros(lab.shape + (3,))
    valid = lab != VOID
    out[valid] = pal[lab[valid]] / 255.0
    return out


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    spec: SceneSpec
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int) -> Dataset:
    ds = Dataset(spec)
    for i in range(n_train + n_test):
        img, lab = synthesize(spec, i)
        ds.images.append(img)
        ds.labels.append(lab)
    ds.train = list(range(n_train))
    ds.test = list(range(n_train, n_train + n_test))
    return ds


def manifest_text(ds: Dataset) -> str:
    lines = ["# regionseg dataset manifest", "format=1"]
    for k, v in sorted(asdict(ds.spec).items()):
        lines.append(f"spec.{k}={v}")
    lines.append(f"spec_hash={ds.spec.digest()}")
    lines.append(f"count={len(ds)}")
    lines.append("train=" + " ".join(str(i) for i in ds.train))
    lines.append("test=" + " ".join(str(i) for i in ds.test))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if len(ds):
        (root / "images").mkdir(exist_ok=True)
        (root / "labels").mkdir(exist_ok=True)
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        write_image(root / "images" / f"{i:05d}.ppm", img)
        write_labels(root / "labels" / f"{i:05d}.pgm", lab)
    (root / "manifest.txt").write_text(manifest_text(ds))


def _parse_value(text, kind):
    if kind is bool:
        return text == "True"
    return kind(text)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    entries = {}
    for ln in path.read_text().splitlines():
        if ln.startswith("#") or not ln.strip():
            continue
        k, _, v = ln.partition("=")
        entries[k] = v
    defaults = SceneSpec()
    spec_args = {}
    for k, v in entries.items():
        if k.startswith("spec."):
            name = k[5:]
            spec_args[name] = _parse_value(v, type(getattr(defaults, name)))
    spec = SceneSpec(**spec_args)
    if entries.get("spec_hash") != spec.digest():
        raise ValueError("manifest spec_hash does not match its spec fields")
    ds = Dataset(spec)
    for i in range(int(entries["count"])):
        ds.images.append(read_image(root / "images" / f"{i:05d}.ppm"))
        ds.labels.append(read_labels(root / "labels" / f"{i:05d}.pgm"))
    ds.train = [int(t) for t in entries.get("train", "").split()]
    ds.test = [int(t) for t in entries.get("test", "").split()]
    return ds
