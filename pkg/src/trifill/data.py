"""Procedural scene dataset: flat-colored shapes with exact segmentation
labels, analytic boundary edges, and regular / irregular hole masks.

Everything here is plain numpy — tensors enter the picture only at the
training step. All randomness flows through explicit seeds so generation,
mask draws, and file contents are reproducible bit for bit.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

MAGIC = b"TRIF"
VERSION = 1

# fixed base palette, one entry per class id (background first); extra
# classes wrap around with a brightness shift
_PALETTE = np.array([
    [0.55, 0.55, 0.55],
    [0.85, 0.25, 0.20],
    [0.20, 0.60, 0.85],
    [0.30, 0.75, 0.30],
    [0.85, 0.75, 0.20],
    [0.65, 0.30, 0.80],
])

_KINDS = ("ellipse", "rectangle", "triangle")

COVERAGE_BANDS = {
    "easy": (0.10, 0.20),
    "medium": (0.30, 0.40),
    "hard": (0.50, 0.60),
}


@dataclass(frozen=True)
class Shape:
    class_id: int
    kind: str  # ellipse | rectangle | triangle
    color: tuple
    params: tuple  # geometry, kind-specific


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    k_classes: int
    shapes: tuple  # draw order == z-order, later on top
    background: tuple = (0.55, 0.55, 0.55)


def class_color(class_id, rng=None, jitter=0.08):
    base = _PALETTE[class_id % len(_PALETTE)].copy()
    if class_id >= len(_PALETTE):
        base = np.clip(base * 0.7, 0, 1)
    if rng is not None:
        base = base + rng.uniform(-jitter, jitter, size=3)
    return tuple(np.clip(base, 0.05, 0.95))


def random_scene(rng, height=64, width=64, k_classes=4):
    """One shape per foreground class (so every class usually appears),
    plus a couple of extras of random class."""
    if k_classes < 2:
        raise ValueError(f"need at least 2 classes (background + 1), got {k_classes}")
    shapes = []
    # one jittered color per class per scene, shared by same-class shapes,
    # so the label map stays recoverable from the image
    colors = {cid: class_color(cid, rng) for cid in range(1, k_classes)}
    class_ids = list(range(1, k_classes)) + list(rng.integers(1, k_classes, size=2))
    for cid in class_ids:
        kind = _KINDS[(cid - 1) % len(_KINDS)]
        cx = rng.uniform(0.15, 0.85) * width
        cy = rng.uniform(0.15, 0.85) * height
        if kind == "ellipse":
            params = (cx, cy, rng.uniform(0.08, 0.22) * width, rng.uniform(0.08, 0.22) * height)
        elif kind == "rectangle":
            params = (cx, cy, rng.uniform(0.12, 0.4) * width, rng.uniform(0.12, 0.4) * height)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.1, 0.25) * min(height, width)
            verts = []
            for t in range(3):
                a = ang + t * 2 * np.pi / 3 + rng.uniform(-0.4, 0.4)
                verts += [cx + rad * np.cos(a), cy + rad * np.sin(a)]
            params = tuple(verts)
        shapes.append(Shape(cid, kind, colors[cid], params))
    background = class_color(0, rng)
    return SceneSpec(height, width, k_classes, tuple(shapes), background)


def _shape_interior(shape, ys, xs):
    if shape.kind == "ellipse":
        cx, cy, rx, ry = shape.params
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if shape.kind == "rectangle":
        cx, cy, w, h = shape.params
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    if shape.kind == "triangle":
        x0, y0, x1, y1, x2, y2 = shape.params
        d0 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        d1 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        d2 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_scene(spec):
    """Rasterize to (image 3×H×W float in [0,1], seg H×W uint8)."""
    if spec.k_classes < 2:
        raise ValueError(f"need at least 2 classes, got {spec.k_classes}")
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys += 0.5
    xs += 0.5  # sample at pixel centers
    image = np.empty((3, h, w))
    image[:] = np.asarray(spec.background).reshape(3, 1, 1)
    seg = np.zeros((h, w), dtype=np.uint8)
    for shape in spec.shapes:
        if not 0 <= shape.class_id < spec.k_classes:
            raise ValueError(f"shape class {shape.class_id} out of range for K={spec.k_classes}")
        inside = _shape_interior(shape, ys, xs)
        seg[inside] = shape.class_id
        image[:, inside] = np.asarray(shape.color).reshape(3, 1)
    return image, seg


# ---------------------------------------------------------------------------
# masks (1 = hole)


def make_regular_mask(height, width, side):
    if side > min(height, width):
        raise ValueError(f"square side {side} exceeds frame {height}x{width}")
    m = np.zeros((height, width))
    top, left = (height - side) // 2, (width - side) // 2
    m[top:top + side, left:left + side] = 1.0
    return m


@dataclass(frozen=True)
class MaskSpec:
    mode: str = "regular"  # regular | irregular
    side: int = 0  # regular: 0 -> H//2 at draw time
    band: tuple = (0.10, 0.20)
    strokes_max: int = 64
    width_range: tuple = (0.04, 0.16)  # fraction of min(H, W)
    vertex_range: tuple = (4, 12)
    seed: int = 0

    @classmethod
    def named(cls, name, seed=0):
        if name == "regular":
            return cls(mode="regular", seed=seed)
        if name in COVERAGE_BANDS:
            return cls(mode="irregular", band=COVERAGE_BANDS[name], seed=seed)
        raise ValueError(f"unknown mask mode {name!r}, expected regular/easy/medium/hard")

    def with_seed(self, seed):
        return replace(self, seed=seed)


def _stamp_stroke(mask, rng, height, width, stroke_width, n_vertices):
    """One random thick polyline, stamped as discs along its segments."""
    ys, xs = np.ogrid[0:height, 0:width]
    y = rng.uniform(0.1, 0.9) * height
    x = rng.uniform(0.1, 0.9) * width
    r = stroke_width / 2.0
    step = max(1.0, r * 0.7)
    for _ in range(n_vertices):
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.1, 0.35) * min(height, width)
        for t in np.arange(0.0, length, step):
            cy = np.clip(y + t * np.sin(ang), 0, height - 1)
            cx = np.clip(x + t * np.cos(ang), 0, width - 1)
            mask[(ys - cy) ** 2 + (xs - cx) ** 2 <= r * r] = 1.0
        y = np.clip(y + length * np.sin(ang), 0, height - 1)
        x = np.clip(x + length * np.cos(ang), 0, width - 1)


def make_irregular_mask(height, width, band, seed, spec=None):
    """Union of brush strokes with coverage steered into [lo, hi].

    Strokes are added one at a time; a stroke that overshoots the band is
    undone and retried thinner, so coverage only ever grows in sub-band
    steps. Minimum stroke area is a few pixels while every band is at
    least 10% of the frame wide, hence termination; a generous attempt
    budget guards pathological configs.
    """
    lo, hi = band
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"coverage band must satisfy 0 < lo < hi < 1, got {band}")
    spec = spec or MaskSpec(mode="irregular", band=band, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mask = np.zeros((height, width))
    scale = min(height, width)
    w_lo = max(2.0, spec.width_range[0] * scale)
    w_hi = max(w_lo + 1.0, spec.width_range[1] * scale)
    attempts = 0
    budget = 60 * spec.strokes_max
    width_cap = w_hi
    while mask.mean() < lo:
        attempts += 1
        if attempts > budget:
            raise ValueError(
                f"could not reach coverage band [{lo}, {hi}] on {height}x{width} "
                f"after {attempts - 1} stroke attempts (stuck at {mask.mean():.4f}, "
                f"seed={seed}); widen the band or the stroke budget")
        snapshot = mask.copy()
        stroke_width = rng.uniform(w_lo, min(w_hi, width_cap))
        n_vertices = int(rng.integers(spec.vertex_range[0], spec.vertex_range[1] + 1))
        _stamp_stroke(mask, rng, height, width, stroke_width, n_vertices)
        if mask.mean() > hi:
            mask = snapshot  # undo and aim smaller
            width_cap = max(w_lo, width_cap * 0.7)
    return mask


def draw_mask(spec, height, width, index=0):
    """Materialize the mask for one sample; irregular draws are seeded
    per (spec.seed, index) so every index gets an independent mask."""
    if spec.mode == "regular":
        side = spec.side or height // 2
        return make_regular_mask(height, width, side)
    if spec.mode == "irregular":
        seed = np.random.SeedSequence(spec.seed, spawn_key=(int(index),))
        sub = int(seed.generate_state(1)[0])
        return make_irregular_mask(height, width, spec.band, sub, spec)
    raise ValueError(f"unknown mask mode {spec.mode!r}")


# ---------------------------------------------------------------------------
# edges


def extract_edges(seg):
    """Boundary pixels of a label map: pixel (i,j) is an edge where its
    forward 2x2 block {(i,j),(i+1,j),(i,j+1),(i+1,j+1)} (clipped at the
    border) holds more than one class. Gives one-pixel-wide boundaries."""
    s = np.asarray(seg)
    e = np.zeros(s.shape, dtype=np.uint8)
    a, b, c, d = s[:-1, :-1], s[1:, :-1], s[:-1, 1:], s[1:, 1:]
    mx = np.maximum(np.maximum(a, b), np.maximum(c, d))
    mn = np.minimum(np.minimum(a, b), np.minimum(c, d))
    e[:-1, :-1] = mx != mn
    e[-1, :-1] |= s[-1, :-1] != s[-1, 1:]
    e[:-1, -1] |= s[:-1, -1] != s[1:, -1]
    return e


def extract_edges_gradient(image, threshold=0.2):
    """Sobel gradient magnitude, thinned by non-maximum suppression along
    the quantized gradient direction, then thresholded."""
    gray = image.mean(axis=0) if image.ndim == 3 else np.asarray(image, dtype=np.float64)
    p = np.pad(gray, 1, mode="edge")
    gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]))
    gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
          - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    mp = np.pad(mag, 1)
    center = mp[1:-1, 1:-1]
    neighbors = {
        0: (mp[1:-1, 2:], mp[1:-1, :-2]),
        45: (mp[:-2, 2:], mp[2:, :-2]),
        90: (mp[:-2, 1:-1], mp[2:, 1:-1]),
        135: (mp[:-2, :-2], mp[2:, 2:]),
    }
    sector = ((ang + 22.5) // 45).astype(int) % 4 * 45
    keep = np.zeros_like(mag, dtype=bool)
    for deg, (n1, n2) in neighbors.items():
        sel = sector == deg
        # >= forward but > backward: a two-pixel plateau thins to one pixel
        keep |= sel & (center >= n1) & (center > n2)
    return ((mag > threshold) & keep).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence


@dataclass
class Dataset:
    height: int
    width: int
    k_classes: int
    images: np.ndarray  # (n, 3, H, W) float32
    segs: np.ndarray  # (n, H, W) uint8
    edges: np.ndarray  # (n, H, W) uint8

    def __len__(self):
        return self.images.shape[0]


def build_dataset(path, n, height=64, width=64, k_classes=4, seed=0):
    images = np.empty((n, 3, height, width), dtype=np.float32)
    segs = np.empty((n, height, width), dtype=np.uint8)
    edges = np.empty((n, height, width), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        img, seg = render_scene(random_scene(rng, height, width, k_classes))
        images[i] = img.astype(np.float32)
        segs[i] = seg
        edges[i] = extract_edges(seg)
    save_dataset(path, Dataset(height, width, k_classes, images, segs, edges))
    return load_dataset(path)


def save_dataset(path, ds):
    n = len(ds)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", VERSION, ds.height, ds.width, ds.k_classes, n))
        for i in range(n):
            payload = (ds.images[i].astype("<f4").tobytes()
                       + ds.segs[i].tobytes() + ds.edges[i].tobytes())
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset container (bad magic)")
    version, h, w, k, n = struct.unpack_from("<5I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: container version {version}, expected {VERSION}")
    images = np.empty((n, 3, h, w), dtype=np.float32)
    segs = np.empty((n, h, w), dtype=np.uint8)
    edges = np.empty((n, h, w), dtype=np.uint8)
    off = 24
    img_b, map_b = 3 * h * w * 4, h * w
    for i in range(n):
        payload = blob[off:off + img_b + 2 * map_b]
        off += img_b + 2 * map_b
        (crc,) = struct.unpack_from("<I", blob, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise ValueError(f"{path}: checksum failure on record {i}")
        images[i] = np.frombuffer(payload, "<f4", count=3 * h * w).reshape(3, h, w)
        segs[i] = np.frombuffer(payload, np.uint8, count=map_b, offset=img_b).reshape(h, w)
        edges[i] = np.frombuffer(payload, np.uint8, count=map_b, offset=img_b + map_b).reshape(h, w)
    return Dataset(h, w, k, images, segs, edges)


@dataclass
class TrainSample:
    """One batch: image, hole mask (1 = missing), corrupted image, labels."""

    image: np.ndarray  # (N, 3, H, W)
    mask: np.ndarray  # (N, 1, H, W) in {0, 1}
    corrupted: np.ndarray  # image * (1 - mask), exact
    seg: np.ndarray  # (N, H, W) int labels
    edge: np.ndarray  # (N, 1, H, W) in {0, 1}


def load_batch(ds, indices, mask_spec, dtype=np.float64):
    indices = list(indices)
    image = ds.images[indices].astype(dtype)
    seg = ds.segs[indices].astype(np.int64)
    edge = ds.edges[indices].astype(dtype)[:, None]
    mask = np.stack([draw_mask(mask_spec, ds.height, ds.width, idx) for idx in indices])
    mask = mask[:, None].astype(dtype)
    return TrainSample(image=image, mask=mask, corrupted=image * (1.0 - mask),
                       seg=seg, edge=edge)


# ---------------------------------------------------------------------------
# image export for eyeballing results


def write_ppm(path, image):
    """image: 3×H×W float in [0,1] -> binary PPM (P6)."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM export needs 3 channels, got {c}")
    data = (np.clip(image, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray):
    """gray: H×W float in [0,1] -> binary PGM (P5)."""
    h, w = gray.shape
    data = (np.clip(gray, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
