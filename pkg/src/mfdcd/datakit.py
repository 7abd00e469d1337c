"""Deterministic synthetic bi-temporal corpus with the road/bridge
transition taxonomy, plus raster I/O (RBR1, PPM/PGM), tiling and stats.

Scenes are a textured background plus 1-6 non-overlapping change
regions; each region renders its from-category texture at T1 and its
to-category texture at T2, and the label raster carries the transition
index inside the region.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError

CATEGORIES = [
    "bare land", "road", "water", "bridge", "vegetation",
    "building", "farmland", "grass",
]

# (name, from_category, to_category); index 0 is background / no change
TRANSITIONS = [
    ("background", None, None),
    ("bare land -> road", "bare land", "road"),
    ("water -> bridge", "water", "bridge"),
    ("water -> road", "water", "road"),
    ("road -> bare land", "road", "bare land"),
    ("road -> vegetation", "road", "vegetation"),
    ("vegetation -> road", "vegetation", "road"),
    ("building -> road", "building", "road"),
    ("farmland -> road", "farmland", "road"),
    ("grass -> road", "grass", "road"),
    ("road -> grass", "road", "grass"),
    ("bridge -> water", "bridge", "water"),
]

CLASS_NAMES = [t[0] for t in TRANSITIONS]
NUM_CLASSES = len(TRANSITIONS)

# Per-category base RGB; spread out so classes are separable but noisy.
PALETTE = {
    "bare land": (168, 142, 110),
    "road": (90, 90, 95),
    "water": (40, 80, 160),
    "bridge": (200, 200, 205),
    "vegetation": (30, 110, 45),
    "building": (180, 70, 60),
    "farmland": (140, 160, 70),
    "grass": (95, 175, 90),
}


@dataclass
class TransitionClass:
    index: int
    name: str
    from_category: str | None
    to_category: str | None


def transition_table():
    return [TransitionClass(i, n, f, t) for i, (n, f, t) in enumerate(TRANSITIONS)]


@dataclass
class ScenePair:
    t1: np.ndarray     # 3xHxW u8
    t2: np.ndarray     # 3xHxW u8
    label: np.ndarray  # HxW u8
    id: str
    seed: int


@dataclass
class GenConfig:
    size: int = 256
    noise_sigma: float = 7.0
    min_regions: int = 1
    max_regions: int = 6
    min_extent: int = 56
    max_extent: int = 160
    area_budget: float = 0.33  # target mean fraction of changed pixels
    cast: float = 12.0         # per-acquisition global color cast amplitude
    max_pseudo_regions: int = 3  # unchanged patches with appearance shifts
    pseudo_delta: float = 18.0   # brightness shift amplitude of those patches


def _texture(rng, category, h, w, sigma, illum):
    base = np.array(PALETTE[category], dtype=np.float64)[:, None, None]
    noise = rng.normal(0.0, sigma, size=(3, h, w))
    return base + noise + illum


def _illumination(rng, h, w):
    """Low-frequency brightness gradient shared by both phases."""
    gy = rng.uniform(-18, 18)
    gx = rng.uniform(-18, 18)
    yy = np.linspace(-0.5, 0.5, h)[:, None]
    xx = np.linspace(-0.5, 0.5, w)[None, :]
    return (gy * yy + gx * xx)[None, :, :]


def gen_scene(seed, size, transition_mix=None, config: GenConfig | None = None) -> ScenePair:
    """Fully deterministic scene for (seed, size, mix, config)."""
    if size % 64:
        raise ContractViolation(f"scene size must be a multiple of 64, got {size}")
    cfg = config or GenConfig(size=size)
    mix = np.ones(NUM_CLASSES - 1) if transition_mix is None else np.asarray(
        transition_mix, dtype=np.float64)
    if mix.shape != (NUM_CLASSES - 1,) or (mix < 0).any() or mix.sum() == 0:
        raise ContractViolation(
            "transition_mix must be 11 non-negative weights, not all zero")
    mix = mix / mix.sum()
    rng = np.random.Generator(np.random.PCG64(seed))
    h = w = size
    # the two acquisitions differ in illumination gradient and global color
    # cast, so appearance change alone does not imply category change
    illum1 = _illumination(rng, h, w) + rng.uniform(-cfg.cast, cfg.cast,
                                                    (3, 1, 1))
    illum2 = _illumination(rng, h, w) + rng.uniform(-cfg.cast, cfg.cast,
                                                    (3, 1, 1))
    bg_category = CATEGORIES[rng.integers(len(CATEGORIES))]

    t1 = _texture(rng, bg_category, h, w, cfg.noise_sigma, illum1)
    t2 = _texture(rng, bg_category, h, w, cfg.noise_sigma, illum2)
    label = np.zeros((h, w), dtype=np.uint8)

    n_regions = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    placed = 0
    attempts = 0
    while placed < n_regions and attempts < 50:
        attempts += 1
        rh = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        rw = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        rh, rw = min(rh, h), min(rw, w)
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        if label[y0:y0 + rh, x0:x0 + rw].any():
            continue
        cls = 1 + int(rng.choice(NUM_CLASSES - 1, p=mix))
        _, from_cat, to_cat = TRANSITIONS[cls]
        mask = np.zeros((rh, rw), dtype=bool)
        if rng.random() < 0.6:
            mask[:] = True
        else:
            # convex quadrilateral inside the box
            yy, xx = np.mgrid[0:rh, 0:rw]
            cy, cx = rh / 2, rw / 2
            angles = np.sort(rng.uniform(0, 2 * np.pi, 4))
            pts = [(cy + 0.5 * rh * np.sin(a), cx + 0.5 * rw * np.cos(a)) for a in angles]
            mask[:] = True
            for (ay, ax), (by, bx) in zip(pts, pts[1:] + pts[:1]):
                mask &= ((bx - ax) * (yy - ay) - (by - ay) * (xx - ax)) <= 0
            if mask.sum() < 0.25 * rh * rw:
                mask[:] = True
        region1 = _texture(rng, from_cat, rh, rw, cfg.noise_sigma,
                           illum1[:, y0:y0 + rh, x0:x0 + rw])
        region2 = _texture(rng, to_cat, rh, rw, cfg.noise_sigma,
                           illum2[:, y0:y0 + rh, x0:x0 + rw])
        sub1 = t1[:, y0:y0 + rh, x0:x0 + rw]
        sub2 = t2[:, y0:y0 + rh, x0:x0 + rw]
        sub1[:, mask] = region1[:, mask]
        sub2[:, mask] = region2[:, mask]
        label[y0:y0 + rh, x0:x0 + rw][mask] = cls
        placed += 1

    # pseudo-changes: patches whose brightness shifts between acquisitions
    # with no category change; the label stays background there
    for _ in range(int(rng.integers(0, cfg.max_pseudo_regions + 1))):
        rh = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        rw = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        rh, rw = min(rh, h), min(rw, w)
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        delta = rng.uniform(0.5, 1.0, (3, 1, 1)) * cfg.pseudo_delta \
            * (1 if rng.random() < 0.5 else -1)
        t2[:, y0:y0 + rh, x0:x0 + rw] += delta

    clip = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return ScenePair(clip(t1), clip(t2), label, id=f"scene{seed:08x}", seed=seed)


def tile(pair: ScenePair, tile_size=256):
    """Non-overlapping grid tiles; right/bottom remainders are dropped."""
    if tile_size % 64:
        raise ContractViolation(f"tile size must be a multiple of 64, got {tile_size}")
    h, w = pair.label.shape
    if h < tile_size or w < tile_size:
        raise ContractViolation(
            f"scene {h}x{w} smaller than tile size {tile_size}")
    tiles = []
    for gy in range(h // tile_size):
        for gx in range(w // tile_size):
            ys = slice(gy * tile_size, (gy + 1) * tile_size)
            xs = slice(gx * tile_size, (gx + 1) * tile_size)
            tiles.append(ScenePair(
                pair.t1[:, ys, xs].copy(), pair.t2[:, ys, xs].copy(),
                pair.label[ys, xs].copy(),
                id=f"{pair.id}_y{gy}x{gx}", seed=pair.seed))
    return tiles


RBR_MAGIC = b"RBR1"
_DTYPES = {0: np.uint8, 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype(np.uint8): 0, np.dtype("<f4"): 1, np.dtype(np.float32): 1}


def write_raster(path, raster):
    raster = np.asarray(raster)
    if raster.ndim == 2:
        raster = raster[None]
    if raster.ndim != 3:
        raise ContractViolation(f"raster must be CxHxW, got shape {raster.shape}")
    code = _DTYPE_CODES.get(raster.dtype)
    if code is None:
        raise FormatError(f"unsupported raster dtype {raster.dtype} (u8 or f32 only)")
    c, h, w = raster.shape
    with open(path, "wb") as f:
        f.write(RBR_MAGIC)
        f.write(struct.pack("<BIII", code, c, h, w))
        if code == 1:
            f.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(raster).tobytes())


def read_raster(path, expect_dtype=None):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 17 or raw[:4] != RBR_MAGIC:
        raise FormatError(f"{path}: not an RBR1 raster (bad magic)")
    code, c, h, w = struct.unpack("<BIII", raw[4:17])
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    itemsize = np.dtype(dtype).itemsize
    expected = 17 + c * h * w * itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {c}x{h}x{w} data, got {len(raw)}")
    if expect_dtype is not None and np.dtype(expect_dtype) != np.dtype(dtype).base:
        raise FormatError(
            f"{path}: dtype code {code} but {np.dtype(expect_dtype).name} required")
    data = np.frombuffer(raw[17:], dtype=dtype).reshape(c, h, w)
    return np.ascontiguousarray(data)


def write_ppm(path, rgb):
    """P6 export of a 3xHxW u8 raster."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ContractViolation(f"PPM export needs 3xHxW u8, got {rgb.shape}")
    _, h, w = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray):
    """P5 export of an HxW u8 raster."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ContractViolation(f"PGM export needs HxW u8, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


@dataclass
class ManifestEntry:
    id: str
    t1_path: str
    t2_path: str
    label_path: str
    split: str


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))

    def split(self, name):
        return [e for e in self.entries if e.split == name]


def write_manifest(path, manifest: Manifest):
    doc = {
        "classes": manifest.class_names,
        "entries": [vars(e) for e in manifest.entries],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def read_manifest(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest JSON: {exc}") from exc
    try:
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        classes = doc["classes"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    ids = {}
    for e in entries:
        if e.split not in ("train", "test"):
            raise FormatError(f"{path}: unknown split '{e.split}' for {e.id}")
        if e.id in ids:
            raise FormatError(f"{path}: duplicate entry id '{e.id}'")
        ids[e.id] = e
    return Manifest(entries=entries, class_names=classes)


def generate_corpus(out_dir, seed=0, train_scenes=200, test_scenes=50,
                    size=256, gen_config: GenConfig | None = None):
    """Write the full synthetic corpus + manifest; pure function of its args."""
    out = Path(out_dir)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(train_scenes + test_scenes)]
    manifest = Manifest()
    for i, child in enumerate(child_seeds):
        split = "train" if i < train_scenes else "test"
        pair = gen_scene(child, size, config=gen_config)
        pair_id = f"{split}{i:04d}"
        paths = {}
        for part, data in (("t1", pair.t1), ("t2", pair.t2), ("label", pair.label)):
            rel = f"rasters/{pair_id}_{part}.rbr"
            write_raster(out / rel, data)
            paths[part] = rel
        manifest.entries.append(ManifestEntry(
            id=pair_id, t1_path=paths["t1"], t2_path=paths["t2"],
            label_path=paths["label"], split=split))
    write_manifest(out / "manifest.json", manifest)
    return manifest


def load_pair(root, entry: ManifestEntry) -> ScenePair:
    root = Path(root)
    t1 = read_raster(root / entry.t1_path, expect_dtype=np.uint8)
    t2 = read_raster(root / entry.t2_path, expect_dtype=np.uint8)
    label = read_raster(root / entry.label_path, expect_dtype=np.uint8)
    if label.shape[0] != 1:
        raise FormatError(f"{entry.label_path}: label raster must be single-channel")
    if t1.shape != t2.shape or t1.shape[1:] != label.shape[1:]:
        raise FormatError(f"{entry.id}: raster extents disagree")
    return ScenePair(t1, t2, label[0], id=entry.id, seed=0)


def stats(manifest: Manifest, root):
    """Per-split class pixel counts, per-pair counts and imbalance ratios."""
    root = Path(root)
    per_split = {"train": np.zeros(NUM_CLASSES, dtype=np.int64),
                 "test": np.zeros(NUM_CLASSES, dtype=np.int64)}
    per_pair = {}
    for entry in manifest.entries:
        label = read_raster(root / entry.label_path, expect_dtype=np.uint8)
        counts = np.bincount(label.reshape(-1), minlength=NUM_CLASSES)
        if len(counts) > NUM_CLASSES:
            raise FormatError(f"{entry.label_path}: label values exceed class table")
        per_split[entry.split] += counts
        per_pair[entry.id] = counts.tolist()
    doc = {"classes": list(manifest.class_names), "per_pair": per_pair}
    for split, counts in per_split.items():
        total = int(counts.sum())
        doc[split] = {
            "pixel_counts": counts.tolist(),
            "total_pixels": total,
            "imbalance_ratio": (float(counts.max() / counts[counts > 0].min())
                                if (counts > 0).any() else None),
        }
    return doc


def stats_text(doc):
    lines = [f"{'class':<24} {'train px':>12} {'test px':>12}"]
    for i, name in enumerate(doc["classes"]):
        lines.append(f"{name:<24} {doc['train']['pixel_counts'][i]:>12} "
                     f"{doc['test']['pixel_counts'][i]:>12}")
    return "\n".join(lines) + "\n"
