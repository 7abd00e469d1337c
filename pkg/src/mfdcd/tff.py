"""Textual Frequency Filter.

Prompt-style descriptors are embedded (stub or file-backed provider),
Fourier-transformed along the embedding dimension, split into real and
imaginary node features, run through a fully connected graph filter
bank, mean-pooled, and turned into per-channel scale/shift modulation of
the visual feature pyramid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, matmul, narrow, relu, reshape, tensor_mean
from .errors import ContractViolation, FormatError
from .spectral import dft

TOP_K_CATEGORIES = 5

TEMPLATE = "Remote sensing image at time {period} has a {value} probability of being the {key}"


class Period(Enum):
    T1 = "T1"
    T2 = "T2"


def render_descriptor(period: Period, key: str, value: float) -> str:
    if not 0.0 <= value <= 1.0:
        raise ContractViolation(f"probability {value} outside [0,1]")
    text = str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
    return TEMPLATE.format(period=period.value, value=text, key=key)


@dataclass
class TextDescriptor:
    period: Period
    key: str
    value: float
    rendered: str = ""

    def __post_init__(self):
        if not self.rendered:
            self.rendered = render_descriptor(self.period, self.key, self.value)


class StubEmbeddingProvider:
    """Deterministic seeded pseudo-embedding: same string, same row, always."""

    source = "stub"

    def __init__(self, dim=32, seed=0):
        if dim < 1:
            raise ContractViolation(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _row(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        digest = hashlib.sha256(
            struct.pack("<Q", self.seed) + text.encode("utf-8")).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        row = rng.standard_normal(self.dim)
        row /= np.linalg.norm(row)
        self._cache[text] = row
        return row

    def embed(self, descriptors):
        if not descriptors:
            raise ContractViolation("embed requires a non-empty descriptor list")
        return np.stack([self._row(d) for d in descriptors])


class FileEmbeddingProvider:
    """Rows preloaded from a TEMB file, consumed in descriptor order."""

    source = "file"

    def __init__(self, path, expected_count=None):
        self.rows = read_temb(path)
        if expected_count is not None and self.rows.shape[0] != expected_count:
            raise FormatError(
                f"TEMB file {path}: expected {expected_count} rows, "
                f"found {self.rows.shape[0]}")
        self.dim = self.rows.shape[1]

    def embed(self, descriptors):
        if not descriptors:
            raise ContractViolation("embed requires a non-empty descriptor list")
        if len(descriptors) != self.rows.shape[0]:
            raise FormatError(
                f"TEMB provider holds {self.rows.shape[0]} rows, "
                f"got {len(descriptors)} descriptors")
        return self.rows.copy()


TEMB_MAGIC = b"TEMB"


def write_temb(path, rows):
    rows = np.asarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ContractViolation(f"TEMB rows must be 2-D, got shape {rows.shape}")
    with open(path, "wb") as f:
        f.write(TEMB_MAGIC)
        f.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def read_temb(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != TEMB_MAGIC:
        raise FormatError(f"{path}: not a TEMB file (bad magic)")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count}x{dim} f32, got {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).astype(np.float64)


@dataclass
class GraphTopology:
    n: int
    edges: list = field(default_factory=list)
    adjacency_norm: np.ndarray = None

    @property
    def edge_count(self):
        return len(self.edges)


def build_graph(n: int) -> GraphTopology:
    """Fully connected topology; D^-1/2 (A+I) D^-1/2 collapses to ones/n."""
    if n < 1:
        raise ContractViolation(f"graph needs at least one node, got n={n}")
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    a_hat = np.full((n, n), 1.0 / n)
    return GraphTopology(n=n, edges=edges, adjacency_norm=a_hat)


class FilterBank:
    """k stacked graph filters E^(k) = relu(A_hat E^(k-1) W_k), outputs summed."""

    def __init__(self, name, k, width, rng, dtype=np.float32):
        if k < 1:
            raise ContractViolation(f"filter bank needs k >= 1, got {k}")
        self.k = k
        self.width = width
        self.weights = [
            Parameter(f"{name}.w{i}", ad.uniform_init(rng, (width, width), width, dtype))
            for i in range(k)
        ]

    def parameters(self):
        return self.weights


def node_features(embeddings: np.ndarray) -> np.ndarray:
    """DFT each embedding row along its channel axis; concat [Re | Im]."""
    spec = dft(np.asarray(embeddings, dtype=np.float64).T)  # transform along dim axis
    return np.concatenate([spec.re.T, spec.im.T], axis=1)


def graph_filter(bank: FilterBank, topology: GraphTopology, x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=bank.weights[0].tensor.dtype))
    if x.shape[1] != bank.width:
        raise ContractViolation(
            f"node-feature width {x.shape[1]} != filter-bank width {bank.width}")
    if x.shape[0] != topology.n:
        raise ContractViolation(
            f"{x.shape[0]} node rows but topology has n={topology.n}")
    a_hat = Tensor(topology.adjacency_norm.astype(x.dtype))
    state = x
    total = None
    for w in bank.weights:
        state = relu(matmul(matmul(a_hat, state), w.tensor))
        total = state if total is None else total + state
    return total


class ModulationHead:
    """Per-level projection of pooled node features to channel scale/shift.

    Zero-initialized so the initial modulation is the identity.
    """

    def __init__(self, name, text_width, channels, dtype=np.float32):
        self.channels = channels
        self.w = Parameter(f"{name}.weight", np.zeros((text_width, 2 * channels), dtype=dtype))
        self.b = Parameter(f"{name}.bias", np.zeros((2 * channels,), dtype=dtype))

    def parameters(self):
        return [self.w, self.b]


def modulate_pooled(features: Tensor, pooled: Tensor, head: ModulationHead) -> Tensor:
    """features * (1 + s) + b, with s and b projected from pooled rows.

    pooled is (B, width) or (1, width); scale/shift broadcast over space
    (and over the batch in the (1, width) case).
    """
    n = pooled.shape[0]
    sb = matmul(pooled, head.w.tensor) + reshape(head.b.tensor, (1, 2 * head.channels))
    c = head.channels
    s = reshape(narrow(sb, 1, 0, c), (n, c, 1, 1))
    b = reshape(narrow(sb, 1, c, c), (n, c, 1, 1))
    return features * (s + 1.0) + b


def modulate(features: Tensor, e_f: Tensor, head: ModulationHead) -> Tensor:
    """Single-image form: mean-pool the filtered node rows, then scale/shift."""
    pooled = reshape(tensor_mean(e_f, axis=0), (1, e_f.shape[1]))
    return modulate_pooled(features, pooled, head)


class StubProbabilityProvider:
    """Deterministic pseudo zero-shot probabilities from image statistics.

    With a palette (category name -> reference RGB), the image is cut into
    16x16 blocks and each block votes for the category whose reference
    color is nearest to the block mean, which is what a zero-shot scene
    classifier would report on flat-textured imagery. Without a palette, a
    seeded hash of the channel statistics stands in. Values are quantized
    to a 0.05 grid so the rendered descriptors form a small stable
    vocabulary rather than one string per raw probability.
    """

    def __init__(self, categories, seed=0, palette=None):
        self.categories = list(categories)
        self.seed = seed
        if palette is None:
            self.colors = None
        else:
            missing = [c for c in self.categories if c not in palette]
            if missing:
                raise ContractViolation(
                    f"palette is missing reference colors for {missing}")
            self.colors = np.stack(
                [np.asarray(palette[c], dtype=np.float64)
                 for c in self.categories])

    def top5(self, image: np.ndarray, image_id: str, period: Period):
        if self.colors is not None:
            probs = self._palette_votes(image)
        else:
            probs = self._hashed_scores(image, image_id, period)
        order = np.argsort(-probs, kind="stable")[:TOP_K_CATEGORIES]
        quant = np.clip(np.round(probs / 0.05) * 0.05, 0.0, 1.0)
        return [(self.categories[i], float(quant[i])) for i in order]

    def _palette_votes(self, image):
        img = np.asarray(image, dtype=np.float64)
        c, h, w = img.shape
        b = 16
        bh, bw = h // b, w // b
        if bh == 0 or bw == 0:
            means = img.mean(axis=(1, 2))[None, :]
        else:
            means = img[:, :bh * b, :bw * b].reshape(
                c, bh, b, bw, b).mean(axis=(2, 4)).reshape(c, -1).T
        d = ((means[:, None, :] - self.colors[None]) ** 2).sum(axis=2)
        votes = np.bincount(d.argmin(axis=1),
                            minlength=len(self.categories)).astype(np.float64)
        return (votes + 0.5) / (votes.sum() + 0.5 * len(self.categories))

    def _hashed_scores(self, image, image_id, period):
        stats = np.asarray(image, dtype=np.float64).mean(axis=(1, 2))
        digest = hashlib.sha256(
            struct.pack("<Q", self.seed)
            + image_id.encode("utf-8") + period.value.encode("utf-8")
            + np.round(stats, 3).tobytes()).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        scores = rng.standard_normal(len(self.categories))
        # tilt toward channel statistics so the stub is image-dependent
        scores[:3] += stats / 255.0
        probs = np.exp(scores - scores.max())
        return probs / probs.sum()


class FileProbabilityProvider:
    """Top-5 category probabilities from a JSON override file."""

    def __init__(self, path):
        with open(path) as f:
            records = json.load(f)
        if not isinstance(records, list):
            raise FormatError(f"{path}: probability override must be a JSON array")
        self._table = {}
        for rec in records:
            try:
                key = (rec["image_id"], rec["period"])
                self._table[key] = [(e["key"], float(e["value"])) for e in rec["top5"]]
            except (KeyError, TypeError) as exc:
                raise FormatError(f"{path}: malformed record {rec!r}") from exc

    def top5(self, image, image_id, period: Period):
        key = (image_id, period.value)
        if key not in self._table:
            raise FormatError(f"no probability record for {key}")
        return self._table[key]


def build_descriptors(prob_provider, image, image_id, period: Period):
    """Render the top-5 category descriptors for one image and phase."""
    pairs = prob_provider.top5(image, image_id, period)
    return [TextDescriptor(period, key, value) for key, value in pairs]
