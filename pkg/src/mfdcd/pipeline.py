"""End-to-end model: backbone + DFC + TFF + decoder, training and inference.

Dataflow per phase: backbone pyramid F1..F4 -> wavelet bands -> ASFF
(levels 1-2, same phase) and BTFF (levels 3-4, opposite phase's LL) ->
optional text modulation -> per-level |P^1 - P^2| differences -> top-down
skip decoder -> class logits at input resolution.

The `dfc_variant` field rewires which band feeds which level (the
coupling ablations); `enable_dfc`/`enable_tff` switch modules off
entirely, reducing to the plain siamese-difference baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import dfc, tff
from .autodiff import Parameter, Tensor, conv2d, relu, upsample_bilinear
from .backbone import Backbone, PyramidConfig
from .errors import ContractViolation, DivergenceError, FormatError
from .wavelet import dwt2

DFC_VARIANTS = ("asff_btff", "all_high", "all_low", "cross_high", "same_low")


@dataclass
class ModelConfig:
    enable_dfc: bool = True
    enable_tff: bool = True
    dfc_variant: str = "asff_btff"
    filter_count: int = 5
    lambda0: float = 1.0
    gamma: float = 0.0001
    g: float = 0.1
    stem_channels: int = 8
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    class_count: int = 12
    text_dim: int = 32
    decoder_width: int = 64
    fine_width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ContractViolation(f"class_count must be >= 2, got {self.class_count}")
        if self.dfc_variant not in DFC_VARIANTS:
            raise ContractViolation(
                f"unknown dfc_variant '{self.dfc_variant}', expected one of {DFC_VARIANTS}")
        if self.filter_count < 1:
            raise ContractViolation(f"filter_count must be >= 1, got {self.filter_count}")


@dataclass
class TrainConfig:
    lr: float = 0.0001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    iterations: int = 1000
    log_every: int = 50
    checkpoint_every: int = 500
    augment: bool = True
    brightness_delta: float = 14.0
    contrast_low: float = 0.88
    contrast_high: float = 1.12


def _from_dict(cls, doc, where):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise FormatError(
            f"{where}: unknown config keys {sorted(unknown)} (schema is strict)")
    return cls(**doc)


def load_run_config(path):
    """Strict JSON run config: {'model': {...}, 'train': {...}}."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise FormatError(f"{path}: unknown top-level keys {sorted(unknown)}")
    model = _from_dict(ModelConfig, doc.get("model", {}), f"{path}:model")
    train = _from_dict(TrainConfig, doc.get("train", {}), f"{path}:train")
    return model, train


class MFDCDModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(config.seed))
        self.scheduler = dfc.SparsityScheduler(config.lambda0, config.gamma, config.g)
        self.backbone = Backbone(PyramidConfig(
            stem_channels=config.stem_channels,
            stage_channels=list(config.stage_channels),
            blocks_per_stage=config.blocks_per_stage), rng, dtype)
        chans = config.stage_channels
        self.asff_blocks = {}
        self.low_blocks = {}
        if config.enable_dfc:
            variant = config.dfc_variant
            high_levels = {"asff_btff": (0, 1), "all_high": (0, 1, 2, 3),
                           "cross_high": (0, 1), "all_low": (), "same_low": ()}[variant]
            low_levels = {"asff_btff": (2, 3), "all_low": (0, 1, 2, 3),
                          "same_low": (2, 3), "all_high": (), "cross_high": ()}[variant]
            for i in high_levels:
                self.asff_blocks[i] = dfc.AsffBlock(
                    f"dfc.level{i + 1}.asff", chans[i], chans[i],
                    self.scheduler, rng, dtype)
            for i in low_levels:
                self.low_blocks[i] = dfc.BtffBlock(
                    f"dfc.level{i + 1}.lowfuse", chans[i], rng, dtype)
        self.filter_bank = None
        self.mod_heads = []
        if config.enable_tff:
            width = 2 * config.text_dim
            self.topology = tff.build_graph(tff.TOP_K_CATEGORIES)
            self.filter_bank = tff.FilterBank(
                "tff.bank", config.filter_count, width, rng, dtype)
            self.mod_heads = [
                tff.ModulationHead(f"tff.mod{i + 1}", width, chans[i], dtype)
                for i in range(4)
            ]
        dw = config.decoder_width
        self.dec_proj = []
        for i in range(4):
            w = Parameter(f"decoder.proj{i + 1}.weight",
                          ad.uniform_init(rng, (dw, chans[i], 1, 1), chans[i], dtype))
            b = Parameter(f"decoder.proj{i + 1}.bias", np.zeros(dw, dtype=dtype))
            self.dec_proj.append((w, b))
        self.dec_conv = []
        for i in range(3):
            w = Parameter(f"decoder.up{i + 1}.weight",
                          ad.uniform_init(rng, (dw, dw, 3, 3), dw * 9, dtype))
            b = Parameter(f"decoder.up{i + 1}.bias", np.zeros(dw, dtype=dtype))
            self.dec_conv.append((w, b))
        # full-resolution branch on the raw image difference: the pyramid's
        # finest level is stride 4, so region boundaries sharper than that
        # can only come from the inputs themselves
        fw = config.fine_width
        self.fine_w = Parameter("decoder.fine.weight",
                                ad.uniform_init(rng, (fw, 3, 3, 3), 27, dtype))
        self.fine_b = Parameter("decoder.fine.bias", np.zeros(fw, dtype=dtype))
        self.fine_head_w = Parameter(
            "decoder.fine_head.weight",
            ad.uniform_init(rng, (config.class_count, fw, 1, 1), fw, dtype))
        # the coupled-feature diffs are absolute values, so the decoder alone
        # cannot tell which phase held which material; a strided projection of
        # the signed image difference restores temporal direction at stride 4
        self.dir_w = Parameter("decoder.dir.weight",
                               ad.uniform_init(rng, (dw, 3, 4, 4), 48, dtype))
        self.dir_b = Parameter("decoder.dir.bias", np.zeros(dw, dtype=dtype))
        self.head_w = Parameter("decoder.head.weight",
                                ad.uniform_init(rng, (config.class_count, dw, 1, 1), dw, dtype))
        self.head_b = Parameter("decoder.head.bias",
                                np.zeros(config.class_count, dtype=dtype))
        self.wiring_trace = None

    def parameters(self):
        out = list(self.backbone.parameters())
        for i in sorted(self.asff_blocks):
            out += self.asff_blocks[i].parameters()
        for i in sorted(self.low_blocks):
            out += self.low_blocks[i].parameters()
        if self.filter_bank is not None:
            out += self.filter_bank.parameters()
            for h in self.mod_heads:
                out += h.parameters()
        for w, b in self.dec_proj + self.dec_conv:
            out += [w, b]
        out += [self.dir_w, self.dir_b, self.fine_w, self.fine_b,
                self.fine_head_w, self.head_w, self.head_b]
        names = [p.name for p in out]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return out

    def _trace(self, level, phase, source, source_phase):
        if self.wiring_trace is not None:
            self.wiring_trace.append({
                "level": level + 1, "phase": phase,
                "source": source, "source_phase": source_phase})

    def _couple(self, feats, bands, p):
        """Apply the configured DFC wiring; feats/bands indexed [phase][level]."""
        variant = self.config.dfc_variant
        out = [[None] * 4, [None] * 4]
        for i in range(4):
            for t in (0, 1):
                other = 1 - t
                if i in self.asff_blocks:
                    src = t if variant == "asff_btff" else other
                    out[t][i] = dfc.asff_fuse(
                        self.asff_blocks[i], feats[t][i], bands[src][i], p)
                    self._trace(i, t + 1, "high", src + 1)
                elif i in self.low_blocks:
                    same_phase = variant in ("all_low", "same_low")
                    src = t if same_phase else other
                    if same_phase:
                        out[t][i] = dfc.low_fuse(
                            self.low_blocks[i], feats[t][i], bands[src][i].ll)
                    else:
                        out[t][i] = dfc.btff_fuse(
                            self.low_blocks[i], feats[t][i], t, bands[src][i].ll, src)
                    self._trace(i, t + 1, "low", src + 1)
                else:
                    out[t][i] = feats[t][i]
                    self._trace(i, t + 1, "none", t + 1)
        return out

    def _pool_text(self, node_sets):
        """node_sets: per-image (N, 2*text_dim) arrays -> pooled (B, width) Tensor."""
        pooled = []
        for nodes in node_sets:
            e_f = tff.graph_filter(self.filter_bank, self.topology,
                                   np.asarray(nodes, dtype=self.dtype))
            pooled.append(ad.reshape(ad.tensor_mean(e_f, axis=0), (1, e_f.shape[1])))
        return ad.concat(pooled, axis=0) if len(pooled) > 1 else pooled[0]

    def forward(self, t1, t2, nodes_t1=None, nodes_t2=None, p=0, trace=False):
        """Logits (B, class_count, H, W). t1/t2: (B,3,H,W) float in [-0.5, 0.5]."""
        if not isinstance(t1, Tensor):
            t1 = Tensor(np.asarray(t1, dtype=self.dtype))
        if not isinstance(t2, Tensor):
            t2 = Tensor(np.asarray(t2, dtype=self.dtype))
        if t1.shape != t2.shape:
            raise ContractViolation(
                f"bi-temporal rasters misaligned: {t1.shape} vs {t2.shape}")
        self.wiring_trace = [] if trace else None
        feats = [self.backbone.extract(t1), self.backbone.extract(t2)]
        if self.config.enable_dfc:
            bands = [[dwt2(f) for f in phase] for phase in feats]
            coupled = self._couple(feats, bands, p)
        else:
            coupled = feats
            if trace:
                for i in range(4):
                    for t in (0, 1):
                        self._trace(i, t + 1, "none", t + 1)
        if self.config.enable_tff:
            if nodes_t1 is None or nodes_t2 is None:
                raise ContractViolation("TFF is enabled but node features are missing")
            pooled = [self._pool_text(nodes_t1), self._pool_text(nodes_t2)]
            for t in (0, 1):
                coupled[t] = [
                    tff.modulate_pooled(coupled[t][i], pooled[t], self.mod_heads[i])
                    for i in range(4)
                ]
        diffs = [ad.absolute(coupled[0][i] - coupled[1][i]) for i in range(4)]
        if trace:
            self.last_diffs = [d.data.copy() for d in diffs]
        x = conv2d(diffs[3], self.dec_proj[3][0].tensor, self.dec_proj[3][1].tensor)
        for step, i in enumerate((2, 1, 0)):
            w, b = self.dec_conv[step]
            x = relu(conv2d(upsample_bilinear(x, 2), w.tensor, b.tensor, padding=1))
            pw, pb = self.dec_proj[i]
            x = x + conv2d(diffs[i], pw.tensor, pb.tensor)
        x = x + conv2d(t1 - t2, self.dir_w.tensor, self.dir_b.tensor, stride=4)
        logits = conv2d(upsample_bilinear(x, 4), self.head_w.tensor,
                        self.head_b.tensor)
        fine = relu(conv2d(t1 - t2, self.fine_w.tensor,
                           self.fine_b.tensor, padding=1))
        return logits + conv2d(fine, self.fine_head_w.tensor)


def normalize_images(batch_u8):
    """u8 (B,3,H,W) -> float in [-0.5, 0.5]."""
    return np.asarray(batch_u8, dtype=np.float32) / 255.0 - 0.5


def loss_fn(logits, labels):
    return ad.softmax_cross_entropy(logits, labels)


def infer(model: MFDCDModel, t1, t2, nodes_t1=None, nodes_t2=None, p=0,
          return_scores=False):
    """Per-pixel argmax class raster; ties break toward the lower index."""
    logits = model.forward(normalize_images(t1[None] if t1.ndim == 3 else t1),
                           normalize_images(t2[None] if t2.ndim == 3 else t2),
                           nodes_t1, nodes_t2, p=p)
    scores = logits.data
    pred = scores.argmax(axis=1).astype(np.uint8)
    if return_scores:
        return pred, scores
    return pred


@dataclass
class TrainState:
    p: int = 0
    loss_history: list = field(default_factory=list)


class NodeFeatureCache:
    """Descriptor node features per (scene id, phase), computed once."""

    def __init__(self, model_config: ModelConfig, seed=0, embed_provider=None):
        from .datakit import CATEGORIES, PALETTE
        self.prob = tff.StubProbabilityProvider(CATEGORIES, seed=seed,
                                                palette=PALETTE)
        self.embed = embed_provider or tff.StubEmbeddingProvider(
            dim=model_config.text_dim, seed=seed)
        self._cache = {}

    def nodes(self, image, image_id, period: tff.Period):
        key = (image_id, period.value)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        descriptors = tff.build_descriptors(self.prob, image, image_id, period)
        rows = self.embed.embed([d.rendered for d in descriptors])
        nodes = tff.node_features(rows)
        self._cache[key] = nodes
        return nodes

    def pair_nodes(self, pair):
        return (self.nodes(pair.t1, pair.id, tff.Period.T1),
                self.nodes(pair.t2, pair.id, tff.Period.T2))


def augment_batch(rng, t1, t2, labels, cfg: TrainConfig):
    """Seeded flips + brightness/contrast jitter, identical geometry per pair."""
    t1 = t1.astype(np.float32).copy()
    t2 = t2.astype(np.float32).copy()
    labels = labels.copy()
    for b in range(t1.shape[0]):
        if rng.random() < 0.5:
            t1[b] = t1[b, :, :, ::-1]
            t2[b] = t2[b, :, :, ::-1]
            labels[b] = labels[b, :, ::-1]
        if rng.random() < 0.5:
            t1[b] = t1[b, :, ::-1, :]
            t2[b] = t2[b, :, ::-1, :]
            labels[b] = labels[b, ::-1, :]
        for img in (t1, t2):
            delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
            scale = rng.uniform(cfg.contrast_low, cfg.contrast_high)
            img[b] = np.clip((img[b] - 127.5) * scale + 127.5 + delta, 0, 255)
    return t1, t2, labels


def train_step(model, state: TrainState, params, t1, t2, labels,
               nodes_t1, nodes_t2, cfg: TrainConfig):
    """forward -> loss -> backward -> AdamW -> p++; returns the scalar loss."""
    for p_ in params:
        p_.zero_grad()
    logits = model.forward(normalize_images(t1), normalize_images(t2),
                           nodes_t1, nodes_t2, p=state.p)
    loss = loss_fn(logits, labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at iteration {state.p}")
    loss.backward()
    ad.adamw_step(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                  eps=cfg.eps, weight_decay=cfg.weight_decay)
    state.p += 1
    state.loss_history.append(value)
    return value


def train_model(model: MFDCDModel, scenes, cache: NodeFeatureCache,
                cfg: TrainConfig, out_dir=None, log=None):
    """Train on a list of ScenePairs; returns the TrainState.

    Logs iteration/loss/lambda(p)/retained-coefficient fraction every
    `log_every` steps; checkpoints periodically and at the end when
    `out_dir` is given.
    """
    from pathlib import Path

    from .datakit import ScenePair  # noqa: F401  (documented element type)

    if not scenes:
        raise ContractViolation("training needs at least one scene")
    params = model.parameters()
    state = TrainState()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [model.config.seed, 0x7261696E])))
    nodes_all = [cache.pair_nodes(s) for s in scenes] if model.config.enable_tff else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(scenes), size=cfg.batch_size)
        t1 = np.stack([scenes[i].t1 for i in idx])
        t2 = np.stack([scenes[i].t2 for i in idx])
        labels = np.stack([scenes[i].label for i in idx]).astype(np.int64)
        if cfg.augment:
            t1, t2, labels = augment_batch(rng, t1, t2, labels, cfg)
        if nodes_all is not None:
            n1 = [nodes_all[i][0] for i in idx]
            n2 = [nodes_all[i][1] for i in idx]
        else:
            n1 = n2 = None
        value = train_step(model, state, params, t1, t2, labels, n1, n2, cfg)
        if log is not None and (state.p % cfg.log_every == 0 or it == 0):
            lam = model.scheduler.strength(state.p)
            kept = retained_fraction(model, t1[:1], t2[:1], state.p)
            kept_s = f"{kept:.4f}" if kept is not None else "n/a"
            log(f"iter {state.p} loss {value:.4f} lambda {lam:.6f} kept {kept_s}")
        if out is not None and cfg.checkpoint_every and \
                state.p % cfg.checkpoint_every == 0:
            ad.save_checkpoint(out / f"checkpoint_{state.p:06d}.mfdc", params)
    if out is not None:
        ad.save_checkpoint(out / "checkpoint_final.mfdc", params)
    return state


def evaluate(model: MFDCDModel, scenes, cache: NodeFeatureCache | None, p=0):
    """Confusion matrices (semantic + binary) over a list of ScenePairs."""
    from .datakit import CLASS_NAMES
    from .metrics import ConfusionMatrix, binarize

    if model.config.class_count != len(CLASS_NAMES):
        names = [f"class{i}" for i in range(model.config.class_count)]
    else:
        names = CLASS_NAMES
    cm = ConfusionMatrix(names)
    bcm = ConfusionMatrix(["no_change", "change"])
    for scene in scenes:
        if model.config.enable_tff:
            n1, n2 = cache.pair_nodes(scene)
            n1, n2 = [n1], [n2]
        else:
            n1 = n2 = None
        pred = infer(model, scene.t1, scene.t2, n1, n2, p=p)[0]
        cm.accumulate(pred, scene.label)
        bcm.accumulate(binarize(pred), binarize(scene.label))
    return cm, bcm


def retained_fraction(model: MFDCDModel, t1, t2, p):
    """Fraction of merged high-frequency coefficients surviving the threshold at p."""
    if not model.asff_blocks:
        return None
    feats = [model.backbone.extract(Tensor(normalize_images(t1))),
             model.backbone.extract(Tensor(normalize_images(t2)))]
    kept = 0
    total = 0
    cut = model.scheduler.threshold(p)
    for t in (0, 1):
        for i, block in model.asff_blocks.items():
            h = dfc.merge_high_bands(block, dwt2(feats[t][i]))
            kept += int((np.abs(h.data) > cut).sum())
            total += h.data.size
    return kept / total
