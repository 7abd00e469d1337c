"""Command-line entry point: gen | stats | train | eval | infer | export-vis | selftest.

Exit codes: 0 success, 1 contract violation, 2 I/O or format error,
3 training divergence. Errors print a single machine-parseable line
"ERROR <kind>: <message>" on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datakit, metrics, tff
from .errors import ContractViolation, DivergenceError, FormatError
from .pipeline import (MFDCDModel, ModelConfig, NodeFeatureCache, TrainConfig,
                       load_run_config, normalize_images, train_model, evaluate)

# distinct overlay colors, index = transition class
CLASS_COLORS = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128),
], dtype=np.uint8)


def _log_factory(deterministic):
    if deterministic:
        return lambda msg: print(msg, flush=True)
    return lambda msg: print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def _load_configs(args):
    if getattr(args, "config", None):
        model_cfg, train_cfg = load_run_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if getattr(args, "seed", None) is not None:
        model_cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        train_cfg.iterations = args.iterations
    return model_cfg, train_cfg


def _load_scenes(manifest_path, split):
    manifest = datakit.read_manifest(manifest_path)
    root = Path(manifest_path).parent
    return [datakit.load_pair(root, e) for e in manifest.split(split)], manifest


def cmd_gen(args):
    gc = datakit.GenConfig(size=args.size)
    datakit.generate_corpus(args.out, seed=args.seed if args.seed is not None else 0,
                            train_scenes=args.train_scenes, test_scenes=args.test_scenes,
                            size=args.size, gen_config=gc)
    print(f"wrote corpus to {args.out} "
          f"({args.train_scenes} train / {args.test_scenes} test, {args.size}px)")
    return 0


def cmd_stats(args):
    manifest = datakit.read_manifest(args.manifest)
    doc = datakit.stats(manifest, Path(args.manifest).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stats.json", "w") as f:
        json.dump(doc, f, indent=2)
    text = datakit.stats_text(doc)
    (out / "stats.txt").write_text(text)
    _stats_figure(out, doc)
    print(text, end="")
    return 0


def _stats_figure(out, doc):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = doc["classes"]
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(names))
    ax.bar(x - 0.2, doc["train"]["pixel_counts"], width=0.4, label="train")
    ax.bar(x + 0.2, doc["test"]["pixel_counts"], width=0.4, label="test")
    ax.set_xticks(x, names, rotation=90, fontsize=7)
    ax.set_ylabel("pixels")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "class_distribution.png", dpi=150)
    plt.close(fig)


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args)
    log = _log_factory(args.deterministic)
    scenes, _ = _load_scenes(args.manifest, "train")
    model = MFDCDModel(model_cfg)
    cache = NodeFeatureCache(model_cfg, seed=model_cfg.seed)
    state = train_model(model, scenes, cache, train_cfg, out_dir=args.out, log=log)
    meta = {"final_iteration": state.p, "model": vars(model_cfg) | {
        "stage_channels": list(model_cfg.stage_channels)}}
    with open(Path(args.out) / "train_meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    _loss_figure(Path(args.out), state.loss_history)
    log(f"final loss {state.loss_history[-1]:.4f} after {state.p} iterations")
    return 0


def _loss_figure(out, history):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(history, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy loss")
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=150)
    plt.close(fig)


def _restore_model(checkpoint, config_path=None):
    meta_path = Path(checkpoint).parent / "train_meta.json"
    if config_path:
        model_cfg, _ = load_run_config(config_path)
        p_final = 0
        if meta_path.exists():
            with open(meta_path) as f:
                p_final = json.load(f).get("final_iteration", 0)
    elif meta_path.exists():
        with open(meta_path) as f:
            meta = json.load(f)
        from .pipeline import _from_dict
        model_cfg = _from_dict(ModelConfig, meta["model"], str(meta_path))
        p_final = meta.get("final_iteration", 0)
    else:
        model_cfg, p_final = ModelConfig(), 0
    model = MFDCDModel(model_cfg)
    ad.load_checkpoint(checkpoint, model.parameters())
    return model, p_final


def cmd_eval(args):
    model, p_final = _restore_model(args.checkpoint, args.config)
    scenes, _ = _load_scenes(args.manifest, args.split)
    cache = NodeFeatureCache(model.config, seed=model.config.seed)
    cm, bcm = evaluate(model, scenes, cache, p=p_final)
    doc, text = metrics.report(cm, bcm)
    metrics.write_report(args.out, doc, text)
    metrics.render_figures(args.out, doc)
    print(text, end="")
    return 0


def cmd_infer(args):
    model, p_final = _restore_model(args.checkpoint, args.config)
    t1 = datakit.read_raster(args.t1, expect_dtype=np.uint8)
    t2 = datakit.read_raster(args.t2, expect_dtype=np.uint8)
    cache = NodeFeatureCache(model.config, seed=model.config.seed)
    from .pipeline import infer
    pair_id = Path(args.t1).stem
    if model.config.enable_tff:
        n1 = [cache.nodes(t1, pair_id, tff.Period.T1)]
        n2 = [cache.nodes(t2, pair_id, tff.Period.T2)]
    else:
        n1 = n2 = None
    pred = infer(model, t1, t2, n1, n2, p=p_final)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datakit.write_raster(out / "prediction.rbr", pred[None])
    overlay = CLASS_COLORS[pred % len(CLASS_COLORS)].transpose(2, 0, 1)
    blend = (0.5 * t2.astype(np.float64) + 0.5 * overlay).astype(np.uint8)
    datakit.write_ppm(out / "prediction.ppm", blend)
    print(f"wrote {out / 'prediction.rbr'} and overlay")
    return 0


def cmd_export_vis(args):
    model, p_final = _restore_model(args.checkpoint, args.config)
    t1 = datakit.read_raster(args.t1, expect_dtype=np.uint8)
    t2 = datakit.read_raster(args.t2, expect_dtype=np.uint8)
    cache = NodeFeatureCache(model.config, seed=model.config.seed)
    pair_id = Path(args.t1).stem
    from .autodiff import Tensor
    from .wavelet import dwt2
    feats = [model.backbone.extract(Tensor(normalize_images(t1[None]))),
             model.backbone.extract(Tensor(normalize_images(t2[None])))]
    if model.config.enable_dfc:
        bands = [[dwt2(f) for f in phase] for phase in feats]
        coupled = model._couple(feats, bands, p_final)
    else:
        coupled = feats
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.6))
    for i in range(4):
        diff = np.abs(coupled[0][i].data - coupled[1][i].data).mean(axis=(0, 1))
        lo, hi = diff.min(), diff.max()
        gray = np.zeros_like(diff, dtype=np.uint8) if hi <= lo else \
            np.round(255 * (diff - lo) / (hi - lo)).astype(np.uint8)
        datakit.write_pgm(out / f"diff_level{i + 1}.pgm", gray)
        axes[i].imshow(diff, cmap="inferno")
        axes[i].set_title(f"level {i + 1}")
        axes[i].axis("off")
    fig.tight_layout()
    fig.savefig(out / "diff_levels.png", dpi=150)
    plt.close(fig)
    print(f"wrote per-level difference maps to {out}")
    return 0


def cmd_selftest(args):
    from . import selftest
    return selftest.run(verbose=True)


def build_parser():
    p = argparse.ArgumentParser(prog="mfdcd",
                                description="frequency-domain change detection pipeline")
    p.add_argument("--deterministic", action="store_true",
                   help="timestamp-free logs so runs diff cleanly")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-scenes", type=int, default=200)
    g.add_argument("--test-scenes", type=int, default=50)
    g.add_argument("--size", type=int, default=256)
    g.set_defaults(fn=cmd_gen)

    s = sub.add_parser("stats", help="corpus class statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_stats)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict one bi-temporal pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--t1", required=True)
    i.add_argument("--t2", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("export-vis", help="per-level difference heat maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--t1", required=True)
    v.add_argument("--t2", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config")
    v.set_defaults(fn=cmd_export_vis)

    st = sub.add_parser("selftest", help="run the per-module invariant suites")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractViolation as exc:
        print(f"ERROR contract: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"ERROR divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
