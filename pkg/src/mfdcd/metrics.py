"""Confusion-matrix accumulation and evaluation metrics.

Per class c with TP = counts[c][c], FP = column sum minus TP,
FN = row sum minus TP:
    Rec = TP/(TP+FN)   Pre = TP/(TP+FP)
    F1  = 2/(Rec^-1 + Pre^-1)   IoU = TP/(TP+FP+FN)
Zero denominators are reported as undefined, never NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


class ConfusionMatrix:
    """counts[g][p] = pixels with ground truth g predicted as p."""

    def __init__(self, class_names):
        self.class_names = list(class_names)
        k = len(self.class_names)
        if k < 2:
            raise ContractViolation("need at least two classes")
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def k(self):
        return len(self.class_names)

    def accumulate(self, pred, label):
        pred = np.asarray(pred)
        label = np.asarray(label)
        if pred.shape != label.shape:
            raise ContractViolation(
                f"pred shape {pred.shape} != label shape {label.shape}")
        for name, arr in (("pred", pred), ("label", label)):
            if arr.min() < 0 or arr.max() >= self.k:
                raise ContractViolation(
                    f"{name} contains class {int(arr.max())} outside [0,{self.k})")
        flat = label.reshape(-1).astype(np.int64) * self.k + pred.reshape(-1)
        self.counts += np.bincount(flat, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix"):
        if other.class_names != self.class_names:
            raise ContractViolation("cannot merge confusion matrices over different classes")
        self.counts += other.counts
        return self

    def total(self):
        return int(self.counts.sum())


@dataclass
class MetricRow:
    class_name: str
    iou: float | None
    f1: float | None
    rec: float | None
    pre: float | None

    @property
    def defined(self):
        return self.iou is not None


def _ratio(num, den):
    return num / den if den > 0 else None


def per_class_metrics(cm: ConfusionMatrix):
    rows = []
    counts = cm.counts
    for c, name in enumerate(cm.class_names):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum() - tp)
        fn = int(counts[c, :].sum() - tp)
        rec = _ratio(tp, tp + fn)
        pre = _ratio(tp, tp + fp)
        iou = _ratio(tp, tp + fp + fn)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)  # harmonic mean, defined iff iou is
        rows.append(MetricRow(name, iou, f1, rec, pre))
    return rows


def miou(rows, include_background=True):
    """Mean of the defined IoU values; returns (mean, excluded_class_names)."""
    selected = rows if include_background else rows[1:]
    defined = [r.iou for r in selected if r.defined]
    excluded = [r.class_name for r in selected if not r.defined]
    if not defined:
        raise ContractViolation("all classes undefined: cannot compute mIoU")
    return float(np.mean(defined)), excluded


def binarize(raster):
    """0 where background (class 0), 1 elsewhere."""
    return (np.asarray(raster) != 0).astype(np.uint8)


def binary_confusion(pred, label):
    cm = ConfusionMatrix(["no_change", "change"])
    cm.accumulate(binarize(pred), binarize(label))
    return cm


def _fmt(x):
    return "   --" if x is None else f"{100 * x:5.2f}"


def report(cm: ConfusionMatrix, binary_cm: ConfusionMatrix | None = None):
    """Build the JSON-able metric report plus an aligned text table."""
    rows = per_class_metrics(cm)
    mean_with_bg, excl_with = miou(rows, include_background=True)
    mean_no_bg, excl_no = miou(rows, include_background=False)
    doc = {
        "per_class": [
            {"class": r.class_name,
             "iou": r.iou, "f1": r.f1, "rec": r.rec, "pre": r.pre}
            for r in rows
        ],
        "miou": {
            "include_background": mean_with_bg,
            "exclude_background": mean_no_bg,
            "excluded_classes": {"include_background": excl_with,
                                 "exclude_background": excl_no},
        },
        "confusion_matrix": cm.counts.tolist(),
        "class_names": cm.class_names,
    }
    lines = [f"{'class':<24} {'IoU':>6} {'F1':>6} {'Rec':>6} {'Pre':>6}"]
    for r in rows:
        lines.append(f"{r.class_name:<24} {_fmt(r.iou):>6} {_fmt(r.f1):>6} "
                     f"{_fmt(r.rec):>6} {_fmt(r.pre):>6}")
    lines.append(f"{'mIoU (with background)':<24} {_fmt(mean_with_bg):>6}")
    lines.append(f"{'mIoU (no background)':<24} {_fmt(mean_no_bg):>6}")
    if binary_cm is not None:
        brows = per_class_metrics(binary_cm)
        change = brows[1]
        doc["binary_cd"] = {"iou": change.iou, "f1": change.f1,
                            "rec": change.rec, "pre": change.pre,
                            "confusion_matrix": binary_cm.counts.tolist()}
        lines.append(f"{'binary CD (change)':<24} {_fmt(change.iou):>6} "
                     f"{_fmt(change.f1):>6} {_fmt(change.rec):>6} {_fmt(change.pre):>6}")
    return doc, "\n".join(lines) + "\n"


def write_report(out_dir, doc, text):
    import csv
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        json.dump(doc, f, indent=2)
    with open(out / "metrics.txt", "w") as f:
        f.write(text)
    with open(out / "per_class.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou", "f1", "rec", "pre"])
        for row in doc["per_class"]:
            writer.writerow([row["class"], row["iou"], row["f1"], row["rec"], row["pre"]])


def render_figures(out_dir, doc):
    """Confusion-matrix heat map and per-class IoU bars, saved as PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = doc["class_names"]
    counts = np.asarray(doc["confusion_matrix"], dtype=np.float64)
    norm = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, label="row-normalized count")
    fig.tight_layout()
    fig.savefig(out / "confusion_matrix.png", dpi=150)
    plt.close(fig)

    ious = [row["iou"] if row["iou"] is not None else 0.0 for row in doc["per_class"]]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), [100 * v for v in ious], color="#3b6ea5")
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.axhline(100 * doc["miou"]["include_background"], color="crimson",
               linestyle="--", linewidth=1, label="mIoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "per_class_iou.png", dpi=150)
    plt.close(fig)
