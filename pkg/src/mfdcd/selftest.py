"""Fast per-module invariant suites for `mfdcd selftest`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dfc, metrics, spectral, tff
from .wavelet import dwt2, idwt2


def _wavelet():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = ad.Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float64))
        b = dwt2(x)
        assert np.abs(idwt2(b).data - x.data).max() < 1e-12
        energy = sum(float((t.data ** 2).sum()) for t in (b.ll, b.hl, b.lh, b.hh))
        assert abs(energy - float((x.data ** 2).sum())) < 1e-6 * energy


def _spectral():
    rng = np.random.default_rng(12)
    for n in (1, 2, 7, 16):
        x = rng.standard_normal((n, 3))
        spec = spectral.dft(x)
        assert np.abs(spectral.idft(spec) - x).max() < 1e-10
        assert abs((x ** 2).sum() - (spec.re ** 2 + spec.im ** 2).sum() / n) < 1e-10


def _sparsity():
    sch = dfc.SparsityScheduler(1.0, 0.0001, 0.1)
    assert sch.strength(0) == 1.0
    assert abs(sch.strength(10000) - np.exp(-1)) < 1e-12
    rng = np.random.default_rng(13)
    h = ad.Tensor(rng.standard_normal((1, 2, 8, 8)))
    prev = None
    for p in (0, 1000, 10000, 100000):
        kept = dfc.sparse_threshold(h, sch, p).data != 0
        if prev is not None:
            assert np.all(kept | ~prev)  # support only grows
        prev = kept


def _graph():
    for n in (1, 2, 5, 16):
        topo = tff.build_graph(n)
        assert topo.edge_count == n * (n - 1) // 2
        assert np.abs(topo.adjacency_norm.sum(axis=1) - 1).max() < 1e-12


def _metrics():
    cm = metrics.ConfusionMatrix(["bg", "a", "b"])
    rng = np.random.default_rng(14)
    pred = rng.integers(0, 3, (16, 16))
    label = rng.integers(0, 3, (16, 16))
    cm.accumulate(pred, label)
    for r in metrics.per_class_metrics(cm):
        if r.defined:
            assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) < 1e-12


def _gradients():
    rng = np.random.default_rng(15)
    x = ad.Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float64),
                  requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float64),
                  requires_grad=True)

    def fn(x, w):
        y = ad.conv2d(x, w, stride=1, padding=1)
        return ad.tensor_sum(ad.mul(y, y))

    assert ad.grad_check(fn, [x, w]) < 1e-6


SUITES = [
    ("wavelet", _wavelet),
    ("spectral", _spectral),
    ("sparsity", _sparsity),
    ("graph", _graph),
    ("metrics", _metrics),
    ("gradients", _gradients),
]


def run(verbose=True):
    failed = 0
    for name, fn in SUITES:
        try:
            fn()
        except AssertionError as exc:
            failed += 1
            if verbose:
                print(f"FAIL {name}: {exc}")
        else:
            if verbose:
                print(f"PASS {name}")
    return 1 if failed else 0
