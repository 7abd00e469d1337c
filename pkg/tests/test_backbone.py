import numpy as np
import pytest

from mfdcd import autodiff as ad
from mfdcd.backbone import Backbone, PyramidConfig
from mfdcd.errors import ContractViolation


def _backbone(seed=0, dtype=np.float32, **kw):
    cfg = PyramidConfig(**kw)
    return Backbone(cfg, np.random.default_rng(seed), dtype=dtype)


class TestShapes:
    def test_stride_contract_256(self):
        bb = _backbone()
        x = ad.Tensor(np.random.default_rng(1).standard_normal((2, 3, 256, 256))
                      .astype(np.float32))
        feats = bb.extract(x)
        assert len(feats) == 4
        sizes = [(f.shape[2], f.shape[3]) for f in feats]
        assert sizes == [(64, 64), (32, 32), (16, 16), (8, 8)]
        chans = [f.shape[1] for f in feats]
        assert chans == list(bb.config.stage_channels)

    def test_stride_contract_64(self):
        bb = _backbone()
        x = ad.Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        feats = bb.extract(x)
        assert [(f.shape[2], f.shape[3]) for f in feats] == \
            [(16, 16), (8, 8), (4, 4), (2, 2)]

    def test_misaligned_input(self):
        bb = _backbone()
        with pytest.raises(ContractViolation, match="64"):
            bb.extract(ad.Tensor(np.zeros((1, 3, 96, 96), dtype=np.float32)))

    def test_wrong_channel_count(self):
        bb = _backbone()
        with pytest.raises(ContractViolation):
            bb.extract(ad.Tensor(np.zeros((1, 4, 64, 64), dtype=np.float32)))


class TestDeterminism:
    def test_same_seed_same_params(self):
        a = _backbone(seed=7)
        b = _backbone(seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.tensor.data, pb.tensor.data)

    def test_different_seed_differs(self):
        a = _backbone(seed=7)
        b = _backbone(seed=8)
        assert any(not np.array_equal(pa.tensor.data, pb.tensor.data)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_repeatable_forward(self):
        bb = _backbone(seed=3)
        x = ad.Tensor(np.random.default_rng(0).standard_normal((1, 3, 64, 64))
                      .astype(np.float32))
        f1 = bb.extract(x)
        f2 = bb.extract(ad.Tensor(x.data.copy()))
        for a, b in zip(f1, f2):
            np.testing.assert_array_equal(a.data, b.data)

    def test_init_bounds(self):
        bb = _backbone(seed=5)
        for p in bb.parameters():
            if p.tensor.data.ndim != 4:
                continue
            fan_in = int(np.prod(p.tensor.data.shape[1:]))
            bound = (1.0 / fan_in) ** 0.5
            assert np.abs(p.tensor.data).max() <= bound + 1e-7


class TestGradients:
    def test_grad_check_small(self):
        bb = _backbone(seed=1, dtype=np.float64,
                       stem_channels=4, stage_channels=(4, 6, 8, 8),
                       blocks_per_stage=1)
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.standard_normal((1, 3, 64, 64)), requires_grad=True)
        probes = None

        def fn(x):
            nonlocal probes
            feats = bb.extract(x)
            if probes is None:
                probes = [ad.Tensor(rng.standard_normal(f.shape)) for f in feats]
            total = None
            for f, p in zip(feats, probes):
                term = ad.tensor_sum(ad.mul(f, p))
                total = term if total is None else ad.add(total, term)
            return total

        assert ad.grad_check(fn, [x], sample=48, rng=np.random.default_rng(9)) < 1e-6
