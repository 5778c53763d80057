from __future__ import annotations

import pytest
import torch

from imed import shuffle
from imed.ensemble import (
    EnsembleModel,
    assemble_v2,
    averaging_params,
    ensemble_forward,
    fusion_specs,
    install_fusion_params,
    lemma2_check,
    supports_averaging,
)
from imed.errors import ConfigError

GRAD = dict(eps=1e-6, atol=1e-8, rtol=1e-4)


def _outputs(n, d_f, classes, batch=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    feats = [torch.randn(batch, d_f, generator=g, dtype=torch.float64) for _ in range(n)]
    logits = [torch.randn(batch, classes, generator=g, dtype=torch.float64) for _ in range(n)]
    return feats, logits


def _model(**kw):
    base = dict(n_components=2, feature_dim=8, num_classes=3, groups=2, depth=2, hidden=16, disc_hidden=8)
    base.update(kw)
    return EnsembleModel(**base).double()


def test_fusion_specs_shapes():
    specs = fusion_specs(3, 16, 2, 3)
    assert [(s.d_in, s.d_out) for s in specs] == [(48, 16), (16, 16), (16, 16)]
    with pytest.raises(ConfigError):
        fusion_specs(2, 8, 2, 0)


def test_layout_and_parameter_count():
    m = EnsembleModel(2, 32, 2, groups=4, depth=2, hidden=256)
    assert m.layout.total == 64 * 32 // 16 + 32 * 32 // 16
    v1 = 2 * 32 * 2
    endogeny = (v1 * 256 + 256) + (256 * 256 + 256) + (256 * m.layout.total + m.layout.total)
    assert m.inference_parameter_count() == endogeny + (32 * 2 + 2)
    assert m.projection is None


def test_randomized_conditioning_when_wide():
    m = EnsembleModel(2, 64, 65, groups=2, depth=1, hidden=8, disc_hidden=8, projection_dim=32)
    assert m.projection is not None
    assert m.endogeny[0].in_features == 2 * 32
    feats, logits = _outputs(2, 64, 65)
    out = m.float()([f.float() for f in feats], [g.float() for g in logits])
    assert out.logits.shape == (4, 65)


def test_assemble_v2_order_and_checks():
    a, b = torch.zeros(2, 3), torch.ones(2, 3)
    assert assemble_v2([a, b])[:, 3:].eq(1).all()
    with pytest.raises(ConfigError):
        assemble_v2([a, torch.ones(2, 4)])
    with pytest.raises(ConfigError):
        assemble_v2([])


def test_forward_input_checks():
    m = _model()
    feats, logits = _outputs(3, 8, 3)
    with pytest.raises(ConfigError, match="2 components"):
        m(feats, logits)
    feats, logits = _outputs(2, 8, 4)
    with pytest.raises(ConfigError):
        m(feats, logits)
    with pytest.raises(ConfigError):
        EnsembleModel(2, 8, 3, fusion_kind="median")


def test_instance_aware_params_vary_per_instance():
    m = _model()
    feats, logits = _outputs(2, 8, 3)
    out = m(feats, logits)
    assert out.fusion_params.shape == (4, m.layout.total)
    assert not torch.allclose(out.fusion_params[0], out.fusion_params[1])


def test_static_params_shared_across_instances():
    m = _model(instance_aware=False)
    out = m(*_outputs(2, 8, 3))
    assert torch.equal(out.fusion_params[0], out.fusion_params[3])
    assert m.endogeny is None


def test_dense_kind_uses_one_group():
    m = _model(fusion_kind="dense")
    assert all(s.groups == 1 for s in m.specs)


def test_avg_kind_is_feature_mean():
    m = _model(fusion_kind="avg")
    feats, logits = _outputs(2, 8, 3)
    out = m(feats, logits)
    torch.testing.assert_close(out.feature, (feats[0] + feats[1]) / 2)
    assert out.fusion_params is None
    with pytest.raises(ConfigError):
        install_fusion_params(m, torch.zeros(3))


def test_fuse_matches_dense_oracle():
    m = _model(tau=1)
    feats, logits = _outputs(2, 8, 3)
    out = m(feats, logits)
    v2 = torch.cat(feats, dim=1)
    for b in range(4):
        x = v2[b : b + 1]
        for i, (spec, p) in enumerate(zip(m.layout.specs, m.layout.split(out.fusion_params[b]))):
            x = x @ shuffle.dense_weight(spec, p)
            if i == 0:
                x = torch.relu(x)
        torch.testing.assert_close(out.feature[b : b + 1], x, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "kw",
    [
        dict(),
        dict(tau=1),
        dict(fusion_kind="dense"),
        dict(instance_aware=False),
        dict(fusion_kind="avg"),
    ],
)
def test_gradcheck_wrt_component_outputs(backend, kw):
    m = _model(**kw)
    feats, logits = _outputs(2, 8, 3, batch=3, seed=1)
    inputs = tuple(t.requires_grad_(True) for t in feats + logits)

    def fn(f0, f1, g0, g1):
        out = ensemble_forward(m, [f0, f1], [g0, g1])
        return out.logits, out.feature

    assert torch.autograd.gradcheck(fn, inputs, **GRAD)


def test_gradcheck_endogeny_weights(backend):
    m = _model(hidden=6)
    feats, logits = _outputs(2, 8, 3, batch=3, seed=2)
    last = m.endogeny[-1]
    w0 = last.weight.detach().clone()

    def fn(w):
        saved = last.weight
        del last.weight
        last.weight = w
        try:
            return m(feats, logits).logits
        finally:
            last.weight = saved

    assert torch.autograd.gradcheck(fn, (w0.requires_grad_(True),), **GRAD)


def test_trainable_groups_split():
    m = _model()
    groups = m.trainable_groups()
    disc = {id(p) for p in m.discriminator.parameters()}
    assert all(id(p) not in disc for p in groups["ensemble"])
    assert {id(p) for p in groups["discriminator"]} == disc
    assert any(p is m.head.weight for p in groups["ensemble"])


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("d_f", [8, 16, 32])
def test_averaging_representable(n, d_f):
    ok = [h for h in shuffle.valid_groups(n * d_f, d_f) if supports_averaging(fusion_specs(n, d_f, h, 1)[0], n, d_f)]
    assert 1 in ok
    h = max(ok)
    m = EnsembleModel(n, d_f, 4, groups=h, depth=1, hidden=8, disc_hidden=8).double()
    install_fusion_params(m, averaging_params(m))
    feats, logits = _outputs(n, d_f, 4, batch=6)
    out = ensemble_forward(m, feats, logits)
    assert (out.feature - torch.stack(feats).mean(0)).abs().max() <= 1e-6


def test_averaging_support_condition():
    # n=2, d_f=8, h=2: feature k of both components lands in subgroup k // 4 -> representable
    assert supports_averaging(fusion_specs(2, 8, 2, 1)[0], 2, 8)
    # n=3, d_f=48, h=4: input groups straddle component boundaries, so the diagonal leaves the support
    assert not supports_averaging(fusion_specs(3, 48, 4, 1)[0], 3, 48)
    m = EnsembleModel(3, 48, 2, groups=4, depth=1, hidden=4, disc_hidden=4)
    with pytest.raises(ConfigError, match="not representable"):
        averaging_params(m)
    with pytest.raises(ConfigError, match="one fusion layer"):
        averaging_params(_model())


def test_label_and_feature_averaging_agree():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        w = torch.randn(5, 7, generator=g, dtype=torch.float64)
        b = torch.randn(5, generator=g, dtype=torch.float64)
        feats = [torch.randn(3, 7, generator=g, dtype=torch.float64) for _ in range(3)]
        label_avg, feat_avg = lemma2_check(w, feats, b)
        assert (label_avg - feat_avg).abs().max() < 1e-12


def test_zeroed_endogeny_gives_zero_feature():
    m = _model()
    with torch.no_grad():
        for p in m.endogeny.parameters():
            p.zero_()
    feats, logits = _outputs(2, 8, 3)
    out = ensemble_forward(m, feats, logits)
    assert torch.count_nonzero(out.fusion_params) == 0
    assert torch.count_nonzero(out.feature) == 0
    assert torch.equal(out.logits, m.head.bias.expand(4, -1))


def test_batch_order_equivariance():
    m = _model()
    feats, logits = _outputs(2, 8, 3, batch=6, seed=2)
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
    out = ensemble_forward(m, feats, logits)
    out_p = ensemble_forward(m, [f[perm] for f in feats], [g[perm] for g in logits])
    assert torch.allclose(out_p.logits, out.logits[perm], atol=1e-12)
