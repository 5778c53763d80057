from __future__ import annotations

import numpy as np
import pytest
import torch
from torch.func import functional_call

from imed.components import (
    ComponentModel,
    DomainBatch,
    build_components,
    component_loss,
    forward_component,
    gaussian_mmd,
    unique_parameters,
)
from imed.errors import ConfigError

GRAD = dict(eps=1e-6, atol=1e-8, rtol=1e-4)


def _batches(n=6, d=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    s = DomainBatch(torch.randn(n, d, generator=g, dtype=dtype), torch.arange(n) % 2, "source", 2)
    t = DomainBatch(torch.randn(n, d, generator=g, dtype=dtype) + 1, None, "target")
    return s, t


def test_domain_batch_invariants():
    x = torch.zeros(3, 2)
    DomainBatch(x, torch.tensor([0, 1, 0]), "source", 2)
    DomainBatch(x, None, "target")
    with pytest.raises(ConfigError):
        DomainBatch(x, torch.tensor([0, 1, 0]), "target")
    with pytest.raises(ConfigError):
        DomainBatch(x, None, "source")
    with pytest.raises(ConfigError):
        DomainBatch(x, torch.tensor([0, 1, 2]), "source", 2)
    with pytest.raises(ConfigError):
        DomainBatch(x, torch.tensor([0, 1]), "source")
    with pytest.raises(ConfigError):
        DomainBatch(torch.zeros(0, 2), None, "target")
    with pytest.raises(ConfigError):
        DomainBatch(x, None, "validation")


def test_seeded_construction_is_reproducible():
    a = ComponentModel(2, 8, 2, seed=5, method="cdan_like")
    torch.manual_seed(123)  # global RNG must not matter
    b = ComponentModel(2, 8, 2, seed=5, method="cdan_like")
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = ComponentModel(2, 8, 2, seed=6, method="cdan_like")
    assert not torch.equal(a.backbone[0].weight, c.backbone[0].weight)


def test_build_components_shared_head():
    comps = build_components(2, 3, [0, 1, 2], ["source_only"], feature_dim=8, share_head=True)
    assert comps[0].head is comps[1].head is comps[2].head
    n_unique = len(unique_parameters(comps))
    n_all = sum(1 for c in comps for _ in c.parameters())
    assert n_unique == n_all - 2 * 2
    with pytest.raises(ConfigError):
        build_components(2, 3, [0, 1], ["source_only", "jan_like", "cdan_like"])


def test_inference_parameter_count_excludes_adversary():
    c = ComponentModel(2, 8, 2, seed=0, method="cdan_like", hidden=(16,))
    assert c.inference_parameter_count() == (2 * 16 + 16) + (16 * 8 + 8) + (8 * 2 + 2)
    assert c.adversary is not None


def test_forward_component_dim_error():
    c = ComponentModel(3, 4, 2, seed=0)
    s, _ = _batches(d=2)
    with pytest.raises(ConfigError, match="component"):
        forward_component(c, s)


def mmd_oracle(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y])
    d = np.sqrt(((z[:, None] - z[None]) ** 2).sum(-1))
    off = d[~np.eye(len(z), dtype=bool)]
    # torch.median returns the lower middle element
    sigma = np.sort(off)[(off.size - 1) // 2]
    k = lambda a, b: np.exp(-((a[:, None] - b[None]) ** 2).sum(-1) / (2 * sigma**2))
    return float(k(x, x).mean() + k(y, y).mean() - 2 * k(x, y).mean())


def test_gaussian_mmd_oracle():
    g = torch.Generator().manual_seed(1)
    x, y = torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(4, 3, generator=g, dtype=torch.float64) + 0.5
    assert abs(float(gaussian_mmd(x, y)) - mmd_oracle(x.numpy(), y.numpy())) < 1e-9
    assert abs(float(gaussian_mmd(x, x))) < 1e-12


class _Loss(torch.nn.Module):
    def __init__(self, model, s, t):
        super().__init__()
        self.m, self.s, self.t = model, s, t

    def forward(self):
        # reverse=False: the check sees the plain objective gradient
        return component_loss(self.m, self.s, self.t, reverse=False)


@pytest.mark.parametrize("method", ["source_only", "jan_like", "cdan_like"])
def test_component_loss_gradcheck(method):
    model = ComponentModel(2, 4, 2, seed=1, method=method, hidden=(5,)).double()
    s, t = _batches()
    wrap = _Loss(model, s, t)
    # the adversary's 64x64 hidden layer is left fixed to keep the check fast
    named = [(n, p) for n, p in wrap.named_parameters() if n != "m.adversary.net.2.weight"]
    names = [n for n, _ in named]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in named)

    def loss(*ps):
        return functional_call(wrap, dict(zip(names, ps)), (), strict=False)

    assert torch.autograd.gradcheck(loss, params, **GRAD)


def test_component_gradcheck_wrt_inputs():
    model = ComponentModel(3, 4, 2, seed=1, hidden=(5,)).double()
    x = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: model(v)[1], (x,), **GRAD)


def test_component_loss_reverse_flips_feature_gradient():
    model = ComponentModel(2, 4, 2, seed=3, method="cdan_like", hidden=(5,)).double()
    s, t = _batches(seed=2)
    w = model.backbone[0].weight
    g_rev = torch.autograd.grad(component_loss(model, s, t, reverse=True), w)[0]
    g_plain = torch.autograd.grad(component_loss(model, s, t, reverse=False), w)[0]
    g_ce = torch.autograd.grad(component_loss(model, s, t, weight=0.0), w)[0]
    torch.testing.assert_close(g_rev - g_ce, -(g_plain - g_ce))


def test_source_only_ignores_target():
    model = ComponentModel(2, 4, 2, seed=0).double()
    s, t = _batches()
    _, t2 = _batches(seed=9)
    assert torch.equal(component_loss(model, s, t), component_loss(model, s, t2))
