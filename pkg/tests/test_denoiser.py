import numpy as np
import pytest
import torch

from lighthoi.core import GridLayout, ShapeError
from lighthoi.denoiser import PRESETS, ConditionBundle, Denoiser, DenoiserConfig, drop_condition
from lighthoi.schedule import RangeError

K = 50


def make(layout=GridLayout(), seed=0, **kw):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(**{**dict(layers=2, model_dim=32, ffn_dim=64, heads=4), **kw})
    return Denoiser(cfg, layout, n_labels=4, geometry_dim=9, K=K).eval()


def cond(B, null=False):
    return ConditionBundle.make(torch.arange(B) % 4, torch.randn(B, 9), torch.full((B,), null))


def test_presets():
    assert PRESETS["paper"].layers == 8 and PRESETS["paper"].model_dim == 512 and PRESETS["paper"].ffn_dim == 1024
    assert (PRESETS["desk"].layers, PRESETS["desk"].model_dim, PRESETS["desk"].ffn_dim, PRESETS["desk"].heads) == (4, 128, 256, 4)
    assert PRESETS["desk"].condition_dropout_prob == 0.1


@pytest.mark.parametrize("bad", [dict(model_dim=0), dict(heads=5), dict(condition_dropout_prob=1.0), dict(layers=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DenoiserConfig(**{**dict(layers=1, model_dim=16, ffn_dim=16, heads=2), **bad})


def test_shape_contract():
    net = make()
    x = torch.randn(2, 16, GridLayout().n_channels)
    c = cond(2)
    assert net(x, [3, 4, 5], c).shape == x.shape
    assert net(x[0], [3, 4, 5], c.index([0])).shape == x[0].shape
    with pytest.raises(ShapeError):
        net(torch.randn(2, 16, 5), [1, 1, 1], c)


def test_deterministic_eval():
    net = make()
    x, c = torch.randn(2, 8, GridLayout().n_channels), cond(2)
    assert torch.equal(net(x, [1, 2, 3], c), net(x, [1, 2, 3], c))


def test_level_embedding_is_live():
    net = make()
    x, c = torch.randn(1, 8, GridLayout().n_channels), cond(1)
    assert (net(x, [5, 5, 5], c) - net(x, [5, 5, 6], c)).abs().max() > 0


def test_embed_levels_symmetry_and_injective():
    net = make()
    e = net.embed_levels(torch.tensor([7, 7, 7]), 4)
    assert e.shape == (1, 4, 3, 32)
    assert torch.equal(e[0, :, 0], e[0, :, 1]) and torch.equal(e[0, :, 1], e[0, :, 2])
    table = net.embed_levels(torch.arange(K + 1)[:, None].expand(-1, 3), 1)[:, 0, 0]
    d = torch.cdist(table, table) + torch.eye(K + 1)
    assert d.min() > 0
    assert torch.equal(net.embed_levels(torch.tensor([3, 4, 5]), 2), net.embed_levels(torch.tensor([3, 4, 5]), 2))
    with pytest.raises(RangeError):
        net.embed_levels(torch.tensor([0, 0, K + 1]), 2)


def test_frame_permutation_not_identity():
    net = make()
    x, c = torch.randn(1, 10, GridLayout().n_channels), cond(1)
    perm = torch.randperm(10)
    out = net(x, [4, 4, 4], c)
    out_p = net(x[:, perm], [4, 4, 4], c)
    inv = torch.argsort(perm)
    assert not torch.allclose(out_p[:, inv], out, atol=1e-6)


def test_modal_embedding_is_live():
    # equal body and hand widths so the contents can be swapped
    layout = GridLayout(4, 3)
    net = make(layout)
    with torch.no_grad():
        net.in_proj[1].load_state_dict(net.in_proj[0].state_dict())
        net.out_proj[1].load_state_dict(net.out_proj[0].state_dict())
    x, c = torch.randn(1, 6, layout.n_channels), cond(1)
    s = layout.slices()
    swapped = x.clone()
    swapped[..., s["body"]], swapped[..., s["hand"]] = x[..., s["hand"]], x[..., s["body"]]
    out, out_s = net(x, [4, 4, 4], c), net(swapped, [4, 4, 4], c)
    back = out_s.clone()
    back[..., s["body"]], back[..., s["hand"]] = out_s[..., s["hand"]], out_s[..., s["body"]]
    assert not torch.allclose(back, out, atol=1e-6)


def test_null_token_and_geometry():
    net = make()
    x = torch.randn(2, 8, GridLayout().n_channels)
    c = cond(2)
    assert not torch.allclose(net(x, [3, 3, 3], c), net(x, [3, 3, 3], c.as_null()))
    # null drops only the label: changing the label under null is a no-op, changing geometry is not
    c2 = ConditionBundle.make((c.labels + 1) % 4, c.geometry, torch.ones(2, dtype=torch.bool))
    assert torch.equal(net(x, [3, 3, 3], c.as_null()), net(x, [3, 3, 3], c2))
    c3 = ConditionBundle.make(c.labels, c.geometry + 1, torch.ones(2, dtype=torch.bool))
    assert not torch.allclose(net(x, [3, 3, 3], c.as_null()), net(x, [3, 3, 3], c3))


def test_pluggable_label_encoder():
    torch.manual_seed(0)
    enc = lambda labels: torch.ones(labels.shape[0], 3, 16) * labels[:, None, None]
    net = Denoiser(DenoiserConfig(1, 16, 32, 2), GridLayout(), 4, 9, K, label_encoder=enc).eval()
    x = torch.randn(2, 4, GridLayout().n_channels)
    out = net(x, [1, 1, 1], ConditionBundle.make(torch.tensor([0.0, 2.0]), torch.randn(2, 9)))
    assert out.shape == x.shape
    # without a hook, (B, L, D) labels are taken as pre-encoded tokens
    plain = Denoiser(DenoiserConfig(1, 16, 32, 2), GridLayout(), 4, 9, K).eval()
    tokens = torch.randn(2, 5, 16)
    assert plain(x, [1, 1, 1], ConditionBundle.make(tokens, torch.randn(2, 9))).shape == x.shape


def test_drop_condition_rates():
    c = cond(100_000)
    rng = np.random.default_rng(0)
    assert not drop_condition(c, rng, 0.0).is_null.any()
    assert drop_condition(c, rng, 1.0).is_null.all()
    rate = drop_condition(c, rng, 0.1).is_null.float().mean().item()
    assert abs(rate - 0.1) < 0.01
    d = drop_condition(c, rng, 0.5)
    assert torch.equal(d.geometry, c.geometry)
