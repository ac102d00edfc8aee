import numpy as np
import pytest
import torch

from lighthoi.denoiser import ConditionBundle
from lighthoi.model import CHECKPOINT_FORMAT, Normalizer, load_checkpoint, save_checkpoint


def _inputs(model, B=3, T=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(B, T, model.layout.n_channels, generator=g)
    lam = torch.as_tensor([[3, 7, 11], [0, 0, 0], [model.K, 1, 5]])[:B]
    geom_dim = model.denoiser.geom_mlp[0].in_features
    cond = ConditionBundle.make(torch.arange(B) % len(model.vocabulary), torch.randn(B, geom_dim, generator=g), [False, True, False][:B])
    return x, lam, cond


def test_checkpoint_round_trip_is_exact(micro_model, tmp_path):
    p = save_checkpoint(micro_model, tmp_path / "m.pt", extra={"note": 1})
    m2 = load_checkpoint(p)
    x, lam, cond = _inputs(micro_model)
    with torch.no_grad():
        assert torch.equal(micro_model(x, lam, cond), m2(x, lam, cond))
    np.testing.assert_array_equal(m2.schedule.alpha_bar, micro_model.schedule.alpha_bar)
    np.testing.assert_array_equal(m2.normalizer.mean, micro_model.normalizer.mean)
    assert m2.vocabulary == micro_model.vocabulary
    assert m2.n_basis == micro_model.n_basis
    assert m2.skeleton == micro_model.skeleton


def test_checkpoint_format_is_checked(micro_model, tmp_path):
    p = save_checkpoint(micro_model, tmp_path / "m.pt")
    payload = torch.load(p, weights_only=False)
    assert payload["format_version"] == CHECKPOINT_FORMAT
    payload["format_version"] = CHECKPOINT_FORMAT + 1
    torch.save(payload, p)
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_checkpoint(p)


def test_eval_forward_is_deterministic(micro_model):
    x, lam, cond = _inputs(micro_model)
    with torch.no_grad():
        assert torch.equal(micro_model(x, lam, cond), micro_model(x, lam, cond))


def test_normalizer_round_trip(rng):
    grids = rng.normal(3.0, 2.0, size=(10, 6, 4))
    grids[..., 3] = 1.5  # constant channel hits the std floor
    n = Normalizer.fit(grids)
    assert np.all(n.std > 0)
    np.testing.assert_allclose(n.decode(n.encode(grids)), grids, atol=1e-12)
    t = torch.as_tensor(grids)
    torch.testing.assert_close(n.decode(n.encode(t)), t)
