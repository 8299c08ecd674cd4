import numpy as np
import pytest

from vrcodec.conv import causal_mask
from vrcodec.model import ArchitectureConfig, ContextRunner, VariableRateModel
from vrcodec.tensor import Tensor

SMALL = ArchitectureConfig(n_lambdas=2, trunk_channels=8, latent_channels=4, hyper_channels=8,
                           hyper_latent_channels=3, context_channels=8, seed=3)


@pytest.fixture(scope="module")
def model():
    m = VariableRateModel(SMALL).astype(np.float64)
    rng = np.random.default_rng(0)
    for p in m.parameters():
        if p.shape[0] == 2 and p.ndim == 2:  # conditioning banks
            p.assign(p.data + rng.normal(scale=0.2, size=p.shape))
    return m


def test_default_architecture():
    cfg = ArchitectureConfig()
    assert cfg.downsampling == 16 and cfg.latent_factor == 4
    assert VariableRateModel(cfg).num_parameters() == 679_662


def test_config_round_trip():
    cfg = ArchitectureConfig(n_lambdas=3, encoder_strides=(2, 2, 2, 1), gdn_conditioned=True, seed=4)
    assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.downsampling == 32


def test_forward_shapes(model):
    x = np.random.default_rng(1).random((2, 3, 32, 48))
    out = model(x, [0, 1], [0.5, 2.0], rng=np.random.default_rng(0))
    assert out.x_hat.shape == x.shape
    assert out.z.shape == (2, 4, 8, 12)
    assert out.w.shape == (2, 3, 2, 3)
    assert out.hyper.shape == (2, 8, 8, 12)
    assert out.gaussian.mu.shape == out.z.shape
    assert out.bits.shape == (2,) and np.all(out.bits.data > 0)


def test_round_mode_is_deterministic(model):
    x = np.random.default_rng(1).random((1, 3, 16, 16))
    a = model(x, 0, 1.0, mode="round")
    b = model(x, 0, 1.0, mode="round")
    np.testing.assert_array_equal(a.x_hat.data, b.x_hat.data)
    np.testing.assert_allclose(a.z.data / 1.0, np.round(a.z.data), atol=1e-12)
    with pytest.raises(ValueError):
        model(x, 0, 1.0, mode="bogus")


def test_lambda_changes_output(model):
    x = np.random.default_rng(1).random((1, 3, 16, 16))
    a = model(x, 0, 1.0, mode="round").x_hat.data
    b = model(x, 1, 1.0, mode="round").x_hat.data
    assert not np.allclose(a, b)


def test_delta_does_not_reach_the_layers(model):
    x = Tensor(np.random.default_rng(1).random((1, 3, 16, 16)))
    onehot = model._onehot([0])
    y = model.analysis(x, onehot).data
    out = model(x, 0, 1.7, mode="round")
    np.testing.assert_array_equal(out.y.data, y)


def test_context_runner_matches_batched_model(model):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1, 4, 6, 7)).round()
    hyper = rng.normal(size=(1, 8, 6, 7))
    for lam in range(2):
        params = model.context_predict(Tensor(z), Tensor(hyper), model._onehot([lam]))
        runner = ContextRunner(model, lam)
        zpad = runner.pad(z[0])
        for i in range(6):
            for j in range(7):
                mu, sigma = runner.params_at(zpad, hyper[0], i, j)
                np.testing.assert_allclose(mu, params.mu.data[0, :, i, j], rtol=1e-9, atol=1e-12)
                np.testing.assert_allclose(sigma, params.sigma.data[0, :, i, j], rtol=1e-9, atol=1e-12)


def test_context_model_is_causal_on_8x8(model):
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, 4, 8, 8))
    hyper = Tensor(rng.normal(size=(1, 8, 8, 8)))
    onehot = model._onehot([0])
    base = model.context_predict(Tensor(z), hyper, onehot)
    base = np.concatenate([base.mu.data, base.sigma.data], axis=1)[0].reshape(8, 64)
    for c in range(4):
        for pos in range(64):
            bumped = z.copy()
            bumped[0, c, pos // 8, pos % 8] += 3.0
            out = model.context_predict(Tensor(bumped), hyper, onehot)
            out = np.concatenate([out.mu.data, out.sigma.data], axis=1)[0].reshape(8, 64)
            changed = np.flatnonzero(np.any(out != base, axis=0))
            assert changed.size == 0 or changed.min() > pos


def test_masked_weights_are_ignored(model):
    rng = np.random.default_rng(6)
    z = Tensor(rng.normal(size=(1, 4, 6, 6)))
    hyper = Tensor(rng.normal(size=(1, 8, 6, 6)))
    onehot = model._onehot([1])
    before = model.context_predict(z, hyper, onehot).mu.data
    kernel = model.context_conv.kernel
    saved = kernel.data.copy()
    hidden = ~causal_mask(5, 5, "A").astype(bool)
    kernel.data[:, :, hidden] = rng.normal(scale=100.0, size=kernel.data[:, :, hidden].shape)
    try:
        np.testing.assert_array_equal(model.context_predict(z, hyper, onehot).mu.data, before)
    finally:
        kernel.assign(saved)


def test_sigma_floor(model):
    z = Tensor(np.zeros((1, 4, 4, 4)))
    hyper = Tensor(np.zeros((1, 8, 4, 4)))
    last = model.fusion[-1]
    saved = last.v.data.copy()
    last.v.assign(np.full_like(saved, -1e4))
    try:
        sigma = model.context_predict(z, hyper, model._onehot([0])).sigma.data
        np.testing.assert_allclose(sigma, 1e-3)
    finally:
        last.v.assign(saved)
