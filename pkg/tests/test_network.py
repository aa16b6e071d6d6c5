import json

import numpy as np
import pytest

from batle.config import LossWeights, NetworkConfig
from batle.errors import DataFormatError, ShapeError
from batle.services.losses import loss_gradients
from batle.services.network import (
    backward,
    block_layout,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from batle.services.numeric import RngStream

TERM_WEIGHTS = {
    "l_y": LossWeights(outcome=1, propensity=0, discriminator=0, adversarial=0, reconstruction=0),
    "l_t": LossWeights(outcome=0, propensity=1, discriminator=0, adversarial=0, reconstruction=0),
    "l_d": LossWeights(outcome=0, propensity=0, discriminator=1, adversarial=0, reconstruction=0),
    "l_a": LossWeights(outcome=0, propensity=0, discriminator=0, adversarial=1, reconstruction=0),
    "l_r": LossWeights(outcome=0, propensity=0, discriminator=0, adversarial=0, reconstruction=1),
    "total": LossWeights(outcome=1.0, propensity=0.7, discriminator=0.5, adversarial=0.3, reconstruction=0.9),
}


def random_batch(config, n, seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=(n, config.input_dim))
    d = np.zeros(n, dtype=np.int8)
    d[: max(2, n // 2)] = 1
    t = np.where(d == 1, (np.arange(n) % 2).astype(float), np.nan)
    y = np.where(d == 1, g.normal(size=n), np.nan)
    return x, d, t, y


def small_config(seed):
    g = np.random.default_rng(seed)
    return NetworkConfig(
        input_dim=int(g.integers(2, 5)),
        shared_layer_widths=[int(w) for w in g.integers(2, 5, size=g.integers(1, 3))],
        head_layer_widths=[int(w) for w in g.integers(2, 4, size=g.integers(0, 2))],
        dropout_rate=0.3,
        point_outcomes=bool(seed % 5 == 4),
    )


def test_init_is_deterministic(tiny_net):
    assert init_params(tiny_net, RngStream(1)).equals(init_params(tiny_net, RngStream(1)))
    assert not init_params(tiny_net, RngStream(1)).equals(init_params(tiny_net, RngStream(2)))


def test_output_shapes(tiny_net):
    params = init_params(tiny_net, RngStream(0))
    out = forward(params, np.zeros((7, 4)))
    for array in (out.propensity, out.mu0, out.mu1, out.sigma0, out.sigma1, out.disc_prob):
        assert array.shape == (7,)
    assert out.representation.shape == (7, 5)
    assert out.reconstruction.shape == (7, 4)
    assert np.all(out.sigma0 >= tiny_net.sigma_floor)


def test_layout_mirrors_shared_widths(tiny_net):
    layout = block_layout(tiny_net)
    assert layout["shared"] == [(4, 6), (6, 5)]
    assert layout["decoder"] == [(5, 6), (6, 4)]
    assert layout["outcome0"] == [(5, 4), (4, 2)]


def test_he_initialisation_variance():
    config = NetworkConfig(input_dim=400, shared_layer_widths=[500], head_layer_widths=[])
    weights = init_params(config, RngStream(0))["shared.0.weight"]
    assert weights.var() == pytest.approx(2.0 / 400, rel=0.05)
    assert not init_params(config, RngStream(0))["shared.0.bias"].any()


def test_zero_weights_give_even_probabilities(tiny_net):
    params = init_params(tiny_net, RngStream(0)).zeros_like()
    out = forward(params, np.ones((3, 4)))
    np.testing.assert_array_equal(out.propensity, 0.5)
    np.testing.assert_array_equal(out.disc_prob, 0.5)
    np.testing.assert_array_equal(out.mu1, 0.0)
    np.testing.assert_allclose(out.sigma0, np.log(2.0) + tiny_net.sigma_floor)


def test_dropout_masks_replay(tiny_net):
    params = init_params(tiny_net, RngStream(0))
    x = np.random.default_rng(0).normal(size=(10, 4))
    sampled = forward(params, x, rng=RngStream(5))
    assert sampled.masks
    replayed = forward(params, x, masks=sampled.masks)
    np.testing.assert_array_equal(sampled.mu0, replayed.mu0)
    np.testing.assert_array_equal(sampled.disc_prob, replayed.disc_prob)
    assert "decoder.0" not in sampled.masks


def test_empty_mask_set_means_dropout_off(tiny_net):
    params = init_params(tiny_net, RngStream(0))
    x = np.random.default_rng(0).normal(size=(5, 4))
    off = forward(params, x)
    assert off.masks == {}
    np.testing.assert_array_equal(forward(params, x, masks={}).mu1, off.mu1)


def test_wrong_input_width(tiny_net):
    with pytest.raises(ShapeError):
        forward(init_params(tiny_net, RngStream(0)), np.zeros((2, 3)))


def test_disabling_heads_keeps_other_weights(tiny_net):
    full = init_params(tiny_net, RngStream(3))
    reduced_config = tiny_net.model_copy(update={"discriminator_enabled": False, "reconstruction_enabled": False})
    reduced = init_params(reduced_config, RngStream(3))
    assert not reduced.has_block("discriminator") and not reduced.has_block("decoder")
    for key in reduced.keys():
        np.testing.assert_array_equal(reduced[key], full[key])
    out = forward(reduced, np.zeros((2, 4)))
    assert out.disc_prob is None and out.reconstruction is None


def test_point_outcomes(tiny_net):
    config = tiny_net.model_copy(update={"point_outcomes": True})
    params = init_params(config, RngStream(0))
    assert params["outcome0.1.weight"].shape == (4, 1)
    out = forward(params, np.zeros((2, 4)))
    assert out.sigma0 is None and out.sigma1 is None


def objective(params, x, d, t, y, masks, weights):
    breakdown, _ = loss_gradients(forward(params, x, masks=masks), x, d, t, y, weights)
    return breakdown.total


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("term", sorted(TERM_WEIGHTS))
def test_gradients_match_finite_differences(seed, term):
    config = small_config(seed)
    params = init_params(config, RngStream(seed))
    x, d, t, y = random_batch(config, 6, seed)
    weights = TERM_WEIGHTS[term]
    masks = forward(params, x, rng=RngStream(seed, (99,))).masks

    _, upstream = loss_gradients(forward(params, x, masks=masks), x, d, t, y, weights)
    analytic = backward(params, x, upstream, masks=masks)

    g = np.random.default_rng(seed)
    eps = 1e-6
    for key in params.keys():
        array = params[key]
        for flat in g.choice(array.size, size=min(array.size, 4), replace=False):
            index = np.unravel_index(flat, array.shape)
            original = array[index]
            array[index] = original + eps
            up = objective(params, x, d, t, y, masks, weights)
            array[index] = original - eps
            down = objective(params, x, d, t, y, masks, weights)
            array[index] = original
            numeric = (up - down) / (2 * eps)
            exact = analytic[key][index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4)
            assert error < 1e-4, f"{term} {key}{index}: analytic {exact}, numeric {numeric}"


def test_restricted_backward_touches_only_selected_blocks(tiny_net):
    params = init_params(tiny_net, RngStream(0))
    x, d, t, y = random_batch(tiny_net, 8, 0)
    _, upstream = loss_gradients(forward(params, x), x, d, t, y, LossWeights())
    grads = backward(params, x, upstream, blocks={"discriminator"}, into_shared=False)
    for key, value in grads.items():
        if key.startswith("discriminator."):
            assert np.any(value != 0)
        else:
            assert not np.any(value), key


def test_checkpoint_round_trip(tmp_path, tiny_net):
    params = init_params(tiny_net, RngStream(0))
    path = save_checkpoint(tmp_path / "model.json", params)
    loaded = load_checkpoint(path)
    assert loaded.equals(params)
    assert loaded.config == tiny_net


def test_checkpoint_rejects_foreign_files(tmp_path, tiny_net):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"format": "something-else", "version": 1}))
    with pytest.raises(DataFormatError, match="expected batle-checkpoint"):
        load_checkpoint(other)
    garbage = tmp_path / "garbage.json"
    garbage.write_text("not json")
    with pytest.raises(DataFormatError):
        load_checkpoint(garbage)
    with pytest.raises(DataFormatError, match="not found"):
        load_checkpoint(tmp_path / "missing.json")


def test_checkpoint_rejects_mismatched_arrays(tmp_path, tiny_net):
    path = save_checkpoint(tmp_path / "model.json", init_params(tiny_net, RngStream(0)))
    payload = json.loads(path.read_text())
    del payload["arrays"]["decoder.0.bias"]
    path.write_text(json.dumps(payload))
    with pytest.raises(DataFormatError, match="do not match"):
        load_checkpoint(path)
