"""Shared test helpers: finite-difference oracles and tiny model factories."""

import numpy as np
import pytest

from tsarank import autodiff as ad
from tsarank.model import LmConfig, new_model


def central_difference(f, tensor, index, eps=1e-4):
    """Two-sided finite difference of scalar f() w.r.t. tensor.values[index].

    Evaluates the loss only (never the backward pass), so it stays an
    independent check on reverse-mode gradients.
    """
    original = tensor.values[index]
    tensor.values[index] = original + eps
    up = f()
    tensor.values[index] = original - eps
    down = f()
    tensor.values[index] = original
    return (up - down) / (2.0 * eps)


def relative_error(a, b):
    # The 1e-6 floor marks the resolution limit of central differences with
    # step 1e-4 on O(1) losses (rounding noise ~1e-11 in the difference);
    # below it "relative" error is noise over noise.
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def sample_coordinates(rng, params, count):
    """Random (name, index) coordinates across a parameter dict."""
    names = sorted(params)
    out = []
    for _ in range(count):
        name = names[int(rng.integers(len(names)))]
        shape = params[name].shape
        index = tuple(int(rng.integers(s)) for s in shape)
        out.append((name, index))
    return out


def check_gradients(loss_fn, params, coords, eps=1e-4):
    """Compare autodiff vs central differences at the given coordinates.

    Returns the list of relative errors, one per coordinate.
    """
    ad.zero_grads(params.values())
    loss = loss_fn()
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values)) for name, p in params.items()}
    ad.zero_grads(params.values())

    def value():
        with ad.no_grad():
            return loss_fn().item()

    errors = []
    for name, index in coords:
        fd = central_difference(value, params[name], index, eps)
        errors.append(relative_error(grads[name][index], fd))
    return errors


@pytest.fixture
def tiny_config():
    return LmConfig(vocab_size=260, num_layers=2, model_dim=32, num_heads=4, ffn_dim=64, max_sequence_length=96)


@pytest.fixture
def tiny_model(tiny_config):
    return new_model(tiny_config, seed=1234)
