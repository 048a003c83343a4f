"""Depth decoder: four-scale disparity maps, gate behavior, wiring."""

import numpy as np
import pytest

from monovit import autodiff as ad
from monovit.autodiff import Tensor
from monovit.decoder import AttenBlock, Decoder

TINY = (8, 12, 16, 24, 32)


def _pyramid(rng, channels, h, w, n=1):
    """Synthetic encoder output: level i at (h, w) / 2^(i+1)."""
    return [Tensor(rng.uniform(size=(n, c, h >> (i + 1), w >> (i + 1))),
                   requires_grad=True)
            for i, c in enumerate(channels)]


def test_disparity_shapes_finest_first_at_64x192():
    rng = np.random.default_rng(0)
    dec = Decoder((32, 48, 64, 96, 128), rng)
    disps = dec(_pyramid(rng, (32, 48, 64, 96, 128), 64, 192))
    assert [d.shape for d in disps] == [
        (1, 1, 64, 192), (1, 1, 32, 96), (1, 1, 16, 48), (1, 1, 8, 24)]


def test_disparities_strictly_inside_unit_interval():
    rng = np.random.default_rng(1)
    dec = Decoder(TINY, rng)
    disps = dec(_pyramid(rng, TINY, 64, 64, n=2))
    for d in disps:
        assert 0.0 < d.data.min() and d.data.max() < 1.0


def test_attention_gates_only_attenuate():
    rng = np.random.default_rng(2)
    block = AttenBlock(rng, 16)
    x = rng.normal(size=(2, 16, 8, 8))
    out = block(Tensor(x)).data
    assert np.all(np.abs(out) <= np.abs(x))
    assert np.abs(out).sum() < np.abs(x).sum()


def test_gates_can_be_disabled():
    rng = np.random.default_rng(3)
    dec = Decoder(TINY, rng, use_atten=False)
    names = [n for n, _ in dec.named_parameters()]
    assert not any("atten" in n for n in names)
    disps = dec(_pyramid(np.random.default_rng(4), TINY, 64, 64))
    assert [d.shape for d in disps] == [
        (1, 1, 64, 64), (1, 1, 32, 32), (1, 1, 16, 16), (1, 1, 8, 8)]


def test_gradient_reaches_every_pyramid_level():
    rng = np.random.default_rng(5)
    dec = Decoder(TINY, rng)
    pyramid = _pyramid(rng, TINY, 64, 64)
    disps = dec(pyramid)
    total = None
    for d in disps:
        s = ad.sum_(d)
        total = s if total is None else total + s
    ad.backward(total)
    for level in pyramid:
        assert level.grad is not None
        assert np.abs(level.grad).max() > 0


def test_same_seed_same_disparities():
    x = _pyramid(np.random.default_rng(6), TINY, 64, 64)
    a = Decoder(TINY, np.random.default_rng(7))(x)
    b = Decoder(TINY, np.random.default_rng(7))(x)
    for da, db in zip(a, b):
        np.testing.assert_array_equal(da.data, db.data)


def test_rejects_wrong_pyramid_length():
    rng = np.random.default_rng(8)
    dec = Decoder(TINY, rng)
    with pytest.raises(ValueError, match="5-level"):
        dec(_pyramid(rng, TINY[:4], 64, 64))


def test_rejects_wrong_channel_count():
    with pytest.raises(ValueError, match="5 encoder stage"):
        Decoder((8, 12, 16), np.random.default_rng(9))
