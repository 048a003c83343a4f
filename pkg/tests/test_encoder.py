"""Joint CNN/transformer encoder: pyramid shapes, attention math, paths.

The attention oracle is hand-derived: with per-channel token softmax,
k-channel logits (ln 2, 0) weight the two tokens 2/3 vs 1/3 and zero
logits weight them 1/2 each, so the context matrix and outputs follow by
plain arithmetic (worked out in the test body).
"""

import math

import numpy as np
import pytest

from monovit import autodiff as ad
from monovit.autodiff import Tensor
from monovit.encoder import Encoder, EncoderConfig, factorized_attention

FULL = EncoderConfig(transformer_layers=(1, 3, 6, 3), input_size=(64, 192))


def _tiny(**kw):
    base = dict(stage_channels=(8, 12, 16, 24, 32),
                transformer_layers=(1, 1, 1, 1), num_transformer_paths=1,
                attention_heads=2, input_size=(64, 64))
    base.update(kw)
    return EncoderConfig(**base)


# ----------------------------------------------------------------- shapes

def test_paper_depth_pyramid_shapes_at_64x192():
    enc = Encoder(FULL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    pyramid = enc(Tensor(rng.uniform(size=(1, 3, 64, 192))))
    got = [level.shape for level in pyramid]
    assert got == [(1, 32, 32, 96), (1, 48, 16, 48), (1, 64, 8, 24),
                   (1, 96, 4, 12), (1, 128, 2, 6)]


def test_transformer_depth_per_stage_matches_config():
    enc = Encoder(FULL, np.random.default_rng(0))
    assert [len(stage.paths[0].layers) for stage in enc.stages] == [1, 3, 6, 3]


@pytest.mark.parametrize("paths,conv", [(0, True), (1, True), (3, False)])
def test_path_ablations_preserve_shapes(paths, conv):
    cfg = _tiny(num_transformer_paths=paths, use_conv_path=conv)
    enc = Encoder(cfg, np.random.default_rng(2))
    pyramid = enc(Tensor(np.random.default_rng(3).uniform(size=(2, 3, 64, 64))))
    got = [level.shape for level in pyramid]
    assert got == [(2, 8, 32, 32), (2, 12, 16, 16), (2, 16, 8, 8),
                   (2, 24, 4, 4), (2, 32, 2, 2)]


def test_batch_dimension_is_preserved_everywhere():
    enc = Encoder(_tiny(), np.random.default_rng(4))
    x = np.random.default_rng(5).uniform(size=(3, 3, 64, 64))
    pyramid = enc(Tensor(x))
    assert all(level.shape[0] == 3 for level in pyramid)


# ----------------------------------------------------------------- attention

def test_factorized_attention_matches_hand_computation():
    # one head, two tokens, two channels.  k logits: channel0 (ln2, 0)
    # -> weights (2/3, 1/3); channel1 (0, 0) -> (1/2, 1/2).
    # v = [[1, 10], [4, -2]] gives context [[2, 6], [2.5, 4]].
    # q/sqrt(2) rows [1,0] and [0,2] pick out [2,6] and [5,8].
    q = Tensor(np.array([[math.sqrt(2.0), 0.0],
                         [0.0, 2.0 * math.sqrt(2.0)]])[None, None])
    k = Tensor(np.array([[math.log(2.0), 0.0], [0.0, 0.0]])[None, None])
    v = Tensor(np.array([[1.0, 10.0], [4.0, -2.0]])[None, None])
    out = factorized_attention(q, k, v).data[0, 0]
    np.testing.assert_allclose(out, [[2.0, 6.0], [5.0, 8.0]], rtol=1e-12)


def test_factorized_attention_matches_scalar_loops():
    rng = np.random.default_rng(6)
    n, h, l, ch = 2, 2, 5, 4
    q, k, v = (rng.normal(size=(n, h, l, ch)) for _ in range(3))
    got = factorized_attention(Tensor(q), Tensor(k), Tensor(v)).data

    want = np.zeros((n, h, l, ch))
    for b in range(n):
        for head in range(h):
            # softmax over tokens, independently per channel
            w = np.zeros((l, ch))
            for c in range(ch):
                exps = [math.exp(k[b, head, t, c]) for t in range(l)]
                s = sum(exps)
                for t in range(l):
                    w[t, c] = exps[t] / s
            ctx = np.zeros((ch, ch))
            for ck in range(ch):
                for cv in range(ch):
                    ctx[ck, cv] = sum(w[t, ck] * v[b, head, t, cv]
                                      for t in range(l))
            for t in range(l):
                for cv in range(ch):
                    want[b, head, t, cv] = sum(
                        q[b, head, t, ck] / math.sqrt(ch) * ctx[ck, cv]
                        for ck in range(ch))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_attention_mixes_every_token_pair():
    # factorized attention is global: changing one token's value moves
    # every output token
    rng = np.random.default_rng(7)
    q, k, v = (rng.normal(size=(1, 1, 6, 4)) for _ in range(3))
    base = factorized_attention(Tensor(q), Tensor(k), Tensor(v)).data
    v2 = v.copy()
    v2[0, 0, 5] += 1.0
    moved = factorized_attention(Tensor(q), Tensor(k), Tensor(v2)).data
    deltas = np.abs(moved - base).max(axis=3)[0, 0]
    assert np.all(deltas > 0)


def test_attention_rejects_mismatched_shapes():
    a = Tensor(np.zeros((1, 1, 4, 2)))
    b = Tensor(np.zeros((1, 1, 5, 2)))
    with pytest.raises(ValueError, match="attention"):
        factorized_attention(a, b, a)


# ----------------------------------------------------------------- locality

def test_conv_only_stage_is_local_but_transformer_path_is_global():
    # a corner spike cannot reach the far corner of level 1 through the
    # conv path (receptive field <= 19 input px there) but does through
    # one transformer layer.  The carrier image is random: distant tokens
    # need nonzero queries to read the perturbed context at all.
    image = np.random.default_rng(80).uniform(size=(1, 3, 64, 64))
    poked_img = image.copy()
    poked_img[0, :, 0, 0] += 1.0
    for paths, conv, expect_global in ((0, True, False), (1, False, True)):
        cfg = _tiny(num_transformer_paths=paths, use_conv_path=conv)
        enc = Encoder(cfg, np.random.default_rng(8))
        with ad.no_grad():
            base = enc(Tensor(image))[1].data
            poked = enc(Tensor(poked_img))[1].data
        far = np.abs(poked - base)[0, :, -1, -1].max()
        assert (far > 0) == expect_global


# ----------------------------------------------------------------- plumbing

def test_same_seed_same_outputs():
    x = np.random.default_rng(9).uniform(size=(1, 3, 64, 64))
    outs = []
    for _ in range(2):
        enc = Encoder(_tiny(), np.random.default_rng(10))
        outs.append(enc(Tensor(x))[4].data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_state_dict_round_trip_changes_nothing():
    x = np.random.default_rng(11).uniform(size=(1, 3, 64, 64))
    enc = Encoder(_tiny(), np.random.default_rng(12))
    before = enc(Tensor(x))[0].data
    enc.load_state_dict(enc.state_dict())
    np.testing.assert_array_equal(enc(Tensor(x))[0].data, before)


def test_load_state_dict_rejects_unknown_and_missing_keys():
    enc = Encoder(_tiny(), np.random.default_rng(13))
    state = enc.state_dict()
    state["bogus"] = np.zeros(3)
    with pytest.raises(ValueError, match="unexpected"):
        enc.load_state_dict(state)
    del state["bogus"]
    key = next(iter(state))
    del state[key]
    with pytest.raises(ValueError, match="missing"):
        enc.load_state_dict(state)


def test_rejects_bad_input_rank_and_channels():
    enc = Encoder(_tiny(), np.random.default_rng(14))
    with pytest.raises(ValueError, match="N,3,H,W"):
        enc(Tensor(np.zeros((1, 1, 64, 64))))
    with pytest.raises(ValueError, match="divisible by 32"):
        enc(Tensor(np.zeros((1, 3, 60, 64))))


def test_config_validation():
    with pytest.raises(ValueError, match="5 stages"):
        EncoderConfig(stage_channels=(8, 12, 16))
    with pytest.raises(ValueError, match="at least one path"):
        EncoderConfig(num_transformer_paths=0, use_conv_path=False)
    with pytest.raises(ValueError, match="heads"):
        EncoderConfig(stage_channels=(8, 13, 16, 24, 32), attention_heads=2)
    with pytest.raises(ValueError, match="0..3"):
        EncoderConfig(num_transformer_paths=4)
