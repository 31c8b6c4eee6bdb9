import json

import numpy as np
import pytest

from adams.encoder import (CheckpointError, EncoderConfig, TwoViewEncoder, load_checkpoint,
                           save_checkpoint)
from adams.geometry import ZeroNormError, cosine_similarity

from conftest import central_diff

SMALL = EncoderConfig(input_dim=6, text_dim=5, hidden_dim=7, embed_dim=4, seed=3)


@pytest.fixture
def enc():
    return TwoViewEncoder(SMALL)


def test_constant_sequence_equals_single_frame(enc, rng):
    f = rng.standard_normal(6)
    np.testing.assert_allclose(enc.encode_acoustic(np.tile(f, (5, 1))), enc.encode_acoustic([f]),
                               rtol=0, atol=1e-15)


def test_zero_weights_hit_zero_norm_guard(enc, rng):
    for p in enc.acoustic.params.values():
        p[...] = 0.0
    with pytest.raises(ZeroNormError):
        enc.encode_acoustic(rng.standard_normal((3, 6)))


def test_empty_sequence_rejected(enc):
    with pytest.raises(ValueError):
        enc.encode_acoustic_batch([np.zeros((0, 6))])


def test_outputs_unit_norm(enc, rng):
    x = enc.encode_acoustic_batch([rng.standard_normal((n, 6)) for n in (1, 3, 7)])
    t = enc.encode_text_batch(rng.standard_normal((4, 5)))
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-12)


def test_text_deterministic_and_distinct(enc):
    a, b = np.eye(5)[0], np.eye(5)[1]
    np.testing.assert_array_equal(enc.encode_text(a), enc.encode_text(a))
    assert not np.allclose(enc.encode_text(a), enc.encode_text(b))


def test_same_seed_bit_identical(rng):
    frames = [rng.standard_normal((4, 6))]
    a = TwoViewEncoder(SMALL).encode_acoustic_batch(frames)
    b = TwoViewEncoder(SMALL).encode_acoustic_batch(frames)
    assert a.tobytes() == b.tobytes()


def test_dot_equals_cosine(enc, rng):
    x = enc.encode_acoustic_batch([rng.standard_normal((3, 6)) for _ in range(3)])
    t = enc.encode_text_batch(rng.standard_normal((2, 5)))
    for i in range(3):
        for j in range(2):
            assert np.dot(x[i], t[j]) == pytest.approx(cosine_similarity(x[i], t[j]), abs=1e-12)


def test_backward_requires_forward(enc):
    with pytest.raises(RuntimeError):
        enc.acoustic.backward(np.zeros((1, 4)))


def test_zero_upstream_gives_zero_grads(enc, rng):
    u = enc.encode_acoustic_batch([rng.standard_normal((3, 6))])
    enc.zero_grad()
    enc.backward(d_acoustic=np.zeros_like(u))
    assert all(not g.any() for g in enc.acoustic.grads.values())


def test_parallel_upstream_is_killed_by_normalization(enc, rng):
    u = enc.encode_acoustic_batch([rng.standard_normal((3, 6))])
    enc.zero_grad()
    enc.backward(d_acoustic=2.5 * u)
    for g in enc.acoustic.grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    enc = TwoViewEncoder(EncoderConfig(6, 5, 8, 4, seed=seed))
    seqs = [rng.standard_normal((n, 6)) for n in (2, 4, 3)]
    feats = rng.standard_normal((2, 5))
    wx, wt = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))

    def probe():
        # nonlinear scalar so the upstream gradient differs per output
        x = enc.encode_acoustic_batch(seqs)
        t = enc.encode_text_batch(feats)
        return float(np.sum(np.sin(x * wx)) + np.sum((t * wt) ** 2))

    x = enc.encode_acoustic_batch(seqs)
    t = enc.encode_text_batch(feats)
    enc.zero_grad()
    d_frames, d_feat = enc.backward(np.cos(x * wx) * wx, 2 * t * wt * wt)
    analytic = {k: v.copy() for k, v in enc.named_grads().items()}
    for name, p in enc.named_params().items():
        num = central_diff(probe, p)
        err = np.abs(analytic[name] - num) / np.maximum(np.abs(num), 1e-3)
        assert err.max() <= 1e-6, name
    num = central_diff(probe, feats)
    np.testing.assert_allclose(d_feat, num, rtol=1e-6, atol=1e-9)
    num = central_diff(probe, seqs[1])
    np.testing.assert_allclose(d_frames[1], num, rtol=1e-6, atol=1e-9)


def test_backward_accumulates(enc, rng):
    seqs = [rng.standard_normal((2, 6))]
    u = enc.encode_acoustic_batch(seqs)
    d = rng.standard_normal(u.shape)
    enc.zero_grad()
    enc.backward(d)
    once = enc.acoustic.grads["W1"].copy()
    enc.backward(d)
    np.testing.assert_allclose(enc.acoustic.grads["W1"], 2 * once)


def test_checkpoint_round_trip_bit_exact(tmp_path, enc):
    save_checkpoint(tmp_path / "m.json", enc, {"note": 1})
    loaded, extra = load_checkpoint(tmp_path / "m.json")
    assert extra["note"] == 1 and loaded.config == enc.config
    for k, v in enc.named_params().items():
        assert loaded.named_params()[k].tobytes() == v.tobytes()


def test_checkpoint_errors(tmp_path, enc):
    d = enc.to_dict()
    d["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "c.json").write_text('{"format": ')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.json")
    d = enc.to_dict()
    d["weights"]["text"]["b1"] = [0.0]
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s.json")
