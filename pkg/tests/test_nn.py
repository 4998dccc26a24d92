import numpy as np
import pytest

from clearct import tensor as T
from clearct.nn import (CheckpointError, Encoder, EncoderConfig, encode, encode_slice, encoder_from_arrays,
                        encoder_to_arrays, load_encoder, read_checkpoint, save_encoder, write_checkpoint)
from clearct.tensor import Tensor

from conftest import fd_grad, rel_err

TOY_CONFIGS = [
    EncoderConfig(kind="gated-conv", input_size=(16, 16), embed_dim=8, depth=1, channels=4, projection_hidden=8),
    EncoderConfig(kind="patch-attn", input_size=(16, 16), embed_dim=8, depth=1, patch_size=4, projection_hidden=8),
]


def params_equal(a: Encoder, b: Encoder) -> bool:
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


@pytest.mark.parametrize("cfg", TOY_CONFIGS, ids=["gated-conv", "patch-attn"])
def test_same_seed_same_parameters(cfg):
    assert params_equal(Encoder(cfg, 7), Encoder(cfg, 7))
    assert not params_equal(Encoder(cfg, 1), Encoder(cfg, 2))


def test_patch_attn_param_count_by_hand():
    cfg = EncoderConfig(kind="patch-attn", input_size=(64, 64), embed_dim=32, depth=2, patch_size=8)
    d, p, tokens, hidden = 32, 8, (64 // 8) ** 2, cfg.projection_hidden
    lin = lambda i, o: i * o + o
    block = 2 * d + 4 * lin(d, d) + 2 * d + lin(d, 2 * d) + lin(2 * d, d)
    expected = lin(p * p, d) + tokens * d + 2 * block + 2 * (2 * d) + lin(2 * d, hidden) + lin(hidden, d)
    assert expected == 33792
    assert Encoder(cfg, 0).param_count() == expected


def test_config_validation():
    with pytest.raises(ValueError, match="patch_size"):
        EncoderConfig(kind="patch-attn", input_size=(30, 30), patch_size=8).validate()
    with pytest.raises(ValueError, match="kind"):
        EncoderConfig(kind="vmamba").validate()
    with pytest.raises(ValueError, match="embed_dim"):
        EncoderConfig(embed_dim=4).validate()


@pytest.mark.parametrize("cfg", TOY_CONFIGS, ids=["gated-conv", "patch-attn"])
def test_degenerate_and_identical_slices(cfg, rng):
    enc = Encoder(cfg, 0)
    z = encode(enc, np.zeros((1, 16, 16)))
    assert np.all(np.isfinite(z))
    x = rng.random((16, 16))
    e = encode(enc, np.stack([x, x]))
    np.testing.assert_array_equal(e[0], e[1])
    assert e.shape == (2, cfg.embed_dim)


def test_encode_rejects_wrong_size():
    enc = Encoder(TOY_CONFIGS[0], 0)
    with pytest.raises(T.ShapeError):
        encode(enc, np.zeros((1, 8, 8)))


def test_encode_matches_encode_slice(rng):
    enc = Encoder(TOY_CONFIGS[0], 3)
    x = rng.random((3, 16, 16))
    batched = encode(enc, x, batch_size=2)
    single = np.stack([encode_slice(enc, s).data for s in x])
    np.testing.assert_allclose(batched, single, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("cfg", TOY_CONFIGS, ids=["gated-conv", "patch-attn"])
def test_embedding_norm_gradient_matches_finite_differences(cfg, rng):
    enc = Encoder(cfg, 11)
    x = rng.random((16, 16))

    def loss():
        e = encode_slice(enc, x)
        return T.sum(T.mul(e, e))

    T.reset_tape()
    enc.zero_grad()
    T.backward(loss())
    T.reset_tape()
    # gradients below this are zero up to finite-difference noise (e.g. the key bias under softmax)
    floor = 1e-3 * max(np.abs(p.grad).max() for p in enc.parameters() if p.grad is not None)
    for name, p in enc.named_parameters():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()

        def f(v, p=p):
            old = p.data
            p.data = v
            with T.no_grad():
                out = loss().item()
            p.data = old
            return out

        numeric = fd_grad(f, p.data, eps=1e-6)
        assert rel_err(analytic, numeric, floor) < 1e-5, name


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    enc = Encoder(TOY_CONFIGS[1], 5)
    path = tmp_path / "enc.clwt"
    save_encoder(enc, path)
    back = load_encoder(path)
    assert back.config == enc.config
    assert params_equal(enc, back)
    save_encoder(back, tmp_path / "again.clwt")
    assert path.read_bytes() == (tmp_path / "again.clwt").read_bytes()


def test_checkpoint_prefixes_coexist(tmp_path):
    a, b = Encoder(TOY_CONFIGS[0], 1), Encoder(TOY_CONFIGS[0], 2)
    arrays = dict(encoder_to_arrays(a))
    arrays.update(encoder_to_arrays(b, prefix="key/"))
    write_checkpoint(tmp_path / "pair.clwt", arrays)
    back = read_checkpoint(tmp_path / "pair.clwt")
    assert params_equal(encoder_from_arrays(back), a)
    assert params_equal(encoder_from_arrays(back, prefix="key/"), b)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "enc.clwt"
    save_encoder(Encoder(TOY_CONFIGS[0], 0), path)
    raw = path.read_bytes()
    (tmp_path / "magic.clwt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.clwt")
    (tmp_path / "short.clwt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short.clwt")
    (tmp_path / "long.clwt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "long.clwt")


def test_checkpoint_missing_entry(tmp_path):
    arrays = dict(encoder_to_arrays(Encoder(TOY_CONFIGS[0], 0)))
    arrays.pop(next(k for k in arrays if not k.startswith("config/")))
    with pytest.raises(CheckpointError, match="missing"):
        encoder_from_arrays(arrays)


def test_key_encoder_excluded_from_training_graph(rng):
    enc = Encoder(TOY_CONFIGS[0], 0).requires_grad_(False)
    out = enc(Tensor(rng.random((2, 16, 16))))
    assert not out.requires_grad
