import numpy as np
import pytest

from ssense.encoder import (ConvStage, Encoder, EncoderSpec, Parameters, load_checkpoint,
                            save_checkpoint)
from ssense.errors import (DegenerateEmbeddingError, DigestMismatchError,
                           NonFiniteActivationError, ValidationError)

# conv (stride + pool), a second conv, hidden ReLU layer and the projection
FULL = EncoderSpec(stages=(ConvStage(3, (3, 3), (1, 1), (2, 1)), ConvStage(4, (2, 2), (1, 2))),
                   hidden=6)
TINY = EncoderSpec(stages=(ConvStage(4, (3, 3)),))


def fd_check(enc, x, loss_and_grad, through_norm, idx, h=1e-5):
    """Max elementwise relative error of backward vs central differences on ``idx``."""
    z, cache = enc.forward(x)
    _, g_out = loss_and_grad(z if through_norm else cache["pooled"])
    grad = enc.backward(cache, g_out, through_norm=through_norm)
    flat = enc.params.flat

    def f():
        z, cache = enc.forward(x)
        return loss_and_grad(z if through_norm else cache["pooled"])[0]

    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        num = (up - down) / (2 * h)
        scale = max(abs(num), abs(grad[i]))
        if scale > 1e-7:
            worst = max(worst, abs(num - grad[i]) / scale)
        else:
            assert abs(num - grad[i]) < 1e-9
    return worst


def sample_indices(params, rng, per_block=40):
    idx = []
    for name in params.names():
        sl = params.block(name)
        n = sl.stop - sl.start
        idx.extend(sl.start + rng.choice(n, min(n, per_block), replace=False))
    return idx


@pytest.mark.parametrize("seed", range(20))
def test_gradient_every_layer_type(seed):
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(FULL.stages, FULL.hidden, seed=seed)
    enc = Encoder(spec)
    e = 1 + seed % 3
    x = rng.normal(size=(2, e, 1, 8, 8))
    w = rng.normal(size=(2, 512))
    linear = lambda z: (float(np.sum(w * z)), w)
    half_sq = lambda p: (0.5 * float(np.sum(p * p)), p)
    idx = sample_indices(enc.params, rng)
    assert fd_check(enc, x, linear, True, idx) < 1e-3
    assert fd_check(enc, x, half_sq, False, idx) < 1e-3


def test_gradient_tiny_one_stage_all_params():
    rng = np.random.default_rng(0)
    enc = Encoder(TINY)
    x = rng.normal(size=(1, 2, 1, 8, 8))
    half_sq = lambda p: (0.5 * float(np.sum(p * p)), p)
    assert fd_check(enc, x, half_sq, False, range(len(enc.params))) < 1e-3


def test_zero_upstream_gives_zero_gradient():
    enc = Encoder(FULL)
    z, cache = enc.forward(np.random.default_rng(0).normal(size=(2, 2, 1, 8, 8)))
    assert not enc.backward(cache, np.zeros_like(z)).any()


def test_duplicated_item_doubles_gradient():
    enc = Encoder(FULL)
    x = np.random.default_rng(1).normal(size=(1, 2, 1, 8, 8))
    g = np.random.default_rng(2).normal(size=(1, 512))
    z1, c1 = enc.forward(x)
    z2, c2 = enc.forward(np.concatenate([x, x]))
    one = enc.backward(c1, g)
    two = enc.backward(c2, np.concatenate([g, g]))
    np.testing.assert_allclose(two, 2 * one, rtol=1e-12, atol=1e-15)


def test_backward_needs_cache():
    with pytest.raises(ValidationError):
        Encoder(TINY).backward(None, np.zeros((1, 512)))


def test_zero_input_is_bias_pathway():
    enc = Encoder(FULL)
    p = enc.params
    # conv of zeros = bias, ReLU, pools and GAP keep the constant map
    h = np.maximum(p["conv0.bias"], 0)
    h = np.maximum(p["conv1.weight"].sum(axis=(2, 3)) @ h + p["conv1.bias"], 0)
    h = np.maximum(p["hidden.weight"] @ h + p["hidden.bias"], 0)
    want = p["proj.weight"] @ h + p["proj.bias"]
    np.testing.assert_allclose(enc.encode_electrode(np.zeros((8, 8))), want, rtol=1e-12)


def test_output_shape_and_determinism():
    enc = Encoder(EncoderSpec.default(8))
    s = np.random.default_rng(0).normal(size=(8, 40))
    a, b = enc.encode_electrode(s), enc.encode_electrode(s.copy())
    assert a.shape == (512,) and np.array_equal(a, b)


def test_identical_electrodes_equal_single():
    enc = Encoder(FULL)
    s = np.random.default_rng(0).normal(size=(1, 8, 8))
    v = enc.encode_electrode(s)
    z = enc.encode_sample(np.stack([s, s, s]))
    np.testing.assert_allclose(z, v / np.linalg.norm(v), rtol=1e-12)


def test_unit_norm_and_permutation_invariance():
    enc = Encoder(FULL)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 7, 1, 8, 8))
    x[:, 2] = 0.0  # a masked electrode
    z, _ = enc.forward(x)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-12)
    for _ in range(5):
        perm = rng.permutation(7)
        assert np.array_equal(enc.forward(x[:, perm])[0], z)


def test_opposite_electrodes_are_degenerate():
    spec = EncoderSpec(stages=(ConvStage(3, (2, 2)),), hidden=0)
    enc = Encoder(spec)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8)) + 2
    _, acts = enc._trunk(np.stack([a, b])[:, None])
    fa, fb = acts[-1]["proj_in"]
    u = rng.normal(size=512)
    p = enc.params
    p["proj.weight"][...] = np.outer(u, fa - fb)
    p["proj.bias"][...] = -u * ((fa - fb) @ (fa + fb)) / 2
    va, vb = enc.encode_electrode(a), enc.encode_electrode(b)
    np.testing.assert_allclose(va, -vb, atol=1e-12)
    with pytest.raises(DegenerateEmbeddingError):
        enc.encode_sample(np.stack([a, b])[:, None])


def test_non_finite_activation_names_layer():
    enc = Encoder(FULL)
    enc.params["hidden.weight"][...] = 1e308
    with pytest.raises(NonFiniteActivationError) as exc:
        enc.forward(np.random.default_rng(0).uniform(1, 2, size=(1, 1, 1, 8, 8)))
    assert exc.value.layer == "hidden"


def test_input_validation():
    enc = Encoder(FULL)
    with pytest.raises(ValidationError, match="single-channel"):
        enc.forward(np.zeros((1, 1, 2, 8, 8)))
    with pytest.raises(ValidationError, match="larger than its input"):
        enc.forward(np.zeros((1, 1, 1, 2, 8)))
    with pytest.raises(ValidationError):
        EncoderSpec(stages=(ConvStage(2, (1, 1)),), output_dim=256)


def test_param_count_pure_function_of_spec():
    spec = EncoderSpec.default(40)
    assert spec.n_params() == len(Parameters.init(spec)) == len(Parameters.init(spec, seed=9))
    # conv0 32*40*5+32, conv1 64*32*5+64, hidden 256*64+256, proj 512*256+512
    assert spec.n_params() == 6432 + 10304 + 16640 + 131584
    a, b = Parameters.init(spec), Parameters.init(spec)
    assert np.array_equal(a.flat, b.flat)


def test_checkpoint_round_trip(tmp_path):
    params = Parameters.init(FULL, seed=4)
    path = tmp_path / "w.sswt"
    save_checkpoint(path, params, {"seed": 4})
    back, extra = load_checkpoint(path, FULL)
    assert extra == {"seed": 4}
    assert np.array_equal(back.flat, params.flat.astype(np.float32))
    assert path.read_bytes()[:4] == b"SSWT"
    other = EncoderSpec(FULL.stages, hidden=7)
    with pytest.raises(DigestMismatchError):
        load_checkpoint(path, other)
