import math

import numpy as np
import pytest
import torch

from boxpaint.nn import (
    AdamConfig,
    CheckpointError,
    NonFiniteError,
    Param,
    ShapeError,
    adam_step,
    conv2d,
    grad_eval,
    group_norm,
    linear,
    load_checkpoint,
    save_checkpoint,
    silu,
    sinusoidal_embedding,
    upsample_nearest,
)


def conv_loops(x, w, b, stride, pad):
    """Direct 6-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi] if b is not None else 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def test_conv_sum_of_ones():
    out = conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3), pad=1)
    assert out[0, 0, 1, 1].item() == 9.0


def test_conv_identity_kernel():
    x = torch.randn(1, 3, 6, 7)
    w = torch.zeros(3, 3, 3, 3)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert torch.equal(conv2d(x, w, pad=1), x)


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 5, size=2)
    h, w = rng.integers(3, 9, size=2)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.normal(size=(1, c_in, h, w)).astype(np.float32)
    wt = rng.normal(size=(c_out, c_in, k, k)).astype(np.float32)
    b = rng.normal(size=c_out).astype(np.float32)
    got = conv2d(torch.from_numpy(x), torch.from_numpy(wt), torch.from_numpy(b), stride, pad).numpy()
    ref = conv_loops(x.astype(np.float64), wt.astype(np.float64), b.astype(np.float64), stride, pad)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())


def test_conv_random_1x2x5x5():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    wt = rng.normal(size=(3, 2, 3, 3)).astype(np.float32) * 0.1
    got = conv2d(torch.from_numpy(x), torch.from_numpy(wt), pad=1).numpy()
    ref = conv_loops(x.astype(np.float64), wt.astype(np.float64), None, 1, 1)
    assert np.abs(got - ref).max() < 1e-6


def test_conv_output_size_formula():
    for h, k, s, p in [(7, 3, 2, 1), (8, 3, 2, 1), (5, 1, 1, 0), (9, 3, 3, 0)]:
        out = conv2d(torch.zeros(1, 1, h, h), torch.zeros(1, 1, k, k), stride=s, pad=p)
        assert out.shape[-1] == (h + 2 * p - k) // s + 1


def test_conv_shape_errors_name_dimensions():
    with pytest.raises(ShapeError, match="C=2, weight I=3"):
        conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 2, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(2, 1, 3, 3), torch.zeros(3))


def test_group_norm_matches_manual():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 16, 5, 5))
    out = group_norm(torch.from_numpy(x), torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64), 8).numpy()
    g = x.reshape(2, 8, -1)
    ref = ((g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + 1e-5)).reshape(x.shape)
    assert np.abs(out - ref).max() < 1e-9


def test_silu_and_upsample():
    x = torch.linspace(-3, 3, 13)
    assert torch.allclose(silu(x), x / (1 + torch.exp(-x)))
    u = upsample_nearest(torch.arange(4.0).reshape(1, 1, 2, 2), 2)
    assert u[0, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


# --------------------------------------------------------------------------
# embedding


def test_embedding_at_zero():
    e = sinusoidal_embedding(0.0, 8)
    assert torch.equal(e[:4], torch.zeros(4))
    assert torch.equal(e[4:], torch.ones(4))


def test_embedding_layout_dim4():
    t = 3.7
    e = sinusoidal_embedding(t, 4).double()
    ref = torch.tensor([math.sin(t), math.sin(t / 100), math.cos(t), math.cos(t / 100)], dtype=torch.float64)
    assert torch.allclose(e, ref, atol=1e-6)


def test_embedding_distinct_and_odd_rejected():
    assert torch.linalg.vector_norm(sinusoidal_embedding(1, 2) - sinusoidal_embedding(2, 2)) > 0
    with pytest.raises(ValueError):
        sinusoidal_embedding(1.0, 7)


# --------------------------------------------------------------------------
# gradients against central differences


def fd_check(fn, params, h=1e-6, rel=1e-3):
    """Compare grad_eval with central differences on every entry (float64)."""
    ps = [Param(f"p{i}", t) for i, t in enumerate(params)]
    grad_eval(fn(), ps)
    for p in ps:
        flat = p.value.data.view(-1)
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            num[i] = (up - down) / (2 * h)
        ana = p.grad.view(-1)
        err = (ana - num).abs().max().item()
        scale = max(num.abs().max().item(), 1e-8)
        assert err <= rel * scale, f"{p.name}: {err} vs scale {scale}"


def leaf(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_(True)


def test_fd_conv_mse_4x4():
    x = leaf(1, 1, 4, 4, seed=1).detach()
    target = leaf(1, 1, 4, 4, seed=2).detach()
    w, b = leaf(1, 1, 3, 3, seed=3), leaf(1, seed=4)
    fd_check(lambda: ((conv2d(x, w, b, pad=1) - target) ** 2).mean(), [w, b], h=1e-3)


def test_fd_conv_strided_input_grad():
    x, w = leaf(1, 2, 5, 5, seed=5), leaf(3, 2, 3, 3, seed=6)
    fd_check(lambda: conv2d(x, w, stride=2, pad=1).pow(2).sum(), [x, w])


def test_fd_group_norm():
    x, g, b = leaf(1, 4, 3, 3, seed=7), leaf(4, seed=8), leaf(4, seed=9)
    probe = leaf(1, 4, 3, 3, seed=10).detach()
    fd_check(lambda: (group_norm(x, g, b, 2) * probe).sum(), [x, g, b])


def test_fd_silu_linear_upsample():
    x, w, b = leaf(2, 5, seed=11), leaf(3, 5, seed=12), leaf(3, seed=13)
    fd_check(lambda: silu(linear(x, w, b)).pow(2).sum(), [x, w, b])
    y = leaf(1, 2, 2, 3, seed=14)
    probe = leaf(1, 2, 4, 6, seed=15).detach()
    fd_check(lambda: (upsample_nearest(y, 2) * probe).sum(), [y])


def test_grad_linear_is_exact():
    x = torch.randn(5)
    w = torch.zeros(5, requires_grad=True)
    p = Param("w", w)
    grad_eval((w * x).sum(), [p])
    assert torch.equal(p.grad, x)


def test_grad_unused_param_zero():
    a = torch.ones(3, requires_grad=True)
    b = torch.full((2,), 5.0, requires_grad=True)
    pa, pb = Param("a", a), Param("b", b)
    pb.grad.fill_(7.0)
    grad_eval((a * 2).sum(), [pa, pb])
    assert torch.equal(pb.grad, torch.zeros(2))


def test_grad_nonscalar_rejected():
    a = torch.ones(3, requires_grad=True)
    with pytest.raises(ShapeError):
        grad_eval(a * 2, [Param("a", a)])


# --------------------------------------------------------------------------
# Adam


def test_adam_first_step_closed_form():
    cfg = AdamConfig(lr=1e-2)
    p = Param("w", torch.tensor([1.0, -2.0, 0.5]))
    g = torch.tensor([0.3, -4.0, 1e-3])
    p.grad.copy_(g)
    before = p.value.clone()
    adam_step(p, cfg)
    expect = before - cfg.lr * g / (g.abs() + cfg.eps)
    assert torch.allclose(p.value, expect, atol=1e-7)
    assert torch.equal(p.grad, g)
    assert p.step_count == 1


def test_adam_zero_grad_no_move():
    p = Param("w", torch.tensor([1.5, 2.5]))
    adam_step(p, AdamConfig())
    assert torch.equal(p.value, torch.tensor([1.5, 2.5]))
    assert p.step_count == 1


def test_adam_three_constant_steps_hand_recurrence():
    cfg = AdamConfig(lr=3e-5)
    p = Param("w", torch.zeros(1, dtype=torch.float64))
    m = v = 0.0
    value = 0.0
    for t in range(1, 4):
        p.grad.fill_(1.0)
        adam_step(p, cfg)
        m = cfg.beta1 * m + (1 - cfg.beta1)
        v = cfg.beta2 * v + (1 - cfg.beta2)
        value -= cfg.lr * (m / (1 - cfg.beta1**t)) / (math.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
    assert abs(p.value.item() - value) < 1e-15
    assert abs(-p.value.item() - 3 * cfg.lr) < 1e-9


def test_adam_deterministic_and_nonfinite():
    def run():
        p = Param("w", torch.tensor([0.1, 0.2]))
        p.grad.copy_(torch.tensor([0.7, -0.3]))
        adam_step(p, AdamConfig())
        return p.value

    assert torch.equal(run(), run())
    p = Param("w", torch.zeros(2))
    p.grad.copy_(torch.tensor([1.0, float("nan")]))
    with pytest.raises(NonFiniteError):
        adam_step(p, AdamConfig())


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b.c": torch.arange(5.0)}
    save_checkpoint(tmp_path / "m.gdck", tensors, {"step": 12})
    meta, back = load_checkpoint(tmp_path / "m.gdck")
    assert meta["step"] == 12
    assert list(back) == ["a", "b.c"]
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    raw = (tmp_path / "m.gdck").read_bytes()
    assert raw[:4] == b"GDCK"


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.gdck"
    save_checkpoint(path, {"a": torch.ones(4)})
    raw = bytearray(path.read_bytes())
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad_magic")
    bad_version = raw[:]
    bad_version[4] = 9
    (tmp_path / "bad_version").write_bytes(bytes(bad_version))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad_version")
    (tmp_path / "short").write_bytes(bytes(raw[:-4]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
