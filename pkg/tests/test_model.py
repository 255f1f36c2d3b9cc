import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model_config
from lip2speech.config import preset
from lip2speech.errors import InvalidInputError
from lip2speech.model import (LipToSpeech, VariancePrediction, linguistic_loss, mel_loss,
                              upsample, variance_losses)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return LipToSpeech(tiny_model_config()).eval()


def frames(b=1, t=6, seed=0):
    return torch.rand(b, t, 1, 112, 112, generator=torch.Generator().manual_seed(seed))


@settings(max_examples=6, deadline=None)
@given(st.integers(1, 9))
def test_encoder_is_length_preserving(t):
    m = LipToSpeech(tiny_model_config()).eval()
    h_v, e = m.encode(frames(2, t), torch.tensor([0, 1]))
    assert h_v.shape == (2, t, 32) and e.shape == (2, 32)


def test_forward_shapes(model):
    out = model(frames(1, 5), torch.tensor([1]))
    assert out.prediction.linguistic_logits.shape == (1, 5, 10)
    assert out.prediction.pitch.shape == out.prediction.energy.shape == (1, 5)
    assert out.coarse_mel.shape == (1, 20, 80)
    assert out.decoder_input.shape == (1, 20, 32)


def test_variance_heads_k200_shapes():
    m = LipToSpeech(tiny_model_config(K=200)).eval()
    pred = m.predict_variances(torch.randn(1, 50, 32))
    assert pred.linguistic_logits.shape == (1, 50, 200)
    assert pred.pitch.shape == pred.energy.shape == (1, 50)


def test_speaker_changes_encoding(model):
    x = frames()
    a, _ = model.encode(x, torch.tensor([0]))
    b, _ = model.encode(x, torch.tensor([1]))
    assert (a - b).norm() > 0


def test_closed_set_speaker(model):
    with pytest.raises(InvalidInputError):
        model.encode(frames(), torch.tensor([2]))


def test_zero_heads_predict_zero(model):
    pred = model.predict_variances(torch.zeros(1, 7, 32))
    assert (pred.pitch == 0).all() and (pred.energy == 0).all()
    assert (pred.linguistic_logits == 0).all()


def test_zero_variance_embeddings_is_plain_decode(model):
    h_v = torch.randn(1, 4, 32)
    for emb in (model.linguistic_embedding, model.pitch_embedding, model.energy_embedding):
        for p in emb.parameters():
            torch.nn.init.zeros_(p)
    ling = torch.randint(0, 10, (1, 4))
    _, conditioned = model.condition_and_decode(h_v, ling, torch.randn(1, 4), torch.randn(1, 4))
    _, plain = model.decode(h_v)
    torch.testing.assert_close(conditioned, plain)


def test_upsample_repeats():
    x = torch.tensor([[[1.0], [2.0]]])
    assert upsample(x)[0, :, 0].tolist() == [1, 1, 1, 1, 2, 2, 2, 2]


def test_condition_length_mismatch(model):
    with pytest.raises(InvalidInputError):
        model.condition(torch.randn(1, 4, 32), torch.zeros(1, 3, dtype=torch.long),
                        torch.zeros(1, 4), torch.zeros(1, 4))


def test_presets_encode_to_preset_width():
    for name, t, d in (("grid", 50, 384), ("lip2wav", 75, 512)):
        m, _ = preset(name)
        net = LipToSpeech(m).eval()
        with torch.no_grad():
            h_v, _ = net.encode(torch.rand(1, t, 1, 112, 112), torch.tensor([0]))
        assert h_v.shape == (1, t, d)
        assert net.frontend.out_channels == 512


def test_uniform_logits_ce_is_ln_k():
    ce = linguistic_loss(torch.zeros(1, 3, 200), torch.tensor([[0, 57, 199]]), "mean")
    assert ce.item() == pytest.approx(math.log(200), abs=1e-6)
    assert math.log(200) == pytest.approx(5.29832, abs=1e-5)


def test_variance_loss_arithmetic():
    pred = VariancePrediction(torch.zeros(1, 2, 4), torch.tensor([[1.0, 2.0]]),
                              torch.tensor([[0.5, -1.5]]))
    l_l, l_p, l_e = variance_losses(pred, torch.zeros(1, 2, dtype=torch.long),
                                    torch.tensor([[1.0, 2.0]]), torch.zeros(1, 2))
    assert l_p.item() == 0.0
    assert l_e.item() == pytest.approx(2.0)
    assert l_l.item() == pytest.approx(2 * math.log(4))


def test_mel_loss_cases(rng):
    y = torch.randn(10, 80)
    assert mel_loss(y, y).item() == 0.0
    assert mel_loss(y + 1, y).item() == pytest.approx(800.0, rel=1e-6)
    a, b = rng.standard_normal((12, 80)), rng.standard_normal((12, 80))
    loop = sum(sum(abs(a[t, k] - b[t, k]) for k in range(80)) for t in range(12))
    got = mel_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(loop, rel=1e-6)
    with pytest.raises(InvalidInputError):
        mel_loss(y, y[:9])


def test_losses_zero_iff_equal():
    t = torch.randn(2, 5)
    assert l1(t, t) == 0 and l1(t + 1e-3, t) > 0
    onehot = torch.full((1, 2, 3), -1e4)
    onehot[0, 0, 1] = onehot[0, 1, 2] = 1e4
    assert linguistic_loss(onehot, torch.tensor([[1, 2]])).item() < 1e-6


def l1(a, b):
    return mel_loss(a[..., None].expand(-1, -1, 80), b[..., None].expand(-1, -1, 80)).item()


def _fd_check(fn, x, n=6, eps=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    flat = x.detach().view(-1)
    idx = np.random.default_rng(0).choice(flat.numel(), size=min(n, flat.numel()), replace=False)
    for i in idx:
        up, down = flat.clone(), flat.clone()
        up[i] += eps
        down[i] -= eps
        fd = (fn(up.view_as(x)) - fn(down.view_as(x))).item() / (2 * eps)
        g = x.grad.view(-1)[i].item()
        assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g)) + 1e-10, (i, fd, g)


def test_ce_gradient_finite_difference():
    target = torch.tensor([[2, 0, 4]])
    _fd_check(lambda z: linguistic_loss(z, target), torch.randn(1, 3, 5, dtype=torch.float64), n=15)


def test_l1_gradients_finite_difference():
    y = torch.randn(1, 4, 80, dtype=torch.float64)
    _fd_check(lambda v: mel_loss(v, y), y + 0.3 * torch.randn_like(y), n=20)
    target = torch.randn(1, 6, dtype=torch.float64)
    _fd_check(lambda v: (v - target).abs().sum(), target + 0.5, n=6)


def test_small_step_decreases_loss(model):
    model.train()
    x = frames(2, 4)
    spk = torch.tensor([0, 1])
    ling = torch.randint(0, 10, (2, 4))
    p, e = torch.randn(2, 4), torch.rand(2, 4)
    y = torch.randn(2, 16, 80)
    for m in model.modules():
        if isinstance(m, torch.nn.Dropout):
            m.p = 0.0
    model.eval()  # fixed BatchNorm statistics for a clean comparison

    def loss():
        out = model(x, spk, ling, p, e)
        return mel_loss(out.coarse_mel, y) + sum(variance_losses(out.prediction, ling, p, e))

    before = loss()
    model.zero_grad()
    before.backward()
    with torch.no_grad():
        for q in model.parameters():
            if q.grad is not None:
                q -= 1e-5 * q.grad
    assert loss().item() < before.item()
