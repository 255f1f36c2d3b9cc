import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flow_helpers import random_cond, random_flow
from lip2speech.errors import InvalidInputError, NumericalError
from lip2speech.flow import (FlowCondition, FlowPostNet, flow_forward, flow_inverse, flow_nll,
                             sample_refined)


def identity_flow(n_bands=80, d_model=16):
    return FlowPostNet(n_bands, d_model, 16, 2, 3, 8, identity_init=True)


def test_eight_steps_by_default():
    assert FlowPostNet().n_steps == 8


def test_identity_init_is_identity():
    net = identity_flow()
    x = torch.randn(2, 12, 80)
    state = flow_forward(net, x, random_cond(2, 12))
    torch.testing.assert_close(state.z, x, rtol=0, atol=0)
    assert (state.log_det == 0).all()
    assert (flow_inverse(net, torch.zeros(1, 12, 80), random_cond(1, 12)) == 0).all()


def test_data_dependent_init_normalises():
    net = FlowPostNet(80, 16, 16, 2, 3, 8)
    x = 3.0 + 2.0 * torch.randn(4, 50, 80)
    cond = random_cond(4, 50)
    net.steps[0].actnorm(x.transpose(1, 2))
    an = net.steps[0].actnorm
    y = (torch.exp(an.logs) * x.transpose(1, 2) + an.bias)
    assert y.mean(dim=(0, 2)).abs().max() < 1e-4
    assert (y.std(dim=(0, 2), unbiased=False) - 1).abs().max() < 1e-4
    state = net(x, cond)
    assert torch.isfinite(state.z).all()


def jacobian_logdet(net, x, cond):
    def f(flat):
        return net(flat.view_as(x), cond).z.reshape(-1)

    jac = torch.autograd.functional.jacobian(f, x.reshape(-1))
    return torch.linalg.slogdet(jac)[1]


@pytest.mark.parametrize("seed", range(5))
def test_log_det_matches_numerical_jacobian(seed):
    net = random_flow(4, 6, seed, torch.float64, scale=0.5)
    x = torch.randn(1, 2, 4, dtype=torch.float64)
    cond = random_cond(1, 2, 4, 6, seed, torch.float64)
    got = net(x, cond).log_det[0]
    ref = jacobian_logdet(net, x, cond)
    assert abs(got - ref) <= 1e-4 * max(1.0, abs(ref))


def test_log_det_is_sum_of_steps():
    net = random_flow(8, 6, 0, torch.float64)
    state = net(torch.randn(2, 5, 8, dtype=torch.float64), random_cond(2, 5, 8, 6, 0, torch.float64),
                keep_steps=True)
    assert len(state.step_log_dets) == 8
    torch.testing.assert_close(sum(state.step_log_dets), state.log_det)


def test_coupling_log_det_is_sum_of_log_scales():
    net = random_flow(8, 6, 1, torch.float64)
    coupling = net.steps[0].coupling
    x = torch.randn(2, 8, 5, dtype=torch.float64)
    c = net.fuse(random_cond(2, 5, 8, 6, 1, torch.float64))
    log_s, _ = coupling._params(x[:, 0::2], c)
    torch.testing.assert_close(coupling(x, c)[1], log_s.sum(dim=(1, 2)))


def test_round_trip_32_and_64_bit():
    for dtype, tol in ((torch.float32, 1e-5), (torch.float64, 1e-10)):
        net = random_flow(80, 16, 3, dtype)
        x = torch.randn(2, 32, 80, dtype=dtype)
        cond = random_cond(2, 32, dtype=dtype)
        back = flow_inverse(net, flow_forward(net, x, cond).z, cond)
        assert (back - x).abs().max() < tol


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_round_trip_property(seed, t):
    net = random_flow(8, 6, seed % 7, torch.float64)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, t, 8, generator=g, dtype=torch.float64)
    cond = random_cond(1, t, 8, 6, seed, torch.float64)
    assert (flow_inverse(net, net(x, cond).z, cond) - x).abs().max() < 1e-9


def test_speaker_conditioning_changes_z():
    net = random_flow(8, 6, 0)
    x = torch.randn(2, 5, 8)
    cond = random_cond(2, 5, 8, 6)
    swapped = FlowCondition(cond.decoder_input, cond.decoder_output, cond.speaker_embedding.flip(0))
    assert not torch.allclose(net(x, cond).z, net(x, swapped).z)


def test_nll_identity_at_zero():
    net = identity_flow()
    nll = flow_nll(net, torch.zeros(1, 10, 80), random_cond(1, 10))
    assert nll.item() == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-6)
    assert nll.item() == pytest.approx(0.91894, abs=1e-5)


def test_nll_identity_closed_form():
    net = identity_flow()
    x = torch.randn(1, 6, 80, dtype=torch.float64)
    x = x / x.norm(dim=-1, keepdim=True)
    n = x.numel()
    expected = (0.5 * (x ** 2).sum() + 0.5 * n * math.log(2 * math.pi)).item()
    got = flow_nll(net.double(), x, random_cond(1, 6, dtype=torch.float64), reduction="sum").item()
    assert got == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(3.0 + 0.5 * n * math.log(2 * math.pi))


def test_nll_gradient_finite_difference():
    net = random_flow(4, 6, 2, torch.float64)
    x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    cond = random_cond(1, 3, 4, 6, 2, torch.float64)
    assert torch.autograd.gradcheck(lambda v: net.nll(v, cond), (x,), eps=1e-6, atol=1e-8,
                                    rtol=1e-4)
    params = [p for p in net.parameters() if p.requires_grad]
    w = params[5]
    net.zero_grad()
    net.nll(x.detach(), cond).backward()
    analytic = w.grad.reshape(-1)[:4].clone()
    for i in range(4):
        with torch.no_grad():
            flat = w.view(-1)
            flat[i] += 1e-6
            up = net.nll(x.detach(), cond).item()
            flat[i] -= 2e-6
            down = net.nll(x.detach(), cond).item()
            flat[i] += 1e-6
        fd = (up - down) / 2e-6
        assert abs(fd - analytic[i].item()) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9


def test_nll_invariant_to_joint_time_permutation():
    # coupling convs see neighbours, so only the identity-coupling flow is order free
    net = FlowPostNet(8, 6, 8, 2, 3, 8, zero_init=True, seed=0).double()
    for step in net.steps:
        step.actnorm.initialized.fill_(True)
    x = torch.randn(1, 7, 8, dtype=torch.float64)
    cond = random_cond(1, 7, 8, 6, 0, torch.float64)
    perm = torch.randperm(7)
    pcond = FlowCondition(cond.decoder_input[:, perm], cond.decoder_output[:, perm],
                          cond.speaker_embedding)
    torch.testing.assert_close(net.nll(x, cond), net.nll(x[:, perm], pcond))


def test_sampling_temperature_and_seed():
    net = random_flow(8, 6, 0)
    cond = random_cond(1, 5, 8, 6)
    a0, b0 = sample_refined(net, cond, 0.0), sample_refined(net, cond, 0.0)
    torch.testing.assert_close(a0, b0, rtol=0, atol=0)
    a1, b1 = sample_refined(net, cond, 1.0, seed=4), sample_refined(net, cond, 1.0, seed=4)
    torch.testing.assert_close(a1, b1, rtol=0, atol=0)
    assert not torch.allclose(a0, a1)


def test_identity_residual_flow_returns_coarse_at_zero_temperature():
    net = identity_flow(8, 6)
    cond = random_cond(1, 5, 8, 6)
    torch.testing.assert_close(sample_refined(net, cond, 0.0), cond.decoder_output)


def test_non_finite_reports_step():
    net = random_flow(8, 6, 0)
    with torch.no_grad():
        net.steps[3].actnorm.logs.fill_(float("inf"))
    with pytest.raises(NumericalError, match="step 3"):
        net(torch.randn(1, 4, 8), random_cond(1, 4, 8, 6))


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        identity_flow()(torch.randn(1, 5, 80), random_cond(1, 6))
