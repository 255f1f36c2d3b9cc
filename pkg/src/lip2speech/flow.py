"""Conditional normalising-flow post-net.

Each of the ``n_steps`` steps is ActNorm -> invertible 1x1 channel mixing ->
affine coupling. The coupling network sees the untouched half of the
channels plus a fused condition built from the decoder input, the decoder
output and the speaker embedding. Tensors are channel-first (B, C, T)
internally; the public API takes (B, T, C).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidInputError, NumericalError

LOG_2PI = math.log(2 * math.pi)


@dataclass
class FlowCondition:
    decoder_input: torch.Tensor  # (B, T_m, d_model)
    decoder_output: torch.Tensor  # (B, T_m, n_bands)
    speaker_embedding: torch.Tensor  # (B, d_model)

    def __post_init__(self):
        if self.decoder_input.dim() == 2:
            self.decoder_input = self.decoder_input[None]
        if self.decoder_output.dim() == 2:
            self.decoder_output = self.decoder_output[None]
        if self.speaker_embedding.dim() == 1:
            self.speaker_embedding = self.speaker_embedding[None]
        if self.decoder_input.shape[:2] != self.decoder_output.shape[:2]:
            raise InvalidInputError("condition time lengths differ")

    def detach(self) -> "FlowCondition":
        return FlowCondition(self.decoder_input.detach(), self.decoder_output.detach(),
                             self.speaker_embedding.detach())


@dataclass
class FlowState:
    z: torch.Tensor  # (B, T_m, n_bands)
    log_det: torch.Tensor  # (B,)
    step_log_dets: list[torch.Tensor] | None = None


class ActNorm(nn.Module):
    """Per-channel affine map ``y = exp(logs) * x + bias`` with data-dependent init."""

    def __init__(self, channels: int, identity_init: bool = False):
        super().__init__()
        self.logs = nn.Parameter(torch.zeros(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.register_buffer("initialized", torch.tensor(identity_init))

    @torch.no_grad()
    def _data_init(self, x: torch.Tensor) -> None:
        mean = x.mean(dim=(0, 2), keepdim=True)
        std = x.std(dim=(0, 2), keepdim=True, unbiased=False)
        logs = -torch.log(std.clamp_min(1e-6))
        self.logs.copy_(logs)
        self.bias.copy_(-mean * torch.exp(logs))
        self.initialized.fill_(True)

    def forward(self, x: torch.Tensor):
        if not bool(self.initialized) and self.training:
            self._data_init(x)
        y = torch.exp(self.logs) * x + self.bias
        log_det = self.logs.sum() * x.shape[2] * torch.ones(x.shape[0], device=x.device, dtype=x.dtype)
        return y, log_det

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        return (y - self.bias) * torch.exp(-self.logs)


class InvConv1x1(nn.Module):
    """Invertible channel mixing ``y_t = W x_t`` shared across time."""

    def __init__(self, channels: int, identity_init: bool = False, generator=None):
        super().__init__()
        if identity_init:
            w = torch.eye(channels)
        else:
            w, _ = torch.linalg.qr(torch.randn(channels, channels, generator=generator))
            if torch.det(w) < 0:
                w[:, 0] = -w[:, 0]
        self.weight = nn.Parameter(w)

    def forward(self, x: torch.Tensor):
        logabsdet = torch.linalg.slogdet(self.weight)[1]
        y = torch.einsum("ij,bjt->bit", self.weight, x)
        return y, logabsdet * x.shape[2] * torch.ones(x.shape[0], device=x.device, dtype=x.dtype)

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        # invert in double precision so float32 round trips stay near machine epsilon
        w_inv = torch.linalg.inv(self.weight.double()).to(y.dtype)
        return torch.einsum("ij,bjt->bit", w_inv, y)


class CouplingNet(nn.Module):
    """Gated dilated Conv1d stack (WaveNet-style) with additive condition input."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int, cond_ch: int, n_layers: int,
                 kernel: int, zero_init: bool = True):
        super().__init__()
        self.hidden = hidden
        self.start = nn.Conv1d(in_ch, hidden, 1)
        self.cond = nn.Conv1d(cond_ch, 2 * hidden * n_layers, 1)
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(n_layers):
            dilation = 2 ** i
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel, dilation=dilation,
                                            padding=dilation * (kernel - 1) // 2))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip.append(nn.Conv1d(hidden, out, 1))
        self.end = nn.Conv1d(hidden, out_ch, 1)
        if zero_init:
            nn.init.zeros_(self.end.weight)
            nn.init.zeros_(self.end.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.start(x)
        g_all = self.cond(cond)
        skip = torch.zeros_like(h)
        n = len(self.in_layers)
        for i, (inl, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            a = inl(h) + g_all[:, 2 * self.hidden * i:2 * self.hidden * (i + 1)]
            acts = torch.tanh(a[:, :self.hidden]) * torch.sigmoid(a[:, self.hidden:])
            out = rs(acts)
            if i < n - 1:
                h = h + out[:, :self.hidden]
                skip = skip + out[:, self.hidden:]
            else:
                skip = skip + out
        return self.end(skip)


def _interleave(even: torch.Tensor, odd: torch.Tensor) -> torch.Tensor:
    b, c, t = even.shape
    return torch.stack([even, odd], dim=2).reshape(b, 2 * c, t)


class AffineCoupling(nn.Module):
    """Even channels condition an affine transform of the odd channels."""

    def __init__(self, channels: int, hidden: int, cond_ch: int, n_layers: int, kernel: int,
                 zero_init: bool = True):
        super().__init__()
        if channels % 2:
            raise InvalidInputError("coupling needs an even channel count")
        self.net = CouplingNet(channels // 2, channels, hidden, cond_ch, n_layers, kernel, zero_init)

    def _params(self, x_a, cond):
        out = self.net(x_a, cond)
        half = out.shape[1] // 2
        return out[:, :half], out[:, half:]  # log-scale, shift

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        x_a, x_b = x[:, 0::2], x[:, 1::2]
        log_s, t = self._params(x_a, cond)
        return _interleave(x_a, x_b * torch.exp(log_s) + t), log_s.sum(dim=(1, 2))

    def inverse(self, y: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        y_a, y_b = y[:, 0::2], y[:, 1::2]
        log_s, t = self._params(y_a, cond)
        return _interleave(y_a, (y_b - t) * torch.exp(-log_s))


class FlowStep(nn.Module):
    def __init__(self, channels, hidden, cond_ch, n_layers, kernel, identity_init=False,
                 zero_init=True, generator=None):
        super().__init__()
        self.actnorm = ActNorm(channels, identity_init)
        self.mix = InvConv1x1(channels, identity_init, generator)
        self.coupling = AffineCoupling(channels, hidden, cond_ch, n_layers, kernel, zero_init)

    def forward(self, x, cond):
        x, ld1 = self.actnorm(x)
        x, ld2 = self.mix(x)
        x, ld3 = self.coupling(x, cond)
        return x, ld1 + ld2 + ld3

    def inverse(self, y, cond):
        y = self.coupling.inverse(y, cond)
        y = self.mix.inverse(y)
        return self.actnorm.inverse(y)


class FlowPostNet(nn.Module):
    """Refines a coarse mel with an exact-likelihood conditional flow.

    With ``residual=True`` the flow models ``mel - coarse_mel`` so that an
    identity flow sampled at temperature 0 returns the coarse mel unchanged.
    """

    def __init__(self, n_bands: int = 80, d_model: int = 384, hidden: int = 192,
                 n_layers: int = 4, kernel: int = 5, n_steps: int = 8, residual: bool = True,
                 identity_init: bool = False, zero_init: bool = True, seed: int | None = None):
        super().__init__()
        self.n_bands = n_bands
        self.residual = residual
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.cond_in = nn.Linear(d_model, hidden)
        self.cond_out = nn.Linear(n_bands, hidden)
        self.cond_spk = nn.Linear(d_model, hidden)
        self.steps = nn.ModuleList(
            FlowStep(n_bands, hidden, hidden, n_layers, kernel, identity_init, zero_init, gen)
            for _ in range(n_steps))

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def fuse(self, cond: FlowCondition) -> torch.Tensor:
        fused = (self.cond_in(cond.decoder_input) + self.cond_out(cond.decoder_output)
                 + self.cond_spk(cond.speaker_embedding)[:, None, :])
        return fused.transpose(1, 2)

    def _check(self, x, cond: FlowCondition):
        if x.dim() == 2:
            x = x[None]
        if x.shape[-1] != self.n_bands or x.shape[:2] != cond.decoder_output.shape[:2]:
            raise InvalidInputError(
                f"flow input {tuple(x.shape)} does not match condition {tuple(cond.decoder_output.shape)}")
        return x

    def forward(self, x: torch.Tensor, cond: FlowCondition, keep_steps: bool = False) -> FlowState:
        x = self._check(x, cond)
        c = self.fuse(cond)
        h = x.transpose(1, 2)
        total = torch.zeros(h.shape[0], device=h.device, dtype=h.dtype)
        per_step = []
        for i, step in enumerate(self.steps):
            h, ld = step(h, c)
            if not (torch.isfinite(h).all() and torch.isfinite(ld).all()):
                raise NumericalError(f"non-finite value in flow step {i}")
            total = total + ld
            if keep_steps:
                per_step.append(ld)
        return FlowState(h.transpose(1, 2), total, per_step if keep_steps else None)

    def inverse(self, z: torch.Tensor, cond: FlowCondition) -> torch.Tensor:
        z = self._check(z, cond)
        c = self.fuse(cond)
        h = z.transpose(1, 2)
        for i in reversed(range(len(self.steps))):
            h = self.steps[i].inverse(h, c)
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite value in inverse flow step {i}")
        return h.transpose(1, 2)

    def nll(self, x: torch.Tensor, cond: FlowCondition, reduction: str = "mean") -> torch.Tensor:
        """Negative log-likelihood under a standard normal prior, averaged over the batch.

        ``reduction="mean"`` divides each utterance's NLL by its element count.
        """
        state = self.forward(x, cond)
        z = state.z
        log_prior = -0.5 * (z.pow(2) + LOG_2PI).sum(dim=(1, 2))
        nll = -(log_prior + state.log_det)
        if reduction == "mean":
            nll = nll / (z.shape[1] * z.shape[2])
        return nll.mean()

    def loss(self, mel: torch.Tensor, cond: FlowCondition, reduction: str = "mean") -> torch.Tensor:
        target = mel - cond.decoder_output.detach() if self.residual else mel
        return self.nll(target, cond, reduction)

    @torch.no_grad()
    def sample(self, cond: FlowCondition, temperature: float = 1.0,
               generator: torch.Generator | None = None) -> torch.Tensor:
        shape = cond.decoder_output.shape
        if temperature > 0:
            z = temperature * torch.randn(shape, generator=generator,
                                          dtype=cond.decoder_output.dtype).to(cond.decoder_output.device)
        else:
            z = torch.zeros_like(cond.decoder_output)
        x = self.inverse(z, cond)
        return x + cond.decoder_output if self.residual else x


def flow_forward(postnet: FlowPostNet, x, cond) -> FlowState:
    return postnet.forward(x, cond)


def flow_inverse(postnet: FlowPostNet, z, cond) -> torch.Tensor:
    return postnet.inverse(z, cond)


def flow_nll(postnet: FlowPostNet, x, cond, reduction: str = "mean") -> torch.Tensor:
    return postnet.nll(x, cond, reduction)


def sample_refined(postnet: FlowPostNet, cond, temperature: float = 1.0, seed: int | None = None):
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return postnet.sample(cond, temperature, gen)
