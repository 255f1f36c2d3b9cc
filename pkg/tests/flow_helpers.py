import torch

from lip2speech.flow import FlowCondition, FlowPostNet


def random_flow(n_bands=80, d_model=16, seed=0, dtype=torch.float32, hidden=16, n_layers=2,
                n_steps=8, scale=0.1, **kw) -> FlowPostNet:
    """Post-net with generic (non-identity) weights everywhere, ActNorm already initialised."""
    torch.manual_seed(seed)
    net = FlowPostNet(n_bands, d_model, hidden, n_layers, 3, n_steps, zero_init=False,
                      seed=seed, **kw)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for step in net.steps:
            step.actnorm.logs.copy_(scale * torch.randn(step.actnorm.logs.shape, generator=gen))
            step.actnorm.bias.copy_(scale * torch.randn(step.actnorm.bias.shape, generator=gen))
            step.actnorm.initialized.fill_(True)
            end = step.coupling.net.end
            end.weight.mul_(scale)
            end.bias.mul_(scale)
    return net.to(dtype)


def random_cond(b, t, n_bands=80, d_model=16, seed=0, dtype=torch.float32) -> FlowCondition:
    g = torch.Generator().manual_seed(seed)
    return FlowCondition(torch.randn(b, t, d_model, generator=g, dtype=dtype),
                         torch.randn(b, t, n_bands, generator=g, dtype=dtype),
                         torch.randn(b, d_model, generator=g, dtype=dtype))
