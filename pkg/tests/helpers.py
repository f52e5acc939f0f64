"""Shared test utilities."""

import torch


def randomize(module, scale=0.3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def _central_difference(fn, params, eps=1e-6):
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn()
            flat[i] = orig - eps
            down = fn()
            flat[i] = orig
            g.view(-1)[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_gradients_match(fn, params, rtol=1e-4):
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.clone() for p in params]
    with torch.no_grad():
        numeric = _central_difference(lambda: float(fn()), params)
    for a, n in zip(analytic, numeric):
        err = (a - n).abs()
        scale = torch.maximum(a.abs(), n.abs()).clamp(min=1e-6)
        assert float((err / scale).max()) < rtol
