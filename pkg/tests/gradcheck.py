"""Central finite-difference oracle shared by the gradient tests."""

import torch


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a) + abs(b), floor)


def check_entries(params, fn, entries, h=1e-6) -> float:
    """Worst relative error over ``entries`` = [(param index, flat index)].

    ``fn`` returns a scalar tensor; it must be deterministic.
    """
    for p in params:
        p.grad = None
    fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    worst = 0.0
    with torch.no_grad():
        for pi, fi in entries:
            flat = params[pi].view(-1)
            orig = flat[fi].item()
            flat[fi] = orig + h
            up = fn().item()
            flat[fi] = orig - h
            down = fn().item()
            flat[fi] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, rel_err(grads[pi].view(-1)[fi].item(), fd))
    return worst


def check_module_grads(module, forward, n_entries=24, seed=0) -> float:
    """Check random weights of ``module`` against a fixed random projection of ``forward()``."""
    params = [p for p in module.parameters()]
    out = forward()
    g = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=g, dtype=out.dtype)
    fn = lambda: (forward() * proj).sum()  # noqa: E731
    sizes = [p.numel() for p in params]
    entries = []
    for _ in range(n_entries):
        pi = int(torch.randint(len(params), (1,), generator=g))
        entries.append((pi, int(torch.randint(sizes[pi], (1,), generator=g))))
    return check_entries(params, fn, entries)
