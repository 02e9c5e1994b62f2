"""Central finite-difference gradient check on a random slice of an input."""

import torch

STEP = 1e-4


def slice_relative_error(fn, x: torch.Tensor, gen: torch.Generator, n: int = 8, step: float = STEP) -> float:
    """Relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) on ``n`` random entries of ``x``.

    ``fn`` maps a float64 tensor shaped like ``x`` to a scalar.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    fn(x).backward()
    auto = x.grad.flatten()
    idx = torch.randperm(x.numel(), generator=gen)[: min(n, x.numel())]
    flat = x.detach().flatten()
    numeric = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += step
            lo[i] -= step
            numeric[j] = (fn(hi.view_as(x)) - fn(lo.view_as(x))) / (2 * step)
    a = auto[idx]
    scale = max(float(a.norm()), float(numeric.norm()), 1e-12)
    return float((a - numeric).norm()) / scale
