import hashlib
from typing import Iterable, Tuple

import torch


def tensor_checksum(named: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes), sorted by name."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    named = list(module.named_parameters(remove_duplicate=False))
    named += list(module.named_buffers(remove_duplicate=False))
    return tensor_checksum(named)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
