"""Small fixtures shared by the network tests."""
import numpy as np
import torch
import torch.nn as nn


def randomize_bn(module: nn.Module, seed: int = 0) -> nn.Module:
    """Give every batch norm non-trivial affine parameters and running statistics."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.BatchNorm2d):
            n = m.num_features
            m.weight.data = 0.5 + torch.rand(n, generator=g)
            m.bias.data = 0.2 * torch.randn(n, generator=g)
            m.running_mean = 0.1 * torch.randn(n, generator=g)
            m.running_var = 0.5 + torch.rand(n, generator=g)
    return module.eval()


def np_state(module: nn.Module) -> dict:
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items() if v.ndim}


def stage_state(sd: dict, index: int) -> dict:
    """Entries of block ``index`` of an nn.Sequential stage, prefix stripped."""
    pre = f"{index}."
    return {k[len(pre):]: v for k, v in sd.items() if k.startswith(pre)}


def double(module: nn.Module) -> nn.Module:
    return module.double().eval()


def as_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy()
