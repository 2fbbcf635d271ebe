"""Low-rank adapters over a frozen (optionally quantized) base.

Only the adapter matrices train; the base weights are frozen and, when
quant_bits is set, passed through a uniform symmetric quantize-dequantize
so training sees quantized-precision weights. That is a CPU stand-in for
true 4-bit kernels: the arithmetic stays float, but the information loss
of the configured bit width is real.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.normal_(self.lora_a, std=0.02)
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + delta * self.scaling


def quantize_dequantize_(linear: nn.Linear, bits: int) -> None:
    """In-place per-tensor symmetric fake-quantization of the weight."""
    with torch.no_grad():
        weight = linear.weight
        qmax = 2 ** (bits - 1) - 1
        scale = weight.abs().max() / qmax
        if scale == 0:
            return
        linear.weight.copy_(torch.clamp((weight / scale).round(), -qmax - 1, qmax) * scale)


def inject_adapters(
    model: nn.Module,
    target_modules: tuple[str, ...],
    rank: int,
    alpha: float,
    dropout: float,
    quant_bits: int = 0,
) -> list[str]:
    """Freeze the model, fake-quantize frozen Linears when requested, and
    wrap every Linear whose attribute name matches target_modules.
    Returns the qualified names of wrapped modules."""
    for param in model.parameters():
        param.requires_grad_(False)
    if quant_bits:
        for module in model.modules():
            if isinstance(module, nn.Linear):
                quantize_dequantize_(module, quant_bits)
    wrapped = []
    for parent_name, parent in list(model.named_modules()):
        for attr in target_modules:
            child = getattr(parent, attr, None)
            if isinstance(child, nn.Linear):
                setattr(parent, attr, LoRALinear(child, rank, alpha, dropout))
                wrapped.append(f"{parent_name}.{attr}" if parent_name else attr)
    return wrapped


def adapter_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor.detach().clone()
        for name, tensor in model.state_dict().items()
        if "lora_a" in name or "lora_b" in name
    }


def load_adapter_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    missing = [name for name in state if name not in dict(model.named_parameters())]
    if missing:
        raise KeyError(f"adapter state has unknown entries: {missing[:3]}")
    model.load_state_dict(state, strict=False)
