"""Base models for adapter training.

The registry ships tiny decoder-only proxies (conv image encoder feeding a
prefix token into a causal transformer) that train in seconds on CPU, so
the harness, schedules, and export paths are exercisable without GPU-scale
weights. Real bases plug in through the same registry interface: anything
that maps (image, token ids) to next-token logits and names its attention
projections q/k/v/o_proj works.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
from PIL import Image


class BaseModelMissing(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d_model: int
    n_layers: int
    max_seq: int
    image_side: int


REGISTRY = {
    "tiny-proxy": ModelSpec(name="tiny-proxy", d_model=64, n_layers=2, max_seq=192, image_side=32),
    "tiny-proxy-wide": ModelSpec(name="tiny-proxy-wide", d_model=128, n_layers=2, max_seq=256, image_side=32),
}


class SelfAttention(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        att = (q @ k.transpose(-2, -1)) * self.scale
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        return self.o_proj(att @ v)


class Block(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.attn = SelfAttention(d_model)
        self.fc1 = nn.Linear(d_model, 2 * d_model)
        self.fc2 = nn.Linear(2 * d_model, d_model)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(torch.relu(self.fc1(self.ln2(x))))


class TinyVLM(nn.Module):
    """Image prefix + causal LM over whitespace tokens."""

    def __init__(self, spec: ModelSpec, vocab_size: int):
        super().__init__()
        self.spec = spec
        self.vocab_size = vocab_size
        d = spec.d_model
        self.encoder = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, d, 3, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(1),
        )
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Embedding(spec.max_seq + 1, d)
        self.blocks = nn.ModuleList([Block(d) for _ in range(spec.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, vocab_size)

    def forward(self, image: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits over [image-prefix, t_0 .. t_{T-1}]; position i predicts t_i."""
        batch, seq = tokens.shape
        prefix = self.encoder(image).flatten(1).unsqueeze(1)
        positions = torch.arange(seq, device=tokens.device)
        x = torch.cat([prefix, self.tok_emb(tokens) + self.pos_emb(positions)], dim=1)
        length = seq + 1
        mask = torch.triu(torch.ones(length, length, dtype=torch.bool, device=tokens.device), diagonal=1)
        for block in self.blocks:
            x = block(x, mask)
        return self.lm_head(self.ln_f(x))


def build(base_model: str, vocab_size: int, seed: int) -> TinyVLM:
    """Deterministically initialized base from the registry."""
    if base_model not in REGISTRY:
        raise BaseModelMissing(
            f"base model {base_model!r} is not in the local registry "
            f"({sorted(REGISTRY)}); pulling remote weights is not supported here"
        )
    spec = REGISTRY[base_model]
    torch.manual_seed(seed)
    return TinyVLM(spec, vocab_size)


def spec_dict(spec: ModelSpec) -> dict:
    return asdict(spec)


def load_image_tensor(path: str, side: int) -> torch.Tensor:
    """Grayscale float tensor in [0, 1], shape (1, 1, side, side)."""
    with Image.open(path) as img:
        gray = img.convert("L").resize((side, side), Image.BILINEAR)
        arr = np.asarray(gray, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).unsqueeze(0).unsqueeze(0)
