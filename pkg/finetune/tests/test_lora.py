import torch
import torch.nn as nn

from mammotune import lora
from mammotune.models import build


def _model():
    return build("tiny-proxy", vocab_size=50, seed=3)


def test_inject_wraps_attention_projections_only():
    model = _model()
    wrapped = lora.inject_adapters(model, ("q_proj", "k_proj", "v_proj", "o_proj"),
                                   rank=4, alpha=8.0, dropout=0.0)
    assert len(wrapped) == 2 * 4  # two blocks, four projections each
    assert all(name.endswith(("q_proj", "k_proj", "v_proj", "o_proj")) for name in wrapped)
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert trainable and all("lora_" in n for n in trainable)


def test_adapters_preserve_base_function_at_init():
    torch.manual_seed(0)
    image = torch.rand(1, 1, 32, 32)
    tokens = torch.randint(0, 50, (1, 12))
    base = _model()
    with torch.no_grad():
        before = base(image, tokens).clone()
    lora.inject_adapters(base, ("q_proj", "k_proj", "v_proj", "o_proj"),
                         rank=4, alpha=8.0, dropout=0.0, quant_bits=0)
    base.eval()
    with torch.no_grad():
        after = base(image, tokens)
    # lora_b starts at zero, so the wrapped model computes the base function
    assert torch.equal(before, after)


def test_quantization_coarsens_weights():
    linear = nn.Linear(32, 32)
    lora.quantize_dequantize_(linear, bits=4)
    distinct = torch.unique(linear.weight).numel()
    assert distinct <= 16  # 4-bit symmetric grid


def test_adapter_state_round_trip():
    torch.manual_seed(1)
    image = torch.rand(1, 1, 32, 32)
    tokens = torch.randint(0, 50, (1, 8))
    model = _model()
    lora.inject_adapters(model, ("q_proj",), rank=4, alpha=8.0, dropout=0.0)
    with torch.no_grad():
        for p in lora.adapter_parameters(model):
            p.add_(torch.randn_like(p) * 0.1)
    model.eval()
    with torch.no_grad():
        expected = model(image, tokens).clone()
    state = lora.adapter_state_dict(model)

    fresh = _model()
    lora.inject_adapters(fresh, ("q_proj",), rank=4, alpha=8.0, dropout=0.0)
    lora.load_adapter_state(fresh, state)
    fresh.eval()
    with torch.no_grad():
        got = fresh(image, tokens)
    assert torch.equal(expected, got)
