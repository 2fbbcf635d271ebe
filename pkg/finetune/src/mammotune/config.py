"""Fine-tuning configuration; defaults follow the training recipe:
temperature 0, LoRA alpha 16, dropout 0.05, no bias adapters, lr 2e-4,
batch size 1 with 8 accumulation steps, 8-bit AdamW when available."""

from __future__ import annotations

from dataclasses import dataclass, asdict

SCHEMA_FIELDS = ("breast_density", "findings", "BI-RADS", "suspicion")

MULTI_TASK_EPOCHS = (3, 6, 10, 15)
SINGLE_TASK_EPOCHS = (6, 10)


class ConfigError(Exception):
    pass


@dataclass
class FinetuneConfig:
    base_model: str = "tiny-proxy"
    # rank is not pinned by the recipe; exposed with a conventional default
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_bias: str = "none"
    target_modules: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")
    learning_rate: float = 2e-4
    batch_size: int = 1
    grad_accum_steps: int = 8
    optimizer: str = "adamw_bnb_8bit"  # plain AdamW fallback when bnb is absent
    quant_bits: int = 4                # 0 disables the quantization pass
    epochs: tuple[int, ...] = ()       # checkpoint epochs; () = per-format default
    output_format: str = "multi_task"  # multi_task | single_task
    target_field: str = ""             # required for single_task
    temperature: float = 0.0
    max_steps: int = 0                 # cap on optimizer steps; 0 = unlimited
    seed: int = 17

    def __post_init__(self):
        if self.output_format not in ("multi_task", "single_task"):
            raise ConfigError(f"output_format must be multi_task or single_task, got {self.output_format!r}")
        if self.output_format == "single_task":
            if self.target_field not in SCHEMA_FIELDS:
                raise ConfigError(f"single_task requires target_field from {SCHEMA_FIELDS}")
        if not self.epochs:
            self.epochs = MULTI_TASK_EPOCHS if self.output_format == "multi_task" else SINGLE_TASK_EPOCHS
        self.epochs = tuple(sorted(set(int(e) for e in self.epochs)))
        if any(e < 1 for e in self.epochs):
            raise ConfigError("epochs must be positive")
        if self.lora_bias != "none":
            raise ConfigError("only bias='none' adapters are supported")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must be in [0, 1)")
        if self.temperature != 0.0:
            raise ConfigError("decoding is greedy; temperature must be 0")
        if self.quant_bits not in (0, 4, 8):
            raise ConfigError("quant_bits must be 0, 4, or 8")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["target_modules"] = list(self.target_modules)
        out["epochs"] = list(self.epochs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FinetuneConfig":
        data = dict(data)
        data["target_modules"] = tuple(data.get("target_modules", ("q_proj", "k_proj", "v_proj", "o_proj")))
        data["epochs"] = tuple(data.get("epochs", ()))
        return cls(**data)
