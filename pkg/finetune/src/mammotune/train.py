"""Adapter training loop: frozen base, LoRA parameters only, checkpoints
at the configured epochs, JSONL training log with per-epoch data order."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import lora, models
from .config import FinetuneConfig
from .data import load_dataset

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


class ResourceExhausted(TrainingError):
    pass


class Vocab:
    PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
    SPECIALS = (PAD, BOS, EOS, UNK)

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        seen = sorted({tok for text in texts for tok in text.split()})
        return cls(list(cls.SPECIALS) + seen)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self.index[self.EOS]

    def encode(self, text: str) -> list[int]:
        unk = self.index[self.UNK]
        return [self.index.get(tok, unk) for tok in text.split()]

    def decode(self, ids: list[int]) -> str:
        words = [self.tokens[i] for i in ids if self.tokens[i] not in self.SPECIALS]
        return " ".join(words)


@dataclass
class TrainResult:
    checkpoints: list[Path]
    log_path: Path
    initial_loss: float
    final_loss: float


def _sample_loss(model, image: torch.Tensor, target_ids: list[int], eos_id: int) -> torch.Tensor:
    max_tokens = model.spec.max_seq - 1
    ids = target_ids[:max_tokens]
    tokens = torch.tensor([ids], dtype=torch.long)
    logits = model(image, tokens)  # (1, len+1, V); position i predicts target i
    targets = torch.tensor([ids + [eos_id]], dtype=torch.long)
    return F.cross_entropy(logits.view(-1, model.vocab_size), targets.view(-1))


def evaluate_loss(model, samples, images: dict[str, torch.Tensor], vocab: Vocab) -> float:
    model.eval()
    with torch.no_grad():
        losses = [
            float(_sample_loss(model, images[s["image"]], vocab.encode(s["completion"]), vocab.eos_id))
            for s in samples
        ]
    return sum(losses) / len(losses)


def _build_optimizer(params, config: FinetuneConfig):
    if config.optimizer.endswith("8bit"):
        try:
            import bitsandbytes as bnb

            return bnb.optim.AdamW8bit(params, lr=config.learning_rate)
        except ImportError:
            logger.warning("bitsandbytes unavailable; using torch AdamW at the configured lr")
    return torch.optim.AdamW(params, lr=config.learning_rate)


def _load_images(samples, side: int) -> dict[str, torch.Tensor]:
    images = {}
    for sample in samples:
        path = sample["image"]
        if path in images:
            continue
        try:
            images[path] = models.load_image_tensor(path, side)
        except FileNotFoundError as exc:
            raise TrainingError(f"training image missing: {path}") from exc
    return images


def _save_checkpoint(out_dir: Path, epoch: int, model, vocab: Vocab,
                     config: FinetuneConfig, info: dict) -> Path:
    ckpt_dir = out_dir / f"epoch_{epoch}"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"adapter_state": lora.adapter_state_dict(model)}, ckpt_dir / "adapter.pt")
    meta = {
        "base_model": config.base_model,
        "epoch": epoch,
        "vocab": vocab.tokens,
        "config": config.as_dict(),
        "dataset_info": info,
    }
    (ckpt_dir / "checkpoint.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    return ckpt_dir


def train(config: FinetuneConfig, dataset_path: str | Path, out_dir: str | Path) -> TrainResult:
    """Train adapters on the prepared dataset; one checkpoint directory per
    configured epoch (the current epoch when max_steps stops the run early)."""
    samples, info = load_dataset(dataset_path)
    if not samples:
        raise TrainingError(f"dataset {dataset_path} is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.build([s["completion"] for s in samples])

    model = models.build(config.base_model, len(vocab), seed=config.seed)
    wrapped = lora.inject_adapters(
        model, config.target_modules, config.lora_rank, config.lora_alpha,
        config.lora_dropout, quant_bits=config.quant_bits,
    )
    if not wrapped:
        raise TrainingError(f"no modules matched target_modules {config.target_modules}")
    params = lora.adapter_parameters(model)
    optimizer = _build_optimizer(params, config)
    images = _load_images(samples, model.spec.image_side)

    log_path = out_dir / "training_log.jsonl"
    checkpoints: list[Path] = []
    steps_done = 0
    stopped = False
    try:
        with log_path.open("w", encoding="utf-8") as log:
            initial_loss = evaluate_loss(model, samples, images, vocab)
            log.write(json.dumps({"kind": "eval", "when": "before", "loss": initial_loss}) + "\n")

            last_epoch = 0
            for epoch in range(1, max(config.epochs) + 1):
                last_epoch = epoch
                order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
                log.write(json.dumps(
                    {"kind": "epoch_order", "epoch": epoch,
                     "case_ids": [samples[i]["case_id"] for i in order]}) + "\n")
                model.train()
                accumulated = 0.0
                micro = 0
                for position, sample_index in enumerate(order):
                    sample = samples[sample_index]
                    loss = _sample_loss(
                        model, images[sample["image"]], vocab.encode(sample["completion"]),
                        vocab.eos_id,
                    ) / config.grad_accum_steps
                    loss.backward()
                    accumulated += float(loss.detach())
                    micro += 1
                    is_last = position == len(order) - 1
                    if micro == config.grad_accum_steps or is_last:
                        optimizer.step()
                        optimizer.zero_grad()
                        steps_done += 1
                        log.write(json.dumps(
                            {"kind": "step", "epoch": epoch, "step": steps_done,
                             "loss": accumulated}) + "\n")
                        accumulated = 0.0
                        micro = 0
                        if config.max_steps and steps_done >= config.max_steps:
                            stopped = True
                            break
                if not stopped and epoch in config.epochs:
                    checkpoints.append(_save_checkpoint(out_dir, epoch, model, vocab, config, info))
                if stopped:
                    break
            if stopped and (not checkpoints or checkpoints[-1].name != f"epoch_{last_epoch}"):
                log.write(json.dumps({"kind": "early_stop", "epoch": last_epoch,
                                      "steps": steps_done}) + "\n")
                checkpoints.append(_save_checkpoint(out_dir, last_epoch, model, vocab, config, info))

            final_loss = evaluate_loss(model, samples, images, vocab)
            log.write(json.dumps({"kind": "eval", "when": "after", "loss": final_loss}) + "\n")
    except RuntimeError as exc:
        if "out of memory" in str(exc).lower():
            raise ResourceExhausted(str(exc)) from exc
        raise
    return TrainResult(
        checkpoints=checkpoints, log_path=log_path,
        initial_loss=initial_loss, final_loss=final_loss,
    )
