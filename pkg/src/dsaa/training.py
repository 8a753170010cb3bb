"""Trainer for the DSAA adapters on top of the frozen world."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fgovd.world import SyntheticWorld
from .losses import AttrLogitSet, LossWeights, attr_contrastive, bce_loss, det_gate_open, det_loss, info_nce, total_loss
from .pipeline import TextPipeline
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adamw"
    checkpoint_every: int = 500
    use_attr_loss: bool = True
    use_det_loss: bool = True


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data *= 1 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _unit(x: Tensor) -> Tensor:
    return x / (ad.l2_norm(x, axis=-1, keepdims=True) + 1e-12)


def _unit_np(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + 1e-12)


def batch_losses(
    pipeline: TextPipeline,
    world: SyntheticWorld,
    items: Sequence[dict],
    lw: LossWeights,
    step: int,
    use_attr_loss: bool = True,
    use_det_loss: bool = True,
) -> tuple[Tensor, dict]:
    """Total loss for one batch of training records and the per-term values."""
    B = len(items)
    caps = [[it["record"]["positive"], *it["record"]["negatives"]] for it in items]
    n = len(caps[0])
    if any(len(c) != n for c in caps):
        raise ValueError("training records must carry the same number of negatives")
    enc = pipeline.forward([c for group in caps for c in group])
    D = pipeline.dim
    text = ad.reshape(_unit(enc.pooled), (B, n, D))

    regions = []
    for it in items:
        scene = it["scene"]
        target = scene["objects"][scene["target"]]["box"]
        feat = next(p["feature"] for p in scene["proposals"] if p["object"] == scene["target"] and p["box"] == target)
        regions.append(feat)
    r = _unit_np(world.project(regions))  # [B, D]

    cos = ad.tsum(text * r[:, None, :], axis=-1)  # [B, n]
    targets = np.zeros((B, n))
    targets[:, 0] = 1.0
    bias = world.config.logit_bias
    bce = bce_loss((cos - bias) * (1.0 / lw.tau_cls), targets)
    pos = ad.reshape(text[:, 0, :], (B, D))
    sims = ad.matmul(Tensor(r), ad.transpose(pos))  # [B, B]: region i vs caption j
    nce = info_nce(sims, lw.tau_cls)
    parts = {"cls": bce + lw.alpha_nce * nce}
    values = {"bce": bce.item(), "nce": nce.item()}

    if use_attr_loss and enc.attr_pooled is not None:
        has = enc.has_attr.reshape(B, n)
        rows = [b for b in range(B) if has[b, 0]]
        if rows:
            attr_text = ad.reshape(_unit(enc.attr_pooled), (B, n, D))
            acos = ad.tsum(attr_text * r[:, None, :], axis=-1)  # [B, n]
            sel = np.asarray(rows)
            mask = has[sel, 1:]
            logits = AttrLogitSet(ad.getitem(acos, (sel, 0)), ad.getitem(acos, (sel, slice(1, None))), mask)
            parts["attr"] = attr_contrastive(logits, lw.tau_attr)
            values["attr"] = parts["attr"].item()

    gate = det_gate_open(lw, step)
    if use_det_loss and gate:
        det_terms = []
        for b, it in enumerate(items):
            scene = it["scene"]
            props = scene["proposals"]
            feats = _unit_np(world.project([p["feature"] for p in props]))
            pc = ad.matmul(Tensor(feats), ad.reshape(pos[b], (D, 1)))
            logits = (ad.reshape(pc, (len(props),)) - bias) * (1.0 / lw.tau_cls)
            gt = [scene["objects"][scene["target"]]["box"]]
            det_terms.append(det_loss(np.array([p["box"] for p in props]), logits, gt, lw).total)
        parts["det"] = ad.tsum(ad.stack(det_terms)) * (1.0 / B)
        values["det"] = parts["det"].item()

    loss = total_loss(parts, lw, step)
    values["total"] = loss.item()
    values["gate"] = gate
    return loss, values


def windowed_means(values: Sequence[float], window: int) -> list[float]:
    return [float(np.mean(values[i : i + window])) for i in range(0, len(values) - window + 1, window)]


def train(
    pipeline: TextPipeline,
    world: SyntheticWorld,
    items: Sequence[dict],
    cfg: TrainConfig,
    lw: LossWeights,
    seed: int,
    log_path: str | Path | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
) -> list[dict]:
    """Optimize the adapter weights; the encoder and world stay untouched.

    Raises ``FloatingPointError`` on a non-finite loss before the update is
    applied, so the weights stay at the last good step.
    """
    params = pipeline.trainable()
    if cfg.optimizer != "adamw":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    opt = AdamW(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = stream(seed, "train/batches")
    order: list[int] = []
    history = []
    sink = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                order += list(rng.permutation(len(items)))
            batch = [items[i] for i in order[: cfg.batch_size]]
            del order[: cfg.batch_size]
            ad.zero_grad(params)
            loss, values = batch_losses(pipeline, world, batch, lw, step, cfg.use_attr_loss, cfg.use_det_loss)
            if not math.isfinite(values["total"]):
                raise FloatingPointError(f"non-finite loss at step {step}")
            if params:
                ad.backward(loss)
                opt.step()
            record = {"step": step, **values}
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
            if on_checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                on_checkpoint(step + 1)
    finally:
        if sink:
            sink.close()
        pipeline.invalidate()
    return history
