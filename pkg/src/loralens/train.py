"""Checkpoints, Adam, backbone pretraining and LoRA / head-only adaptation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import lltd
from .data import SeqBatch
from .errors import ConfigError, DivergenceError, LltdError, ValidationError
from .instrument import GradientLog
from .model import (
    LoraConfig, ModelConfig, forward, head_logits, init_adapters, init_backbone, init_head,
    is_backbone, loss_and_grads, run, trainable_names,
)
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr_adapter: float = 1e-3
    lr_head: float = 1e-3
    lr_backbone: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16

    def lr_for(self, name):
        if name.startswith("lora."):
            return self.lr_adapter
        if name.startswith("head."):
            return self.lr_head
        return self.lr_backbone


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    lora_config: LoraConfig | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def has_adapters(self):
        return self.lora_config is not None and any(n.startswith("lora.") for n in self.params)

    @property
    def num_classes(self):
        return self.params["head.cls.b"].shape[0]

    def copy(self):
        return Checkpoint(self.model_config, {k: v.copy() for k, v in self.params.items()},
                          self.lora_config, self.seed, dict(self.meta))

    def save(self, path):
        meta = {
            "kind": "checkpoint",
            "model_config": asdict(self.model_config),
            "lora_config": None if self.lora_config is None else asdict(self.lora_config),
            "seed": self.seed,
            "meta": self.meta,
        }
        lltd.write_lltd(path, self.params, meta=meta)

    @classmethod
    def load(cls, path):
        params = lltd.read_lltd(path, check_finite=True)
        side = lltd.read_sidecar(path)
        if side is None or side.get("kind") != "checkpoint":
            raise LltdError("missing_entry", f"{path}: missing or invalid checkpoint sidecar")
        lora = side["lora_config"]
        return cls(ModelConfig(**side["model_config"]), params,
                   None if lora is None else LoraConfig(**lora), side["seed"], side["meta"])


class Adam:
    def __init__(self, params: dict, names, cfg: OptimConfig):
        self.cfg = cfg
        self.names = list(names)
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params: dict, grads: dict):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = c.beta1 * self.m[n] + (1.0 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1.0 - c.beta2) * g * g
            lr = c.lr_for(n)
            if lr == 0.0:
                continue
            params[n] = params[n] - lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + c.eps)


class _BatchStream:
    """Epoch-wise shuffled minibatches from a seeded stream."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = SplitMix64(derive_seed(seed, "batches"))
        self.order = np.empty(0, dtype=np.int64)

    def next(self):
        while len(self.order) < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return idx


def pooled_features(params, cfg, x, chunk=64):
    """Mean-pooled final residual states in frozen mode, computed in chunks."""
    out = []
    for i in range(0, len(x), chunk):
        _, _, rec = run(params, cfg, x[i:i + chunk], mode="frozen", trace=True)
        out.append(rec.h[-1].mean(axis=1))
    return np.concatenate(out)


def _head_only_loss(params, feats, labels, names):
    P = {n: ag.Tensor(params[n], requires_grad=n in names) for n in params
         if n.startswith("head.") or n.startswith("ln_f.")}
    loss = ag.cross_entropy(head_logits(ag.Tensor(feats), P), labels)
    loss.backward()
    return float(loss.data), {n: P[n].grad for n in names}


def train(checkpoint: Checkpoint, dataset: SeqBatch, optim: OptimConfig, steps: int, seed: int,
          mode="adapted", capture=False, log_every=1):
    """Minibatch Adam on the trainable set of ``mode`` (``frozen``, ``adapted`` or ``full``).

    Returns ``(checkpoint, loss_curve, gradient_log)``; the log is ``None``
    unless ``capture`` is set, in which case every ``log_every``-th step's
    adapter gradients are stored before the update.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    ckpt = checkpoint.copy()
    cfg, lora = ckpt.model_config, ckpt.lora_config
    if dataset.num_classes > ckpt.num_classes:
        raise ConfigError("dataset has more classes than the classifier head")
    if mode == "adapted" and not ckpt.has_adapters:
        raise ConfigError("adapted training requires LoRA adapters")
    if capture and mode != "adapted":
        raise ConfigError("gradient capture needs adapted mode")
    names = trainable_names(ckpt.params, mode)
    opt = Adam(ckpt.params, names, optim)
    stream = _BatchStream(len(dataset), optim.batch_size, seed)
    grad_log = GradientLog() if capture else None
    feats = pooled_features(ckpt.params, cfg, dataset.data) if mode == "frozen" else None
    curve = []
    for step in range(1, steps + 1):
        idx = stream.next()
        labels = dataset.labels[idx]
        if mode == "frozen":
            loss, grads = _head_only_loss(ckpt.params, feats[idx], labels, names)
        else:
            drop = SplitMix64(derive_seed(seed, "dropout", step)) if mode == "adapted" else None
            loss, grads = loss_and_grads(ckpt.params, cfg, dataset.data[idx], labels, lora,
                                         mode, drop_rng=drop, trainable=names)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}", step=step)
        if grad_log is not None and (step - 1) % log_every == 0:
            grad_log.record(step, loss, grads)
        opt.step(ckpt.params, grads)
        curve.append(loss)
        if step % 100 == 0:
            log.info("%s step %d loss %.4f", mode, step, loss)
    ckpt.meta = {**ckpt.meta, "mode": mode, "steps": steps, "final_loss": curve[-1], "train_seed": seed}
    return ckpt, curve, grad_log


def pretrain_backbone(cfg: ModelConfig, source: SeqBatch, steps: int, seed: int,
                      optim: OptimConfig | None = None) -> tuple:
    """Train every backbone weight plus a source-task head from a seeded init."""
    optim = optim or OptimConfig()
    params = {**init_backbone(cfg, seed), **init_head(cfg, seed, num_classes=source.num_classes)}
    ckpt = Checkpoint(cfg, params, None, seed, {"task": "source"})
    ckpt, curve, _ = train(ckpt, source, optim, steps, seed, mode="full")
    ckpt.meta["task"] = "source"
    return ckpt, curve


def attach_target(backbone: Checkpoint, lora: LoraConfig | None, num_classes: int, seed: int,
                  random_b=False) -> Checkpoint:
    """Frozen backbone + fresh target head (+ LoRA adapters when ``lora`` is given)."""
    cfg = backbone.model_config
    params = {n: v.copy() for n, v in backbone.params.items() if is_backbone(n)}
    params.update(init_head(cfg, seed, num_classes=num_classes))
    if lora is not None:
        params.update(init_adapters(cfg, lora, seed, random_b=random_b))
    return Checkpoint(cfg, params, lora, seed, {"task": "target"})


def predict(checkpoint: Checkpoint, x, mode, chunk=64):
    out = [forward(checkpoint.params, checkpoint.model_config, x[i:i + chunk], checkpoint.lora_config, mode)
           for i in range(0, len(x), chunk)]
    return np.concatenate(out)


def accuracy(checkpoint: Checkpoint, batch: SeqBatch, mode) -> float:
    return float(np.mean(np.argmax(predict(checkpoint, batch.data, mode), axis=1) == batch.labels))
