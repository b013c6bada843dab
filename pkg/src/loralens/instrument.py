"""Residual-stream traces and adapter gradient logs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lltd
from .errors import ConfigError, LltdError, ShapeError
from .model import forward


@dataclass
class TraceRecord:
    """Token-level captures for one batch.

    ``h[l]`` is the residual state entering block ``l`` (``h[L]`` is the final
    state), ``a[l]``/``m[l]`` the attention and MLP sublayer outputs, all of
    shape (batch, time, d). ``act_a``/``act_b`` map ``(layer, target)`` to
    (batch*time, r) and (batch*time, d) adapter activations.
    """

    h: list
    a: list
    m: list
    mode: str
    act_a: dict = field(default_factory=dict)
    act_b: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    batch_id: str = ""

    @property
    def num_layers(self):
        return len(self.a)

    def residual_error(self) -> float:
        """Largest |h[l+1] - (h[l] + a[l] + m[l])| over all layers."""
        return max(float(np.max(np.abs(self.h[l + 1] - (self.h[l] + self.a[l] + self.m[l]))))
                   for l in range(self.num_layers))

    def to_tensors(self) -> dict:
        out = {}
        for l, h in enumerate(self.h):
            out[f"h.{l}"] = h
        for l in range(self.num_layers):
            out[f"a.{l}"] = self.a[l]
            out[f"m.{l}"] = self.m[l]
        for (l, t), v in self.act_a.items():
            out[f"act_A.{l}.{t}"] = v
        for (l, t), v in self.act_b.items():
            out[f"act_B.{l}.{t}"] = v
        if self.logits is not None:
            out["logits"] = self.logits
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, mode: str, batch_id=""):
        num_layers = sum(1 for k in tensors if k.startswith("a."))
        try:
            h = [tensors[f"h.{l}"] for l in range(num_layers + 1)]
            a = [tensors[f"a.{l}"] for l in range(num_layers)]
            m = [tensors[f"m.{l}"] for l in range(num_layers)]
        except KeyError as exc:
            raise LltdError("missing_entry", f"trace container lacks {exc.args[0]}") from None
        act_a, act_b = {}, {}
        for k, v in tensors.items():
            if k.startswith("act_A.") or k.startswith("act_B."):
                _, l, t = k.split(".")
                (act_a if k.startswith("act_A.") else act_b)[(int(l), t)] = v
        return cls(h, a, m, mode, act_a, act_b, tensors.get("logits"), batch_id)

    def save(self, path):
        lltd.write_lltd(path, self.to_tensors(), meta={"mode": self.mode, "batch_id": self.batch_id})

    @classmethod
    def load(cls, path):
        meta = lltd.read_sidecar(path) or {}
        return cls.from_tensors(lltd.read_lltd(path), meta.get("mode", "unknown"), meta.get("batch_id", ""))


def trace_batch(checkpoint, x, mode, batch_id="") -> TraceRecord:
    """Evaluation-mode forward pass on ``x`` with every capture enabled."""
    if mode == "adapted" and not checkpoint.has_adapters:
        raise ConfigError("cannot trace adapted mode: checkpoint has no LoRA adapters")
    logits, rec = forward(checkpoint.params, checkpoint.model_config, x,
                          checkpoint.lora_config, mode, trace=True)
    return TraceRecord(rec.h, rec.a, rec.m, mode, rec.act_a, rec.act_b, logits, batch_id)


@dataclass
class GradientLog:
    """Per-step adapter gradients, recorded before the optimizer update."""

    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_a: dict = field(default_factory=dict)
    grad_b: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps)

    def record(self, step, loss, grads: dict):
        if self.steps and step <= self.steps[-1]:
            raise ShapeError(f"gradient log steps must increase (got {step} after {self.steps[-1]})")
        self.steps.append(int(step))
        self.losses.append(float(loss))
        for name, g in grads.items():
            if not name.startswith("lora."):
                continue
            _, l, t, which = name.split(".")
            store = self.grad_a if which == "A" else self.grad_b
            series = store.setdefault((int(l), t), [])
            if series and series[0].shape != g.shape:
                raise ShapeError(f"gradient shape changed for {name}")
            series.append(np.array(g, copy=True))

    def adapters(self):
        return sorted(self.grad_a)

    def stacked(self, key):
        """(steps, r, d) and (steps, d, r) arrays for one adapter."""
        return np.stack(self.grad_a[key]), np.stack(self.grad_b[key])

    def to_tensors(self) -> dict:
        out = {"steps": np.asarray(self.steps, dtype=np.float64),
               "losses": np.asarray(self.losses, dtype=np.float64)}
        for key in self.adapters():
            ga, gb = self.stacked(key)
            out[f"grad_A.{key[0]}.{key[1]}"] = ga
            out[f"grad_B.{key[0]}.{key[1]}"] = gb
        return out

    @classmethod
    def from_tensors(cls, tensors: dict):
        log = cls(steps=[int(s) for s in tensors["steps"]], losses=list(map(float, tensors["losses"])))
        for k, v in tensors.items():
            if k.startswith("grad_A.") or k.startswith("grad_B."):
                _, l, t = k.split(".")
                (log.grad_a if k.startswith("grad_A.") else log.grad_b)[(int(l), t)] = list(v)
        return log

    def save(self, path):
        lltd.write_lltd(path, self.to_tensors(), meta={"kind": "gradient_log", "length": len(self)})

    @classmethod
    def load(cls, path):
        return cls.from_tensors(lltd.read_lltd(path))
