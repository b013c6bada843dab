"""Pre-norm transformer encoder with LoRA adapters and a pooled classifier head.

Parameters live in a flat ``dict[str, np.ndarray]``. Names:

* backbone: ``embed.W``, ``embed.b``, ``pos``, ``layers.{l}.{ln1,ln2}.{g,b}``,
  ``layers.{l}.attn.{q,k,v,o}.{W,b}``, ``layers.{l}.mlp.{fc1,fc2}.{W,b}``,
  ``ln_f.{g,b}``
* head: ``head.proj.{W,b}``, ``head.cls.{W,b}``
* adapters: ``lora.{l}.{query,value}.{A,B}``

Block ``l`` maps residual state ``h`` to ``h + a + m`` with
``a = Attn(LN1(h))`` and ``m = MLP(LN2(h + a))``. The head mean-pools the final
residual state over time, applies ``ln_f``, a tanh projector and a linear
classifier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError, ValidationError
from .rng import SplitMix64, derive_seed

TARGET_KEYS = {"query": "q", "value": "v"}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    model_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 256
    input_dim: int = 16
    num_classes: int = 4
    seq_len: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ConfigError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float | None = None
    dropout: float = 0.1
    targets: tuple = ("query", "value")

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigError(f"LoRA rank must be a positive integer, got {self.rank!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"LoRA dropout must lie in [0, 1), got {self.dropout!r}")
        unknown = set(self.targets) - set(TARGET_KEYS)
        if unknown or not self.targets:
            raise ConfigError(f"LoRA targets must be a non-empty subset of {sorted(TARGET_KEYS)}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError("duplicate LoRA targets")

    @property
    def scale(self):
        alpha = self.rank if self.alpha is None else self.alpha
        return alpha / self.rank

    def check(self, model_cfg: ModelConfig):
        if self.rank > model_cfg.model_dim:
            raise ConfigError(f"LoRA rank {self.rank} exceeds model_dim {model_cfg.model_dim}")


def backbone_shapes(cfg: ModelConfig) -> dict:
    d, h = cfg.model_dim, cfg.mlp_hidden
    shapes = {
        "embed.W": (d, cfg.input_dim),
        "embed.b": (d,),
        "pos": (cfg.seq_len, d),
    }
    for l in range(cfg.num_layers):
        p = f"layers.{l}"
        shapes.update({
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.mlp.fc1.W": (h, d), f"{p}.mlp.fc1.b": (h,),
            f"{p}.mlp.fc2.W": (d, h), f"{p}.mlp.fc2.b": (d,),
        })
        for proj in "qkvo":
            shapes[f"{p}.attn.{proj}.W"] = (d, d)
            shapes[f"{p}.attn.{proj}.b"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def head_shapes(cfg: ModelConfig, num_classes=None) -> dict:
    d = cfg.model_dim
    c = cfg.num_classes if num_classes is None else num_classes
    return {"head.proj.W": (d, d), "head.proj.b": (d,), "head.cls.W": (c, d), "head.cls.b": (c,)}


def adapter_names(cfg: ModelConfig, lora: LoraConfig):
    return [(l, t) for l in range(cfg.num_layers) for t in lora.targets]


def _init_param(name, shape, seed):
    rng = SplitMix64(derive_seed(seed, name))
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    if name == "pos":
        return rng.normal(shape, scale=0.5)
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(shape, -bound, bound)


def init_backbone(cfg: ModelConfig, seed: int) -> dict:
    return {n: _init_param(n, s, derive_seed(seed, "backbone")) for n, s in backbone_shapes(cfg).items()}


def init_head(cfg: ModelConfig, seed: int, num_classes=None) -> dict:
    return {n: _init_param(n, s, derive_seed(seed, "head")) for n, s in head_shapes(cfg, num_classes).items()}


def init_adapters(cfg: ModelConfig, lora: LoraConfig, seed: int, random_b=False) -> dict:
    """Standard LoRA init: ``A ~ U(-1/sqrt(d), 1/sqrt(d))`` and ``B = 0``.

    With ``random_b`` the B factor is drawn from the same uniform law as A;
    this is the untrained reference used by the spectrum analyses, where a
    zero B would leave the B-side spectrum undefined.
    """
    lora.check(cfg)
    d, r = cfg.model_dim, lora.rank
    bound = 1.0 / np.sqrt(d)
    out = {}
    for l, t in adapter_names(cfg, lora):
        key = f"lora.{l}.{t}"
        out[f"{key}.A"] = SplitMix64(derive_seed(seed, "lora", key, "A")).uniform((r, d), -bound, bound)
        if random_b:
            out[f"{key}.B"] = SplitMix64(derive_seed(seed, "lora", key, "B")).uniform((d, r), -bound, bound)
        else:
            out[f"{key}.B"] = np.zeros((d, r))
    return out


def is_backbone(name):
    return not (name.startswith("head.") or name.startswith("lora."))


@dataclass
class Trace:
    """Raw captures of one forward pass (token level, evaluation mode)."""

    h: list = field(default_factory=list)
    a: list = field(default_factory=list)
    m: list = field(default_factory=list)
    act_a: dict = field(default_factory=dict)
    act_b: dict = field(default_factory=dict)


def _dropout(x: ag.Tensor, p: float, rng: SplitMix64 | None) -> ag.Tensor:
    if p == 0.0 or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return ag.mul(x, keep)


def _attention(xn, P, pfx, cfg, adapters, lora, trace, layer, drop_rng):
    B, T, d = xn.shape
    H, dh = cfg.num_heads, cfg.head_dim
    proj = {}
    for key in "qkv":
        proj[key] = ag.linear(xn, P[f"{pfx}.attn.{key}.W"], P[f"{pfx}.attn.{key}.b"])
    if adapters is not None:
        for target in lora.targets:
            name = f"lora.{layer}.{target}"
            xin = _dropout(xn, lora.dropout, drop_rng)
            act_a = ag.linear(xin, adapters[f"{name}.A"])
            act_b = ag.linear(act_a, adapters[f"{name}.B"])
            if trace is not None:
                trace.act_a[(layer, target)] = act_a.data.reshape(B * T, -1)
                trace.act_b[(layer, target)] = act_b.data.reshape(B * T, -1)
            key = TARGET_KEYS[target]
            proj[key] = ag.add(proj[key], ag.scale(act_b, lora.scale))

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = heads(proj["q"]), heads(proj["k"]), heads(proj["v"])
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    ctx = ag.matmul(ag.softmax(scores, axis=-1), v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return ag.linear(ctx, P[f"{pfx}.attn.o.W"], P[f"{pfx}.attn.o.b"])


def head_logits(pooled, P) -> ag.Tensor:
    """ln_f -> tanh projector -> classifier on pooled (batch, d) states."""
    z = ag.layer_norm(pooled, P["ln_f.g"], P["ln_f.b"])
    z = ag.tanh(ag.linear(z, P["head.proj.W"], P["head.proj.b"]))
    return ag.linear(z, P["head.cls.W"], P["head.cls.b"])


def run(params, cfg: ModelConfig, x, lora: LoraConfig | None = None, mode="frozen",
        trainable=(), trace=False, drop_rng=None):
    """Forward pass on the autodiff graph.

    ``params`` values may be arrays or ``Tensor`` leaves; names in
    ``trainable`` are wrapped as gradient-tracking leaves. Returns
    ``(logits, leaves, trace)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise ShapeError(
            f"batch shape {x.shape} does not match (batch, {cfg.seq_len}, {cfg.input_dim})")
    if mode not in ("frozen", "adapted"):
        raise ConfigError(f"unknown mode {mode!r}")
    leaves = {}
    P = {}
    for name, value in params.items():
        t = ag.Tensor(value, requires_grad=name in trainable)
        if name in trainable:
            leaves[name] = t
        P[name] = t
    adapters = None
    if mode == "adapted":
        if lora is None or not any(n.startswith("lora.") for n in params):
            raise ConfigError("adapted mode requires LoRA adapters")
        adapters = P
    rec = Trace() if trace else None

    h = ag.add(ag.linear(x, P["embed.W"], P["embed.b"]), P["pos"])
    for l in range(cfg.num_layers):
        pfx = f"layers.{l}"
        xn = ag.layer_norm(h, P[f"{pfx}.ln1.g"], P[f"{pfx}.ln1.b"])
        a = _attention(xn, P, pfx, cfg, adapters, lora, rec, l, drop_rng)
        mid = ag.add(h, a)
        xn2 = ag.layer_norm(mid, P[f"{pfx}.ln2.g"], P[f"{pfx}.ln2.b"])
        m = ag.linear(ag.gelu(ag.linear(xn2, P[f"{pfx}.mlp.fc1.W"], P[f"{pfx}.mlp.fc1.b"])),
                      P[f"{pfx}.mlp.fc2.W"], P[f"{pfx}.mlp.fc2.b"])
        if rec is not None:
            rec.h.append(h.data)
            rec.a.append(a.data)
            rec.m.append(m.data)
        h = ag.add(mid, m)
    if rec is not None:
        rec.h.append(h.data)
    logits = head_logits(ag.mean(h, axis=1), P)
    return logits, leaves, rec


def forward(params, cfg, x, lora=None, mode="frozen", trace=False):
    """Evaluation-mode logits (dropout off), optionally with a ``Trace``."""
    logits, _, rec = run(params, cfg, x, lora, mode, trace=trace)
    return (logits.data, rec) if trace else logits.data


def trainable_names(params, mode):
    if mode == "frozen":
        return [n for n in params if n.startswith("head.")]
    if mode == "adapted":
        return [n for n in params if n.startswith("head.") or n.startswith("lora.")]
    if mode == "full":
        return [n for n in params if not n.startswith("lora.")]
    raise ConfigError(f"unknown training mode {mode!r}")


def loss_and_grads(params, cfg, x, labels, lora=None, mode="frozen", drop_rng=None, trainable=None):
    """Mean cross-entropy and gradients for the trainable parameter set of ``mode``."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != np.shape(x)[0]:
        raise ShapeError("labels must be a vector with one entry per example")
    num_classes = params["head.cls.b"].shape[0]
    if np.any(labels < 0) or np.any(labels >= num_classes) or np.any(labels != np.round(labels)):
        raise ValidationError(f"labels must be integers in [0, {num_classes})")
    if trainable is None:
        trainable = trainable_names(params, mode)
    fwd_mode = "frozen" if mode == "full" else mode
    logits, leaves, _ = run(params, cfg, x, lora, fwd_mode, trainable=set(trainable), drop_rng=drop_rng)
    loss = ag.cross_entropy(logits, labels.astype(np.int64))
    loss.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}
    return float(loss.data), grads
