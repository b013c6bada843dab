"""Synthetic sequence-classification data and external feature ingestion.

A sample of class ``c`` is ``template_c + distractor_scale * template_k + noise``
where ``k`` is a uniformly drawn index into the distractor bank. Target data
(4 classes) uses the "style" bank as labels and the "content" bank as
distractors; source data (8 classes) swaps the two, so both tasks see the same
input distribution under different labels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import lltd
from .errors import LltdError, ShapeError, ValidationError
from .rng import SplitMix64, derive_seed

ENVELOPES = ("flat", "rise", "fall", "bump")


@dataclass(frozen=True)
class ClassTemplate:
    """Sinusoid-plus-envelope pattern loaded on a seeded pair of feature directions.

    ``channel`` picks the direction pair; templates sharing a channel overlap in
    feature space and differ only through their temporal parameters.
    """

    frequency: float
    amplitude: float
    phase: float = 0.0
    offset: float = 0.0
    envelope: str = "flat"
    channel: int = 0

    def __post_init__(self):
        if self.envelope not in ENVELOPES:
            raise ValidationError(f"unknown envelope {self.envelope!r}")


def envelope(kind, t):
    if kind == "flat":
        return np.ones_like(t)
    if kind == "rise":
        return 0.25 + 1.5 * t
    if kind == "fall":
        return 1.75 - 1.5 * t
    return 0.25 + 6.0 * t * (1.0 - t)  # bump


@dataclass(frozen=True)
class SynthSpec:
    templates: tuple
    distractors: tuple = ()
    distractor_scale: float = 1.0
    noise_sigma: float = 0.5
    seq_len: int = 32
    input_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(
            t if isinstance(t, ClassTemplate) else ClassTemplate(**t) for t in self.templates))
        object.__setattr__(self, "distractors", tuple(
            t if isinstance(t, ClassTemplate) else ClassTemplate(**t) for t in self.distractors))
        if len(self.templates) < 1:
            raise ValidationError("SynthSpec needs at least one class template")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if self.seq_len < 1 or self.input_dim < 2:
            raise ValidationError("seq_len must be >= 1 and input_dim >= 2")

    @property
    def num_classes(self):
        return len(self.templates)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def channel_directions(seed, channel, input_dim):
    """Two orthonormal feature directions for ``channel`` (offset, oscillation)."""
    rng = SplitMix64(derive_seed(seed, "channel", channel))
    m = rng.normal((input_dim, 2))
    u = m[:, 0] / np.linalg.norm(m[:, 0])
    v = m[:, 1] - (u @ m[:, 1]) * u
    return u, v / np.linalg.norm(v)


def render_template(tpl: ClassTemplate, seq_len, input_dim, seed) -> np.ndarray:
    t = np.arange(seq_len, dtype=np.float64) / seq_len
    u, v = channel_directions(seed, tpl.channel, input_dim)
    wave = tpl.amplitude * envelope(tpl.envelope, t) * np.sin(2 * np.pi * tpl.frequency * t + tpl.phase)
    return tpl.offset * u[None, :] + wave[:, None] * v[None, :]


def render_templates(spec: SynthSpec, which="templates") -> np.ndarray:
    bank = getattr(spec, which)
    if not bank:
        return np.zeros((0, spec.seq_len, spec.input_dim))
    return np.stack([render_template(t, spec.seq_len, spec.input_dim, spec.seed) for t in bank])


@dataclass
class SeqBatch:
    data: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.data.ndim != 3:
            raise ShapeError(f"SeqBatch data must be (batch, time, dim), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise ShapeError("labels must be a vector with one entry per sequence")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("SeqBatch data contains non-finite values")
        if self.labels.size and (np.any(self.labels != np.round(self.labels))
                                 or self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must be integers in [0, {self.num_classes})")
        self.labels = self.labels.astype(np.int64)

    def __len__(self):
        return self.data.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SeqBatch(self.data[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def generate(spec: SynthSpec, n_per_class: int) -> SeqBatch:
    """Balanced batch ordered class-major: ``n_per_class`` sequences of class 0, then 1, ..."""
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    tpl = render_templates(spec)
    flat = tpl.reshape(len(tpl), -1)
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            if np.array_equal(flat[i], flat[j]):
                raise ValidationError(f"class templates {i} and {j} are identical")
    dis = render_templates(spec, "distractors")
    c = spec.num_classes
    n = c * n_per_class
    labels = np.repeat(np.arange(c), n_per_class)
    rng = SplitMix64(derive_seed(spec.seed, "samples", n_per_class))
    x = tpl[labels].copy()
    if len(dis):
        pick = rng.integers(len(dis), (n,))
        x += spec.distractor_scale * dis[pick]
    if spec.noise_sigma > 0:
        x += rng.normal((n, spec.seq_len, spec.input_dim), scale=spec.noise_sigma)
    return SeqBatch(x, labels, c, {"spec": spec.to_dict(), "n_per_class": n_per_class})


def split(batch: SeqBatch, train_fraction: float, seed: int):
    """Class-balanced disjoint split; each class keeps at least one example per side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly between 0 and 1")
    rng = SplitMix64(derive_seed(seed, "split"))
    train_idx, eval_idx = [], []
    for c in range(batch.num_classes):
        members = np.flatnonzero(batch.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValidationError(f"class {c} has fewer than 2 examples; cannot split")
        members = members[rng.permutation(len(members))]
        k = int(np.clip(np.floor(train_fraction * len(members) + 0.5), 1, len(members) - 1))
        train_idx.append(members[:k])
        eval_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    eval_idx = np.sort(np.concatenate(eval_idx))
    return batch.subset(train_idx), batch.subset(eval_idx)


def balanced_sample(batch: SeqBatch, per_class: int, seed: int) -> SeqBatch:
    """First ``per_class`` examples of each class after a seeded shuffle."""
    rng = SplitMix64(derive_seed(seed, "balanced"))
    picks = []
    for c in range(batch.num_classes):
        members = np.flatnonzero(batch.labels == c)
        if len(members) < per_class:
            raise ValidationError(f"class {c} has {len(members)} examples, need {per_class}")
        picks.append(members[rng.permutation(len(members))[:per_class]])
    return batch.subset(np.sort(np.concatenate(picks)))


def linear_probe_accuracy(train: SeqBatch, test: SeqBatch) -> float:
    """Least-squares one-hot regression on mean-pooled raw input."""
    def feats(b):
        pooled = b.data.mean(axis=1)
        return np.hstack([pooled, np.ones((len(b), 1))])

    y = np.eye(train.num_classes)[train.labels]
    w, *_ = np.linalg.lstsq(feats(train), y, rcond=None)
    pred = np.argmax(feats(test) @ w, axis=1)
    return float(np.mean(pred == test.labels))


# Style bank: classes 0/1 differ in their pooled mean, classes 2/3 share a
# direction pair and a zero-mean oscillation and differ only in time course.
STYLE_BANK = (
    ClassTemplate(frequency=1.0, amplitude=0.6, offset=0.35, envelope="flat", channel=0),
    ClassTemplate(frequency=1.0, amplitude=0.6, offset=-0.35, envelope="flat", channel=0),
    ClassTemplate(frequency=2.0, amplitude=1.2, phase=0.0, envelope="rise", channel=1),
    ClassTemplate(frequency=2.0, amplitude=1.2, phase=0.0, envelope="fall", channel=1),
)

CONTENT_BANK = tuple(
    ClassTemplate(frequency=float(1 + k % 4), amplitude=0.8, phase=0.4 * k,
                  offset=0.6 * (-1) ** k, envelope=ENVELOPES[k % 4], channel=2 + k)
    for k in range(8)
)


def target_spec(seed=0, **overrides) -> SynthSpec:
    spec = SynthSpec(templates=STYLE_BANK, distractors=CONTENT_BANK, seed=seed)
    return replace(spec, **overrides) if overrides else spec


def source_spec(seed=0, **overrides) -> SynthSpec:
    spec = SynthSpec(templates=CONTENT_BANK, distractors=STYLE_BANK, seed=seed)
    return replace(spec, **overrides) if overrides else spec


def save_batch(path, batch: SeqBatch):
    lltd.write_lltd(
        path,
        {"data": batch.data, "labels": batch.labels.astype(np.float64)},
        meta={"num_classes": int(batch.num_classes), "labels": batch.labels.tolist(), **batch.meta},
    )


def load_external(path) -> SeqBatch:
    """Read a (batch, time, dim) ``data`` tensor and its labels from an LLTD file.

    Labels come from a ``labels`` tensor or, failing that, the JSON sidecar.
    """
    tensors = lltd.read_lltd(path, check_finite=True)
    meta = lltd.read_sidecar(path) or {}
    if "data" not in tensors:
        raise LltdError("missing_entry", "container has no 'data' tensor")
    data = tensors["data"]
    if data.ndim != 3:
        raise LltdError("shape_mismatch", f"'data' must be 3-D, got shape {data.shape}")
    if "labels" in tensors:
        labels = tensors["labels"]
    elif "labels" in meta:
        labels = np.asarray(meta["labels"], dtype=np.float64)
    else:
        raise LltdError("missing_entry", "no labels tensor or sidecar labels record")
    if labels.shape != (data.shape[0],):
        raise LltdError("shape_mismatch", f"labels shape {labels.shape} does not match batch {data.shape[0]}")
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise LltdError("shape_mismatch", "labels must be non-negative integers")
    num_classes = int(meta.get("num_classes", int(labels.max()) + 1 if labels.size else 1))
    if labels.size and labels.max() >= num_classes:
        raise LltdError("shape_mismatch", f"label {int(labels.max())} outside [0, {num_classes})")
    extra = {k: v for k, v in meta.items() if k not in ("labels", "num_classes")}
    return SeqBatch(data.astype(np.float64), labels.astype(np.int64), num_classes, extra)
