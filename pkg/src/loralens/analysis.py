"""Layer contributions, logit lens, adapter spectra, CKA and rank-sweep separability."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import (
    ConfigError, DegenerateKernelError, PairingError, SampleSizeError, ShapeError, ValidationError,
)
from .linalg import cosine, cumulative_energy, log_softmax, svd, sym_eig
from .instrument import trace_batch
from .model import LoraConfig, head_logits
from .train import accuracy, attach_target, train

CONTRIB_FIELDS = ("ratio_attn", "ratio_mlp", "ratio_sum", "cos_attn", "cos_mlp", "cos_sum")


# ---------------------------------------------------------------- contribution

def _token_ratio(x, h):
    nx = np.linalg.norm(x, axis=-1)
    nh = np.linalg.norm(h, axis=-1)
    return np.divide(nx, nh, out=np.zeros_like(nx), where=nh > 0)


def _token_cosine(x, h):
    nx = np.linalg.norm(x, axis=-1)
    nh = np.linalg.norm(h, axis=-1)
    dot = np.einsum("...i,...i->...", x, h)
    denom = nx * nh
    c = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    return np.clip(c, -1.0, 1.0)


def layer_contributions(h, a, m):
    """Per-example means of the six token-level statistics for one layer.

    ``h``, ``a``, ``m`` have shape (batch, time, d). Returns a dict of
    (batch,) arrays.
    """
    s = a + m
    per_token = {
        "ratio_attn": _token_ratio(a, h), "ratio_mlp": _token_ratio(m, h), "ratio_sum": _token_ratio(s, h),
        "cos_attn": _token_cosine(a, h), "cos_mlp": _token_cosine(m, h), "cos_sum": _token_cosine(s, h),
    }
    return {k: v.mean(axis=1) for k, v in per_token.items()}


def _mode_stats(traces):
    num_layers = traces[0].num_layers
    out = {k: np.zeros(num_layers) for k in CONTRIB_FIELDS}
    for l in range(num_layers):
        per_ex = [layer_contributions(t.h[l], t.a[l], t.m[l]) for t in traces]
        for k in CONTRIB_FIELDS:
            out[k][l] = np.concatenate([p[k] for p in per_ex]).mean()
    return out


@dataclass
class ContributionReport:
    frozen: dict
    adapted: dict
    delta: dict
    samples: int

    @property
    def num_layers(self):
        return len(self.delta["ratio_attn"])

    def rows(self):
        header = ["layer"] + [f"{mode}_{k}" for mode in ("frozen", "adapted", "delta") for k in CONTRIB_FIELDS]
        rows = []
        for l in range(self.num_layers):
            rows.append([l] + [getattr(self, mode)[k][l] for mode in ("frozen", "adapted", "delta")
                               for k in CONTRIB_FIELDS])
        return header, rows

    def to_dict(self):
        return {"samples": self.samples,
                **{mode: {k: v.tolist() for k, v in getattr(self, mode).items()}
                   for mode in ("frozen", "adapted", "delta")}}


def contribution_probe(traces_frozen, traces_adapted) -> ContributionReport:
    """Sublayer-to-residual norm ratios and cosines, and their adapted - frozen deltas.

    Token statistics are averaged over time, then over examples.
    """
    traces_frozen, traces_adapted = list(traces_frozen), list(traces_adapted)
    if not traces_frozen or len(traces_frozen) != len(traces_adapted):
        raise PairingError("frozen and adapted trace sets must be non-empty and of equal size")
    for tf, ta in zip(traces_frozen, traces_adapted):
        if tf.batch_id != ta.batch_id or tf.h[0].shape != ta.h[0].shape or tf.num_layers != ta.num_layers:
            raise PairingError(f"traces {tf.batch_id!r} and {ta.batch_id!r} are not over the same inputs")
    fz, ad = _mode_stats(traces_frozen), _mode_stats(traces_adapted)
    delta = {k: ad[k] - fz[k] for k in CONTRIB_FIELDS}
    samples = sum(t.h[0].shape[0] for t in traces_frozen)
    return ContributionReport(fz, ad, delta, samples)


# ------------------------------------------------------------------ logit lens

def kl_divergence(p, q) -> float:
    """sum_c p(c) ln(p(c) / q(c)) with the 0 ln 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def lens_logits(params, h) -> np.ndarray:
    """Pool (batch, time, d) states and apply ln_f, projector and classifier."""
    for name in ("ln_f.g", "head.proj.W", "head.cls.W"):
        if name not in params:
            raise ConfigError(f"checkpoint lacks head weight {name!r}")
    P = {n: ag.Tensor(v) for n, v in params.items() if n.startswith("head.") or n.startswith("ln_f.")}
    return head_logits(ag.Tensor(np.asarray(h).mean(axis=1)), P).data


@dataclass
class LensReport:
    kl: np.ndarray
    overlap: np.ndarray
    samples: int
    kl_per_example: np.ndarray = field(repr=False, default=None)
    overlap_per_example: np.ndarray = field(repr=False, default=None)

    def rows(self):
        return ["layer", "kl", "overlap"], [[l, self.kl[l], self.overlap[l]] for l in range(len(self.kl))]

    def to_dict(self):
        return {"samples": self.samples, "kl": self.kl.tolist(), "overlap": self.overlap.tolist()}


def logit_lens(checkpoint, traces) -> LensReport:
    """Per-layer KL(pi_l || pi_L) and top-1 agreement with the final layer.

    Layer index ``l`` refers to the residual state ``h[l]``; index 0 is the
    embedding output and the last index is the final state.
    """
    traces = list(traces)
    if not traces:
        raise SampleSizeError("logit lens needs at least one trace")
    kls, overlaps = [], []
    for tr in traces:
        z = [lens_logits(checkpoint.params, h) for h in tr.h]
        logp = [log_softmax(zl) for zl in z]
        final_lp = logp[-1]
        final_arg = np.argmax(z[-1], axis=1)
        kl = np.stack([np.sum(np.exp(lp) * (lp - final_lp), axis=1) for lp in logp])
        kls.append(np.maximum(kl, 0.0))  # rounding can leave -1e-17 where pi_l ~ pi_L
        overlaps.append(np.stack([(np.argmax(zl, axis=1) == final_arg).astype(np.float64) for zl in z]))
    kl = np.concatenate(kls, axis=1)
    ov = np.concatenate(overlaps, axis=1)
    return LensReport(kl.mean(axis=1), ov.mean(axis=1), kl.shape[1], kl, ov)


# ------------------------------------------------------------------- spectra

def k90(sigma, level=0.9) -> float:
    """Fractional count of leading singular values holding ``level`` of the energy.

    Linear interpolation in cumulative energy between ``e[k-1]`` and ``e[k]``
    (with ``e[0] = 0``) for the first ``k`` where ``e[k] >= level``.
    """
    e = cumulative_energy(sigma)
    k = int(np.argmax(e >= level)) + 1
    prev = 0.0 if k == 1 else e[k - 2]
    return (k - 1) + (level - prev) / (e[k - 1] - prev)


@dataclass
class SpectrumReport:
    label: str
    sigma: dict
    energy: dict
    k90: dict
    mean_sigma: np.ndarray
    mean_energy: np.ndarray
    mean_k90: float

    def to_dict(self):
        return {
            "label": self.label,
            "mean_k90": self.mean_k90,
            "mean_sigma": self.mean_sigma.tolist(),
            "per_adapter_k90": {_key(k): v for k, v in self.k90.items()},
        }


def _key(k):
    return k if isinstance(k, str) else ".".join(str(p) for p in k)


def spectrum_analysis(matrices: dict, label: str) -> SpectrumReport:
    """SVD spectrum, cumulative energy and k90 per matrix plus the mean spectrum."""
    if not matrices:
        raise SampleSizeError("spectrum analysis needs at least one matrix")
    shapes = {np.shape(m) for m in matrices.values()}
    if len(shapes) != 1:
        raise ShapeError(f"matrices of one source must share a shape, got {sorted(shapes)}")
    sig, en, k = {}, {}, {}
    for key, m in matrices.items():
        s = svd(m).sigma
        sig[key] = s
        en[key] = cumulative_energy(s)
        k[key] = k90(s)
    mean_sigma = np.mean(np.stack(list(sig.values())), axis=0)
    return SpectrumReport(label, sig, en, k, mean_sigma, cumulative_energy(mean_sigma), k90(mean_sigma))


def efficiency_ratio(untrained: SpectrumReport, trained: SpectrumReport) -> float:
    """k90(untrained) / k90(trained) of the mean spectra; > 1 means training concentrated energy."""
    return untrained.mean_k90 / trained.mean_k90


# ------------------------------------------------------------------------ CKA

def _centered(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (samples x features)")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite entries")
    return x - x.mean(axis=0, keepdims=True)


def hsic(k, l) -> float:
    """Biased HSIC tr(K H L H) / (n - 1)^2 of two n x n kernel matrices."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    n = k.shape[0]
    if k.shape != (n, n) or l.shape != (n, n):
        raise ShapeError("HSIC needs two square kernel matrices of equal size")
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.trace(k @ h @ l @ h)) / (n - 1) ** 2


def cka(x, y) -> float:
    """Linear-kernel CKA between (n x p) and (n x q) representations.

    Uses the identity tr(K H L H) = ||Yc^T Xc||_F^2 for K = X X^T, L = Y Y^T
    and column-centred Xc, Yc, which avoids forming n x n kernels.
    """
    xc, yc = _centered(x, "x"), _centered(y, "y")
    n = xc.shape[0]
    if yc.shape[0] != n:
        raise ShapeError(f"CKA inputs need the same sample count, got {n} and {yc.shape[0]}")
    if n < 3:
        raise SampleSizeError("CKA needs at least 3 samples")
    scale = 1.0 / (n - 1) ** 2
    xy = np.sum((yc.T @ xc) ** 2) * scale
    xx = np.sum((xc.T @ xc) ** 2) * scale
    yy = np.sum((yc.T @ yc) ** 2) * scale
    if xx == 0.0 or yy == 0.0:
        raise DegenerateKernelError("CKA input has zero variance")
    return float(min(xy / np.sqrt(xx * yy), 1.0))


@dataclass
class CkaRow:
    layer: int
    target: str
    activation_cka: float
    gradient_cka: float
    gradient_cosine: float


def gradient_similarity(grad_a, grad_b):
    """(CKA over steps, signed cosine of mean gradients) for stacked adapter gradients.

    ``grad_a`` is (steps, r, d) and ``grad_b`` is (steps, d, r). The cosine
    compares mean grad_A with the transposed mean grad_B so that entries
    pair up by (rank index, feature index).
    """
    grad_a = np.asarray(grad_a, dtype=np.float64)
    grad_b = np.asarray(grad_b, dtype=np.float64)
    steps = grad_a.shape[0]
    if steps < 3 or grad_b.shape[0] != steps:
        raise SampleSizeError(f"gradient CKA needs >= 3 paired steps, got {steps}")
    g_cka = cka(grad_a.reshape(steps, -1), grad_b.reshape(steps, -1))
    g_cos = cosine(grad_a.mean(axis=0), grad_b.mean(axis=0).T)
    return g_cka, g_cos


def cka_dynamics(grad_log, trace=None, adapters=None) -> list:
    """One ``CkaRow`` per adapter: forward CKA(act_A, act_B) and backward similarities."""
    keys = adapters if adapters is not None else grad_log.adapters()
    if len(grad_log) < 3:
        raise SampleSizeError(f"gradient log has {len(grad_log)} steps; need >= 3")
    rows = []
    for key in keys:
        g_cka, g_cos = gradient_similarity(*grad_log.stacked(key))
        act = float("nan")
        if trace is not None:
            act = cka(trace.act_a[key], trace.act_b[key])
        rows.append(CkaRow(key[0], key[1], act, g_cka, g_cos))
    return rows


# ------------------------------------------------------------------ rank sweep

def scatter_matrices(x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    mu = x.mean(axis=0)
    p = x.shape[1]
    s_w = np.zeros((p, p))
    s_b = np.zeros((p, p))
    for c in classes:
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        d = xc - mc
        s_w += d.T @ d
        s_b += len(xc) * np.outer(mc - mu, mc - mu)
    return s_w, s_b


def fisher_separability(x, labels, ridge=1e-6):
    """tr(S_W^-1 S_B); returns ``(J, ridged)``.

    A ridge of ``ridge * I`` is added when S_W is numerically singular.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise SampleSizeError("Fisher separability needs at least two classes in the sample")
    s_w, s_b = scatter_matrices(x, labels)
    vals, _ = sym_eig(s_w)
    ridged = bool(vals[-1] <= 1e-12 * max(vals[0], np.finfo(np.float64).tiny))
    if ridged:
        s_w = s_w + ridge * np.eye(s_w.shape[0])
    return float(np.trace(np.linalg.solve(s_w, s_b))), ridged


def layer_separability(trace, labels):
    """Fisher J of time-pooled residual states ``h[l]`` for every layer index."""
    return [fisher_separability(h.mean(axis=1), labels) for h in trace.h]


@dataclass
class RankSweepRow:
    rank: int
    layer: int
    separability: float
    ridged: bool
    accuracy: float


def rank_sweep(backbone, train_set, eval_sample, ranks, optim, steps, seed, dropout=0.1) -> list:
    """Adapt one backbone at several LoRA ranks under an identical seed and schedule.

    Each rank's adapted model is traced on ``eval_sample`` and scored with
    per-layer Fisher separability of the time-pooled residual states.
    """
    ranks = list(ranks)
    if len(ranks) < 2:
        raise ValidationError("rank sweep needs at least two rank values")
    if len(np.unique(eval_sample.labels)) < 2:
        raise SampleSizeError("evaluation sample must contain at least two classes")
    rows = []
    for r in ranks:
        lora = LoraConfig(rank=int(r), dropout=dropout)
        start = attach_target(backbone, lora, train_set.num_classes, seed)
        ckpt, _, _ = train(start, train_set, optim, steps, seed, mode="adapted")
        acc = accuracy(ckpt, eval_sample, "adapted")
        tr = trace_batch(ckpt, eval_sample.data, "adapted", batch_id="rank_sweep")
        for l, (j, ridged) in enumerate(layer_separability(tr, eval_sample.labels)):
            rows.append(RankSweepRow(int(r), l, j, ridged, acc))
    return rows
