import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, tiny_checkpoint
from loralens.analysis import (
    CONTRIB_FIELDS, cka, cka_dynamics, contribution_probe, efficiency_ratio, fisher_separability,
    gradient_similarity, hsic, k90, kl_divergence, lens_logits, logit_lens, rank_sweep, scatter_matrices,
    spectrum_analysis,
)
from loralens.data import SeqBatch
from loralens.errors import (
    ConfigError, DegenerateKernelError, EmptySpectrumError, PairingError, SampleSizeError, ShapeError,
    ValidationError,
)
from loralens.instrument import GradientLog, TraceRecord, trace_batch
from loralens.rng import SplitMix64
from loralens.train import OptimConfig

R2 = np.sqrt(2.0)


def two_token_trace(mode="frozen", batch_id="x"):
    h0 = np.array([[[3.0, 4.0], [1.0, 0.0]]])
    a = np.array([[[0.0, 4.0], [1.0, 1.0]]])
    m = np.array([[[3.0, 0.0], [0.0, -2.0]]])
    return TraceRecord([h0, h0 + a + m], [a], [m], mode, batch_id=batch_id)


def double_sum_hsic(x, y):
    """HSIC by explicit sums over centred kernel entries, no matrix products."""
    n = x.shape[0]
    k = np.array([[float(np.dot(x[i], x[j])) for j in range(n)] for i in range(n)])
    l = np.array([[float(np.dot(y[i], y[j])) for j in range(n)] for i in range(n)])

    def centre(g):
        row = [sum(g[i, j] for j in range(n)) / n for i in range(n)]
        col = [sum(g[i, j] for i in range(n)) / n for j in range(n)]
        tot = sum(row) / n
        return np.array([[g[i, j] - row[i] - col[j] + tot for j in range(n)] for i in range(n)])

    kc, lc = centre(k), centre(l)
    return sum(kc[i, j] * lc[i, j] for i in range(n) for j in range(n)) / (n - 1) ** 2


def double_sum_cka(x, y):
    return double_sum_hsic(x, y) / np.sqrt(double_sum_hsic(x, x) * double_sum_hsic(y, y))


# --------------------------------------------------------------- contribution

def test_contribution_hand_oracle():
    rep = contribution_probe([two_token_trace()], [two_token_trace("adapted")])
    # token 1: h=(3,4), a=(0,4), m=(3,0), a+m=h; token 2: h=(1,0), a=(1,1), m=(0,-2)
    expected = {
        "ratio_attn": (0.8 + R2) / 2, "ratio_mlp": (0.6 + 2.0) / 2, "ratio_sum": (1.0 + R2) / 2,
        "cos_attn": (0.8 + 1 / R2) / 2, "cos_mlp": (0.6 + 0.0) / 2, "cos_sum": (1.0 + 1 / R2) / 2,
    }
    for k, v in expected.items():
        assert abs(rep.frozen[k][0] - v) <= 1e-12
        assert rep.delta[k][0] == 0.0
    assert rep.samples == 1


def test_contribution_aligned_case():
    h = np.random.default_rng(0).normal(size=(2, 3, 4))
    tr = TraceRecord([h, 2 * h], [h], [np.zeros_like(h)], "frozen")
    rep = contribution_probe([tr], [tr])
    assert abs(rep.frozen["ratio_attn"][0] - 1.0) <= 1e-12
    assert abs(rep.frozen["cos_attn"][0] - 1.0) <= 1e-12
    assert rep.frozen["cos_mlp"][0] == 0.0


def test_contribution_self_difference(tiny_batch):
    tr = trace_batch(tiny_checkpoint(seed=1), tiny_batch, "frozen")
    rep = contribution_probe([tr, tr], [tr, tr])
    for k in CONTRIB_FIELDS:
        assert np.all(rep.delta[k] == 0.0)
    assert np.all(rep.frozen["ratio_sum"] >= 0)
    assert np.all(np.abs(rep.frozen["cos_sum"]) <= 1)


def test_contribution_delta_is_difference(tiny_batch):
    ck = tiny_checkpoint(seed=1, random_b=True)
    rep = contribution_probe([trace_batch(ck, tiny_batch, "frozen")], [trace_batch(ck, tiny_batch, "adapted")])
    for k in CONTRIB_FIELDS:
        assert np.max(np.abs(rep.delta[k] - (rep.adapted[k] - rep.frozen[k]))) <= 1e-12
    header, rows = rep.rows()
    assert len(header) == 1 + 3 * len(CONTRIB_FIELDS) and len(rows) == TINY.num_layers


def test_contribution_pairing_errors():
    with pytest.raises(PairingError):
        contribution_probe([two_token_trace()], [])
    with pytest.raises(PairingError):
        contribution_probe([two_token_trace(batch_id="a")], [two_token_trace(batch_id="b")])


# ------------------------------------------------------------------ logit lens

def test_kl_hand_case():
    kl = kl_divergence([0.9, 0.1], [0.5, 0.5])
    assert abs(kl - (0.9 * np.log(1.8) + 0.1 * np.log(0.2))) <= 1e-15
    assert abs(kl - 0.368) <= 1e-3
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6).flatmap(
    lambda p: st.tuples(st.just(p), st.lists(st.floats(0.01, 10), min_size=len(p), max_size=len(p)))))
def test_kl_non_negative(pq):
    p, q = (np.array(v) / np.sum(v) for v in pq)
    assert kl_divergence(p, q) >= -1e-15


def test_logit_lens_contract(tiny_batch):
    ck = tiny_checkpoint(seed=2, random_b=True)
    tr = trace_batch(ck, tiny_batch, "adapted")
    rep = logit_lens(ck, [tr, tr])
    assert len(rep.kl) == TINY.num_layers + 1
    assert np.all(rep.kl_per_example[-1] == 0.0) and np.all(rep.overlap_per_example[-1] == 1.0)
    assert np.all(rep.kl_per_example >= 0.0)
    assert np.all((rep.overlap >= 0) & (rep.overlap <= 1))
    assert rep.samples == 2 * len(tiny_batch)


def test_lens_final_layer_matches_model_logits(tiny_batch):
    ck = tiny_checkpoint(seed=2, random_b=True)
    tr = trace_batch(ck, tiny_batch, "adapted")
    assert np.allclose(lens_logits(ck.params, tr.h[-1]), tr.logits, atol=1e-12)


def test_overlap_and_kl_are_independent(tiny_batch):
    ck = tiny_checkpoint(seed=2)
    tr = trace_batch(ck, tiny_batch, "frozen")
    final = tr.h[-1]
    z = lens_logits(ck.params, final)
    nudged = final + 0.01 * SplitMix64(0).normal(final.shape)
    z2 = lens_logits(ck.params, nudged)
    assert np.array_equal(np.argmax(z, 1), np.argmax(z2, 1))
    rep = logit_lens(ck, [TraceRecord([nudged, final], [final * 0], [final * 0], "frozen")])
    assert rep.overlap[0] == 1.0 and rep.kl[0] > 0.0


def test_lens_needs_head():
    ck = tiny_checkpoint(seed=0)
    params = {n: v for n, v in ck.params.items() if not n.startswith("head.")}
    with pytest.raises(ConfigError):
        lens_logits(params, np.zeros((1, 2, TINY.model_dim)))


# --------------------------------------------------------------------- spectra

def test_k90_analytic():
    assert abs(k90([1.0, 0.0, 0.0, 0.0]) - 0.9) <= 1e-12
    assert abs(k90([3.0, 2.0, 1.0]) - 1.9) <= 1e-9
    assert abs(k90(np.ones(10)) - 9.0) <= 1e-12


@pytest.mark.parametrize("tail", [[0.5, 0.5, 0.5], [2.0, 1.0, 0.1], [1.0, 1.0, 1.0, 1.0, 1.0]])
def test_k90_decreases_as_top_value_grows(tail):
    prev = np.inf
    for top in np.linspace(max(tail), 10 * max(tail), 12):
        value = k90([top] + tail)
        assert value < prev
        prev = value


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=20))
def test_k90_consistent_with_energy(vals):
    sigma = np.sort(vals)[::-1]
    if not np.any(sigma * sigma > 0):
        return
    k = k90(sigma)
    assert 0 < k <= len(sigma)
    e = np.concatenate([[0.0], np.cumsum(sigma ** 2) / np.sum(sigma ** 2)])
    lo = int(np.ceil(k)) - 1
    assert e[lo] <= 0.9 + 1e-12 and e[lo + 1] >= 0.9 - 1e-12


def test_spectrum_analysis_and_ratio(rng):
    mats = {(l, "query"): rng.normal(size=(20, 4)) for l in range(3)}
    rep = spectrum_analysis(mats, "act_A")
    assert set(rep.k90) == set(mats)
    assert np.allclose(rep.mean_sigma, np.mean([rep.sigma[k] for k in mats], axis=0))
    assert efficiency_ratio(rep, spectrum_analysis(mats, "act_A")) == 1.0
    low = {k: np.outer(rng.normal(size=20), rng.normal(size=4)) + 1e-3 * v for k, v in mats.items()}
    assert efficiency_ratio(rep, spectrum_analysis(low, "act_A")) > 1.0


def test_spectrum_errors():
    with pytest.raises(EmptySpectrumError):
        spectrum_analysis({"a": np.zeros((3, 2))}, "x")
    with pytest.raises(ShapeError):
        spectrum_analysis({"a": np.ones((3, 2)), "b": np.ones((2, 2))}, "x")


# ------------------------------------------------------------------------- CKA

def test_cka_self_and_double_sum(rng):
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 5))
    assert abs(cka(x, x) - 1.0) <= 1e-12
    assert abs(cka(x, y) - double_sum_cka(x, y)) <= 1e-10
    k, l = x @ x.T, y @ y.T
    assert abs(hsic(k, l) - double_sum_hsic(x, y)) <= 1e-10


def test_cka_invariances(rng):
    x, y = rng.normal(size=(12, 4)), rng.normal(size=(12, 6))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert abs(cka(x @ q, x) - 1.0) <= 1e-9
    assert abs(cka(-3.5 * x, x) - 1.0) <= 1e-9
    assert abs(cka(x @ q, y) - cka(x, y)) <= 1e-9
    assert abs(cka(x, y) - cka(y, x)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_cka_range_property(n, p, q, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(n, p)), r.normal(size=(n, q))
    v = cka(x, y)
    assert -1e-9 <= v <= 1.0
    assert abs(v - cka(y, x)) <= 1e-12


def test_cka_errors():
    with pytest.raises(DegenerateKernelError):
        cka(np.ones((5, 2)), np.arange(10.0).reshape(5, 2))
    with pytest.raises(SampleSizeError):
        cka(np.eye(2), np.eye(2))
    with pytest.raises(ShapeError):
        cka(np.ones((4, 2)), np.ones((5, 2)))


def test_gradient_similarity_copy_and_antipode(rng):
    g = rng.normal(size=(5, 2, 6))
    c, _ = gradient_similarity(g, g.copy())
    assert abs(c - 1.0) <= 1e-12
    gb = -np.transpose(g, (0, 2, 1))
    _, cos = gradient_similarity(g, gb)
    assert abs(cos + 1.0) <= 1e-12


def test_gradient_dynamics_three_step_hand_log():
    log = GradientLog()
    ga = [np.array([[1.0, 0.0, 2.0]]), np.array([[0.0, 1.0, 1.0]]), np.array([[2.0, 2.0, 0.0]])]
    gb = [np.array([[1.0], [1.0], [0.0]]), np.array([[0.0], [3.0], [1.0]]), np.array([[1.0], [0.0], [2.0]])]
    for t in range(3):
        log.record(t + 1, 1.0, {"lora.0.value.A": ga[t], "lora.0.value.B": gb[t]})
    (row,) = cka_dynamics(log)
    x = np.stack([g.ravel() for g in ga])
    y = np.stack([g.ravel() for g in gb])
    assert (row.layer, row.target) == (0, "value")
    assert abs(row.gradient_cka - double_sum_cka(x, y)) <= 1e-10
    mean_a, mean_b = x.mean(0), y.mean(0)
    assert abs(row.gradient_cosine - mean_a @ mean_b / np.linalg.norm(mean_a) / np.linalg.norm(mean_b)) <= 1e-12
    assert np.isnan(row.activation_cka)


def test_gradient_dynamics_needs_three_steps():
    log = GradientLog()
    for t in range(2):
        log.record(t + 1, 1.0, {"lora.0.value.A": np.ones((1, 2)) * t, "lora.0.value.B": np.ones((2, 1))})
    with pytest.raises(SampleSizeError):
        cka_dynamics(log)


# --------------------------------------------------------- Fisher separability

def brute_scatter(x, labels):
    p = x.shape[1]
    mu = [sum(x[i, f] for i in range(len(x))) / len(x) for f in range(p)]
    s_w, s_b = np.zeros((p, p)), np.zeros((p, p))
    for c in sorted(set(labels.tolist())):
        rows = [i for i in range(len(x)) if labels[i] == c]
        mc = [sum(x[i, f] for i in rows) / len(rows) for f in range(p)]
        for i in rows:
            for a in range(p):
                for b in range(p):
                    s_w[a, b] += (x[i, a] - mc[a]) * (x[i, b] - mc[b])
        for a in range(p):
            for b in range(p):
                s_b[a, b] += len(rows) * (mc[a] - mu[a]) * (mc[b] - mu[b])
    return s_w, s_b


def clouds(sep, rng, n=30):
    labels = np.repeat([0, 1], n)
    x = rng.normal(size=(2 * n, 3))
    x[labels == 1, 0] += sep
    return x, labels


def test_fisher_separated_beats_overlapping(rng):
    far, near = clouds(6.0, rng), clouds(0.3, rng)
    for x, labels in (far, near):
        s_w, s_b = scatter_matrices(x, labels)
        bw, bb = brute_scatter(x, labels)
        assert np.allclose(s_w, bw, atol=1e-10) and np.allclose(s_b, bb, atol=1e-10)
    j_far, r1 = fisher_separability(*far)
    j_near, r2 = fisher_separability(*near)
    bw, bb = brute_scatter(*far)
    assert abs(j_far - np.trace(np.linalg.inv(bw) @ bb)) <= 1e-9 * j_far
    assert j_far > j_near and not (r1 or r2)


def test_fisher_ridge_flag(rng):
    x = rng.normal(size=(4, 6))
    j, ridged = fisher_separability(x, np.array([0, 0, 1, 1]))
    assert ridged and np.isfinite(j)


def test_fisher_one_class():
    with pytest.raises(SampleSizeError):
        fisher_separability(np.ones((4, 2)), np.zeros(4))


def _sweep_data():
    r = SplitMix64(5)
    x = r.normal((16, TINY.seq_len, TINY.input_dim))
    labels = np.arange(16) % 4
    x[:, :, 1] += labels[:, None]
    return SeqBatch(x, labels, 4)


def test_rank_sweep_deterministic():
    backbone = tiny_checkpoint(seed=0, lora=None)
    data = _sweep_data()
    args = (backbone, data, data, [1, 2], OptimConfig(batch_size=8), 4, 3)
    a, b = rank_sweep(*args), rank_sweep(*args)
    assert a == b
    assert len(a) == 2 * (TINY.num_layers + 1)
    assert {r.rank for r in a} == {1, 2}


def test_rank_sweep_guards():
    backbone = tiny_checkpoint(seed=0, lora=None)
    data = _sweep_data()
    with pytest.raises(ValidationError):
        rank_sweep(backbone, data, data, [2], OptimConfig(), 2, 0)
    one_class = data.subset(np.flatnonzero(data.labels == 0))
    with pytest.raises(SampleSizeError):
        rank_sweep(backbone, data, one_class, [1, 2], OptimConfig(), 2, 0)
