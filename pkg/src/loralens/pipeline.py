"""File-level stages behind the CLI: pretrain, adapt, trace, analyze, report.

Every stage reads and writes files only, so stages can run as separate
processes. ``run_all`` chains them into one output directory.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from . import analysis as an
from . import lltd
from .config import RunConfig
from .data import SeqBatch, balanced_sample, generate, load_external, source_spec, split, target_spec
from .errors import ConfigError
from .instrument import GradientLog, TraceRecord, trace_batch
from .model import init_adapters, init_head, is_backbone, loss_and_grads
from .train import Checkpoint, accuracy, attach_target, pretrain_backbone, train

log = logging.getLogger(__name__)

ANALYSES = ("contribution", "lens", "svd", "cka", "ranksweep")
SVD_SOURCES = ("act_A", "act_B", "grad_A", "grad_B", "weight_A", "weight_B")
FIGURE_FILES = (
    "fig2a_contribution_delta.csv", "fig2b_cosine_delta.csv",
    "fig3a_svd_actA.csv", "fig3b_svd_gradA.csv", "fig3c_svd_actB.csv", "fig3d_svd_gradB.csv",
    "fig3e_cka_activations.csv", "fig3f_cka_gradients.csv",
    "lens_curves.csv", "ranksweep_separability.csv",
)


# ----------------------------------------------------------------- file output

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    lltd.write_text(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(out_dir, name, header, rows, payload):
    out_dir = Path(out_dir)
    write_csv(out_dir / f"{name}.csv", header, rows)
    lltd.write_json(out_dir / f"{name}.json", _jsonable(payload))


# -------------------------------------------------------------------- datasets

def datasets(cfg: RunConfig) -> dict:
    m = cfg.model
    common = {"seq_len": m.seq_len, "input_dim": m.input_dim}
    src = generate(source_spec(seed=cfg.source.seed, noise_sigma=cfg.source.noise_sigma,
                               distractor_scale=cfg.source.distractor_scale, **common),
                   cfg.source.n_per_class)
    tgt = generate(target_spec(seed=cfg.target.seed, noise_sigma=cfg.target.noise_sigma,
                               distractor_scale=cfg.target.distractor_scale, **common),
                   cfg.target.n_per_class)
    tr, ev = split(tgt, cfg.train_fraction, cfg.split_seed)
    sample = balanced_sample(ev, cfg.analysis.sample_per_class, cfg.analysis.sample_seed)
    return {"source": src, "train": tr, "eval": ev, "sample": sample}


def _sample(cfg, dataset_path=None) -> SeqBatch:
    if dataset_path is not None:
        return load_external(dataset_path)
    return datasets(cfg)["sample"]


# ---------------------------------------------------------------------- stages

def run_pretrain(cfg: RunConfig, out_path, seed=None):
    seed = cfg.pretrain.seed if seed is None else seed
    data = datasets(cfg)
    ckpt, curve = pretrain_backbone(cfg.model, data["source"], cfg.pretrain.steps, seed, cfg.optim)
    ckpt.meta["loss_first"] = curve[0]
    ckpt.meta["loss_last"] = curve[-1]
    out_path = Path(out_path)
    ckpt.save(out_path)
    write_csv(out_path.with_name(out_path.stem + "_loss.csv"), ["step", "loss"],
              [[i + 1, v] for i, v in enumerate(curve)])
    return ckpt, curve


def run_adapt(cfg: RunConfig, backbone_path, out_dir, mode="adapted", seed=None, rank=None):
    """Train the target head (``frozen``) or head + LoRA adapters (``adapted``)."""
    if mode not in ("frozen", "adapted"):
        raise ConfigError(f"adapt mode must be frozen or adapted, got {mode!r}")
    seed = cfg.adapt.seed if seed is None else seed
    if rank is not None:
        cfg = cfg.replace(**{"lora.rank": int(rank)})
    backbone = Checkpoint.load(backbone_path)
    if backbone.model_config != cfg.model:
        raise ConfigError("backbone model config does not match the run config")
    data = datasets(cfg)
    start = attach_target(backbone, cfg.lora if mode == "adapted" else None,
                          data["train"].num_classes, cfg.init_seed)
    ckpt, curve, grads = train(start, data["train"], cfg.optim, cfg.adapt.steps, seed, mode=mode,
                               capture=mode == "adapted", log_every=cfg.adapt.log_every)
    ckpt.meta["train_accuracy"] = accuracy(ckpt, data["train"], mode)
    ckpt.meta["eval_accuracy"] = accuracy(ckpt, data["eval"], mode)
    out_dir = Path(out_dir)
    ckpt.save(out_dir / f"{mode}.lltd")
    write_csv(out_dir / f"{mode}_loss.csv", ["step", "loss"], [[i + 1, v] for i, v in enumerate(curve)])
    if grads is not None:
        grads.save(out_dir / "gradients.lltd")
    log.info("%s: train acc %.3f eval acc %.3f", mode, ckpt.meta["train_accuracy"], ckpt.meta["eval_accuracy"])
    return ckpt, curve, grads


def run_trace(cfg: RunConfig, checkpoint_path, mode, out_path, dataset_path=None):
    ckpt = Checkpoint.load(checkpoint_path)
    sample = _sample(cfg, dataset_path)
    rec = trace_batch(ckpt, sample.data, mode, batch_id="analysis_sample")
    rec.save(out_path)
    return rec


# ------------------------------------------------------------------- analyses

def analyze_contribution(frozen_trace_path, adapted_trace_path, out_dir):
    rep = an.contribution_probe([TraceRecord.load(frozen_trace_path)], [TraceRecord.load(adapted_trace_path)])
    header, rows = rep.rows()
    write_report(out_dir, "contribution", header, rows, rep.to_dict())
    return rep


def analyze_lens(checkpoint_path, trace_path, out_dir):
    ckpt = Checkpoint.load(checkpoint_path)
    tr = TraceRecord.load(trace_path)
    rep = an.logit_lens(ckpt, [tr])
    header, rows = rep.rows()
    write_report(out_dir, f"lens_{tr.mode}", header, rows, {"mode": tr.mode, **rep.to_dict()})
    return rep


def untrained_counterpart(ckpt: Checkpoint) -> Checkpoint:
    """Same backbone, freshly initialised head and adapters with a random B factor."""
    cfg = ckpt.model_config
    params = {n: v for n, v in ckpt.params.items() if is_backbone(n)}
    params.update(init_head(cfg, ckpt.seed, num_classes=ckpt.num_classes))
    params.update(init_adapters(cfg, ckpt.lora_config, ckpt.seed, random_b=True))
    return Checkpoint(cfg, params, ckpt.lora_config, ckpt.seed, {"task": "untrained_reference"})


def svd_sources(ckpt: Checkpoint, sample: SeqBatch) -> dict:
    """Matrices per source tag, keyed by adapter (layer, target)."""
    rec = trace_batch(ckpt, sample.data, "adapted")
    _, grads = loss_and_grads(ckpt.params, ckpt.model_config, sample.data, sample.labels,
                              ckpt.lora_config, "adapted")

    def pick(store, which):
        out = {}
        for name, v in store.items():
            if name.startswith("lora.") and name.endswith("." + which):
                _, l, t, _ = name.split(".")
                out[(int(l), t)] = v
        return out

    return {
        "act_A": rec.act_a, "act_B": rec.act_b,
        "grad_A": pick(grads, "A"), "grad_B": pick(grads, "B"),
        "weight_A": pick(ckpt.params, "A"), "weight_B": pick(ckpt.params, "B"),
    }


def svd_analysis(ckpt: Checkpoint, sample: SeqBatch) -> dict:
    trained = svd_sources(ckpt, sample)
    untrained = svd_sources(untrained_counterpart(ckpt), sample)
    out = {}
    for src in SVD_SOURCES:
        rt = an.spectrum_analysis(trained[src], f"{src}/trained")
        ru = an.spectrum_analysis(untrained[src], f"{src}/untrained")
        out[src] = {"trained": rt, "untrained": ru, "efficiency_ratio": an.efficiency_ratio(ru, rt)}
    return out


def analyze_svd(cfg: RunConfig, checkpoint_path, out_dir, dataset_path=None):
    ckpt = Checkpoint.load(checkpoint_path)
    if not ckpt.has_adapters:
        raise ConfigError("SVD analysis needs an adapted checkpoint")
    res = svd_analysis(ckpt, _sample(cfg, dataset_path))
    rows = []
    for src, r in res.items():
        for state in ("trained", "untrained"):
            rep = r[state]
            for key in sorted(rep.sigma):
                for i, (s, e) in enumerate(zip(rep.sigma[key], rep.energy[key])):
                    rows.append([src, state, an._key(key), i + 1, s, e])
            for i, (s, e) in enumerate(zip(rep.mean_sigma, rep.mean_energy)):
                rows.append([src, state, "mean", i + 1, s, e])
    payload = {src: {"trained": r["trained"].to_dict(), "untrained": r["untrained"].to_dict(),
                     "mean_energy_trained": r["trained"].mean_energy,
                     "mean_energy_untrained": r["untrained"].mean_energy,
                     "efficiency_ratio": r["efficiency_ratio"]}
               for src, r in res.items()}
    write_report(out_dir, "svd", ["source", "state", "adapter", "index", "sigma", "cumulative_energy"],
                 rows, payload)
    return res


def analyze_cka(trace_path, gradients_path, out_dir):
    tr = TraceRecord.load(trace_path)
    if tr.mode != "adapted":
        raise ConfigError("CKA analysis needs an adapted-mode trace")
    glog = GradientLog.load(gradients_path)
    rows = an.cka_dynamics(glog, tr)
    header = ["layer", "target", "activation_cka", "gradient_cka", "gradient_cosine"]
    table = [[r.layer, r.target, r.activation_cka, r.gradient_cka, r.gradient_cosine] for r in rows]
    payload = {"steps_logged": len(glog), "rows": [dict(zip(header, t)) for t in table]}
    write_report(out_dir, "cka", header, table, payload)
    return rows


def analyze_ranksweep(cfg: RunConfig, backbone_path, out_dir, seed=None):
    backbone = Checkpoint.load(backbone_path)
    data = datasets(cfg)
    seed = cfg.adapt.seed if seed is None else seed
    rows = an.rank_sweep(backbone, data["train"], data["sample"], cfg.analysis.ranks, cfg.optim,
                         cfg.analysis.rank_steps, seed, dropout=cfg.lora.dropout)
    header = ["rank", "layer", "separability", "ridged", "accuracy"]
    table = [[r.rank, r.layer, r.separability, r.ridged, r.accuracy] for r in rows]
    write_report(out_dir, "ranksweep", header, table, {"rows": [dict(zip(header, t)) for t in table]})
    return rows


# --------------------------------------------------------------------- report

def _optional_json(path):
    path = Path(path)
    return json.loads(path.read_text()) if path.exists() else None


def _report_contribution(out, summary):
    contrib = _optional_json(out / "contribution.json")
    if contrib is None:
        return False
    d = contrib["delta"]
    layers = range(len(d["ratio_attn"]))
    write_csv(out / "fig2a_contribution_delta.csv", ["layer", "attn", "mlp", "attn_plus_mlp"],
              [[l, d["ratio_attn"][l], d["ratio_mlp"][l], d["ratio_sum"][l]] for l in layers])
    write_csv(out / "fig2b_cosine_delta.csv", ["layer", "attn", "mlp", "attn_plus_mlp"],
              [[l, d["cos_attn"][l], d["cos_mlp"][l], d["cos_sum"][l]] for l in layers])
    summary["contribution"] = {"delta_ratio_sum": d["ratio_sum"], "delta_cos_sum": d["cos_sum"]}
    return True


def _report_lens(out, summary):
    lens = {m: _optional_json(out / f"lens_{m}.json") for m in ("frozen", "adapted")}
    lens = {m: v for m, v in lens.items() if v is not None}
    if not lens:
        return False
    modes = list(lens)
    n = len(lens[modes[0]]["kl"])
    header = ["layer"] + [f"{k}_{m}" for m in modes for k in ("kl", "overlap")]
    write_csv(out / "lens_curves.csv", header,
              [[l] + [lens[m][k][l] for m in modes for k in ("kl", "overlap")] for l in range(n)])
    summary["lens"] = {m: {"kl": lens[m]["kl"], "overlap": lens[m]["overlap"]} for m in modes}
    return True


def _report_svd(out, summary):
    svd_res = _optional_json(out / "svd.json")
    if svd_res is None:
        return False
    for fname, src in (("fig3a_svd_actA.csv", "act_A"), ("fig3b_svd_gradA.csv", "grad_A"),
                       ("fig3c_svd_actB.csv", "act_B"), ("fig3d_svd_gradB.csv", "grad_B")):
        r = svd_res[src]
        st, su = r["trained"]["mean_sigma"], r["untrained"]["mean_sigma"]
        et, eu = r["mean_energy_trained"], r["mean_energy_untrained"]
        write_csv(out / fname, ["index", "sigma_trained", "energy_trained", "sigma_untrained", "energy_untrained"],
                  [[i + 1, st[i], et[i], su[i], eu[i]] for i in range(len(st))])
    summary["svd"] = {src: {"k90_trained": r["trained"]["mean_k90"], "k90_untrained": r["untrained"]["mean_k90"],
                            "efficiency_ratio": r["efficiency_ratio"]} for src, r in svd_res.items()}
    return True


def _report_cka(out, summary):
    cka_res = _optional_json(out / "cka.json")
    if cka_res is None:
        return False
    rows = cka_res["rows"]
    write_csv(out / "fig3e_cka_activations.csv", ["layer", "target", "cka"],
              [[r["layer"], r["target"], r["activation_cka"]] for r in rows])
    write_csv(out / "fig3f_cka_gradients.csv", ["layer", "target", "cka", "signed_cosine"],
              [[r["layer"], r["target"], r["gradient_cka"], r["gradient_cosine"]] for r in rows])
    summary["cka"] = {
        "activation_cka_min": min(r["activation_cka"] for r in rows),
        "activation_cka_mean": float(np.mean([r["activation_cka"] for r in rows])),
        "gradient_cka_mean": float(np.mean([r["gradient_cka"] for r in rows])),
        "gradient_cosine_range": [min(r["gradient_cosine"] for r in rows),
                                  max(r["gradient_cosine"] for r in rows)],
    }
    return True


def _report_ranksweep(out, summary):
    sweep = _optional_json(out / "ranksweep.json")
    if sweep is None:
        return False
    rows = sweep["rows"]
    write_csv(out / "ranksweep_separability.csv", ["rank", "layer", "separability", "ridged"],
              [[r["rank"], r["layer"], r["separability"], r["ridged"]] for r in rows])
    summary["ranksweep"] = {
        str(k): {"top_layer_separability": [r["separability"] for r in rows if r["rank"] == k][-1],
                 "accuracy": [r["accuracy"] for r in rows if r["rank"] == k][0]}
        for k in sorted({r["rank"] for r in rows})
    }
    return True


_REPORTERS = {"contribution": _report_contribution, "lens": _report_lens, "svd": _report_svd,
              "cka": _report_cka, "ranksweep": _report_ranksweep}


def build_report(out_dir) -> dict:
    """Consolidated summary plus one CSV per figure panel, from whichever analysis outputs exist."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"missing output directory {out}")
    summary = {}
    for mode in ("frozen", "adapted"):
        side = lltd.read_sidecar(out / f"{mode}.lltd")
        if side is not None:
            summary[f"{mode}_accuracy"] = {k: side["meta"].get(k) for k in ("train_accuracy", "eval_accuracy")}
    families = [name for name in ANALYSES if _REPORTERS[name](out, summary)]
    if not families:
        raise FileNotFoundError(f"no analysis outputs found in {out}")
    summary["families"] = families
    lltd.write_json(out / "summary.json", _jsonable(summary))
    return summary


def run_all(cfg: RunConfig, out_dir, analyses=ANALYSES) -> dict:
    """Every stage end to end into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lltd.write_text(out / "config.json", cfg.dumps())
    run_pretrain(cfg, out / "backbone.lltd")
    run_adapt(cfg, out / "backbone.lltd", out, mode="frozen")
    run_adapt(cfg, out / "backbone.lltd", out, mode="adapted")
    run_trace(cfg, out / "frozen.lltd", "frozen", out / "trace_frozen.lltd")
    run_trace(cfg, out / "adapted.lltd", "adapted", out / "trace_adapted.lltd")
    if "contribution" in analyses:
        analyze_contribution(out / "trace_frozen.lltd", out / "trace_adapted.lltd", out)
    if "lens" in analyses:
        analyze_lens(out / "frozen.lltd", out / "trace_frozen.lltd", out)
        analyze_lens(out / "adapted.lltd", out / "trace_adapted.lltd", out)
    if "svd" in analyses:
        analyze_svd(cfg, out / "adapted.lltd", out)
    if "cka" in analyses:
        analyze_cka(out / "trace_adapted.lltd", out / "gradients.lltd", out)
    if "ranksweep" in analyses:
        analyze_ranksweep(cfg, out / "backbone.lltd", out)
    if set(analyses) == set(ANALYSES):
        return build_report(out)
    return {}
