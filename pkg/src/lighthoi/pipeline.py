"""Pipeline stages behind the command line: each takes a resolved config dict."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .analysis import analyze_batch, records_to_rows, write_outputs
from .augmentation import AugWeights, augment, write_quality_csv
from .core import HOIDataset, ModalityPartition
from .denoiser import PRESETS, ConditionBundle, DenoiserConfig
from .geometry import ObjectLibrary
from .metrics import MetricReport, evaluate_many
from .model import load_checkpoint, save_checkpoint
from .config import ConfigError
from .sampler import RENOISE_MODES, GuidanceConfig, NoiseSource, Sampler, decode_sequences, sample_batched
from .synthetic import GeneratorConfig, contact_labels, foot_contact_labels, generate, split
from .training import LossWeights, TrainConfig, Trainer, TrainingData, make_model_for

log = logging.getLogger(__name__)


def data_paths(cfg: dict) -> dict[str, Path]:
    root = Path(cfg["data"]["root"])
    return {"train": root / "train", "test": root / "test", "library": root / "library"}


def _out(cfg: dict) -> Path:
    p = Path(cfg["run"]["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_data(cfg: dict, which: str = "test", n_basis: int | None = None):
    paths = data_paths(cfg)
    if not paths[which].with_suffix(".npz").exists():
        raise FileNotFoundError(f"no {which} split under {paths[which].parent}; run generate-data first")
    return HOIDataset.load(paths[which]), ObjectLibrary.load(paths["library"], n_basis=n_basis)


def guidance_from(cfg: dict, K: int, **over) -> GuidanceConfig:
    s = {**cfg["sample"], **over}
    try:
        g = GuidanceConfig(float(s["omega1"]), float(s["omega2"]), int(s["delta"]), ModalityPartition.parse(str(s["partition"])), s["m1_source"])
        if s["renoise"] not in RENOISE_MODES:
            raise ValueError(f"sample.renoise must be one of {RENOISE_MODES}")
        return g.check(K)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sample: {e}") from e


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def run_generate(cfg: dict) -> dict:
    d = cfg["data"]
    gen = GeneratorConfig(
        n_sequences=int(d["n_sequences"]), T=int(d["T"]), fps=float(d["fps"]), seed=int(d["seed"]),
        objects_per_category=int(d["objects_per_category"]), n_points=int(d["n_points"]), n_basis=int(d["n_basis"]),
    )
    dataset, library = generate(gen)
    train, test = split(dataset, library, tuple(d["split_ratios"]), d["split_mode"], seed=int(d["seed"]))
    paths = data_paths(cfg)
    train.save(paths["train"])
    test.save(paths["test"])
    library.save(paths["library"])
    log.info("generated n_train=%d n_test=%d n_objects=%d root=%s", len(train), len(test), len(library), d["root"])
    return {"n_train": len(train), "n_test": len(test), "n_objects": len(library)}


def denoiser_config(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    if m["preset"] not in PRESETS:
        raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}")
    base = PRESETS[m["preset"]].to_dict()
    for k in ("layers", "model_dim", "ffn_dim", "heads"):
        if m[k] is not None:
            base[k] = int(m[k])
    base["condition_dropout_prob"] = float(m["condition_dropout_prob"])
    return DenoiserConfig(**base)


def run_train(cfg: dict) -> dict:
    out = _out(cfg)
    torch.manual_seed(int(cfg["run"]["seed"]))
    train, library = load_data(cfg, "train")
    t = cfg["train"]
    model = make_model_for(train, library, denoiser_config(cfg), int(cfg["model"]["K"]), cfg["model"]["schedule"], int(cfg["run"]["seed"]))
    weights = LossWeights(**{k: float(t[k]) for k in ("lam_fs", "lam_v", "lam_cont", "lam_pv", "lam_otv", "lam_orv")})
    tc = TrainConfig(int(t["steps"]), int(t["batch_size"]), float(t["lr"]), int(cfg["run"]["seed"]), int(t["log_every"]), int(t["checkpoint_every"]), weights)
    trainer = Trainer(model, TrainingData(train, library, model.normalizer, model.layout), tc)
    hist = trainer.fit(out_dir=out)
    path = save_checkpoint(model, out / "checkpoint.pt", extra={"steps": tc.steps, "seed": tc.seed})
    final = hist[-1] if hist else {}
    log.info("trained steps=%d final_loss=%.6f checkpoint=%s", tc.steps, final.get("total", float("nan")), path)
    return {"checkpoint": str(path), "final_loss": final.get("total")}


def _checkpoint(cfg: dict) -> Path:
    ck = cfg["sample"]["checkpoint"] or Path(cfg["run"]["out_dir"]) / "checkpoint.pt"
    ck = Path(ck)
    if not ck.exists():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    return ck


def _conditions(cfg: dict, model, test: HOIDataset, library: ObjectLibrary, n: int | None):
    n = len(test) if n is None else int(n)
    gt_index = np.arange(n) % len(test)
    labels = torch.as_tensor(test.arrays["task_label"][gt_index])
    geometry = torch.as_tensor(library.features()[test.arrays["object_id"][gt_index]], dtype=torch.float32)
    seeds = int(cfg["sample"]["seed"]) * 1_000_003 + np.arange(n)
    return ConditionBundle.make(labels, geometry), seeds, gt_index


def samples_dataset(model, grids, gt_index, test: HOIDataset, library: ObjectLibrary, meta: dict) -> HOIDataset:
    seqs = decode_sequences(model, grids, test.fps)
    oid = test.arrays["object_id"][gt_index]
    arrays = {
        "body_joints": np.stack([s.body_joints for s in seqs]),
        "hand_joints": np.stack([s.hand_joints for s in seqs]),
        "hand_angles": np.stack([s.hand_angles for s in seqs]),
        "obj_trans": np.stack([s.obj_trans for s in seqs]),
        "obj_rot6d": np.stack([s.obj_rot6d for s in seqs]),
        "contact_labels": np.stack(
            [contact_labels(s.joints(), library[o].points, s.obj_trans, s.obj_rot6d) for s, o in zip(seqs, oid)]
        ),
        "foot_contact": np.stack([foot_contact_labels(s.body_joints, model.skeleton) for s in seqs]),
        "task_label": test.arrays["task_label"][gt_index],
        "object_id": oid,
        "gt_index": np.asarray(gt_index, dtype=np.int64),
    }
    return HOIDataset(arrays, {"kind": "samples", "fps": test.fps, **meta})


def run_sample(cfg: dict) -> dict:
    out = _out(cfg)
    model = load_checkpoint(_checkpoint(cfg))
    test, library = load_data(cfg, "test", n_basis=model.n_basis)
    s = cfg["sample"]
    cond, seeds, gt_index = _conditions(cfg, model, test, library, s["n_samples"])
    g = guidance_from(cfg, model.K)
    T = test.arrays["body_joints"].shape[1]
    if s["streaming"]:
        sampler = Sampler.for_model(model, s["renoise"])
        chunks = []
        bs = int(s["batch_size"])
        for lo in range(0, len(seeds), bs):
            idx = np.arange(lo, min(lo + bs, len(seeds)))
            noise = NoiseSource(seeds[idx], (T, model.layout.n_channels))
            chunks.append(sampler.run_light(noise, cond.index(torch.as_tensor(idx)), g, streaming=True).numpy())
        grids = np.concatenate(chunks)
    else:
        grids = sample_batched(model, cond, seeds, T, {"x": g}, int(s["batch_size"]), s["renoise"])["x"]
    ds = samples_dataset(model, grids, gt_index, test, library, {"guidance": g.to_dict(), "seed": int(s["seed"])})
    ds.save(out / "samples")
    log.info("sampled n=%d guidance=%s out=%s", len(ds), g.to_dict(), out / "samples")
    return {"n_samples": len(ds), "path": str(out / "samples")}


def evaluate_samples(samples: HOIDataset, test: HOIDataset, library: ObjectLibrary) -> list[MetricReport]:
    gt_index = samples.arrays["gt_index"] if "gt_index" in samples.arrays else np.arange(len(samples))
    gts = [test.sequence(int(i)) for i in gt_index]
    geoms = [library[int(o)] for o in samples.arrays["object_id"]]
    return evaluate_many(samples.sequences(), gts, geoms)


def run_evaluate(cfg: dict) -> dict:
    out = _out(cfg)
    path = Path(cfg["evaluate"]["samples"] or out / "samples")
    samples = HOIDataset.load(path)
    test, library = load_data(cfg, "test")
    reports = evaluate_samples(samples, test, library)
    mean = MetricReport.mean(reports).to_dict()
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["index", *MetricReport.columns()])
        w.writeheader()
        for i, r in enumerate(reports):
            w.writerow({"index": i, **{k: repr(v) for k, v in r.to_dict().items()}})
    result = {"n": len(reports), "mean": mean}
    _dump_json(result, out / "metrics.json")
    log.info("evaluated n=%d contact=%.4f penetration_fraction=%.5f fsr=%.4f", len(reports), mean["contact"], mean["penetration_fraction"], mean["fsr"])
    return result


def _augment_job(args):
    seq, src, tgt, weights, a = args
    return augment(seq, src, tgt, weights, int(a["iters"]), bool(a["optimize_human"]), a["method"])


def run_augment(cfg: dict) -> dict:
    out = _out(cfg)
    a = cfg["augment"]
    src_path = Path(a["source"]) if a["source"] else data_paths(cfg)["train"]
    source = HOIDataset.load(src_path)
    library = ObjectLibrary.load(data_paths(cfg)["library"])
    weights = AugWeights(*(float(a[k]) for k in ("lam_con", "lam_normal", "lam_colli", "lam_init", "lam_acc")))
    rng = np.random.default_rng([int(cfg["run"]["seed"]), 5])
    jobs = []
    for j in range(min(int(a["n_jobs"]), len(source))):
        src_id = int(source.arrays["object_id"][j])
        pool = [i for i in library.by_category(library[src_id].category) if i != src_id]
        if not pool:
            log.warning("job=%d has no same-category target; skipped", j)
            continue
        for tid in rng.choice(pool, size=min(int(a["targets_per_job"]), len(pool)), replace=False):
            jobs.append((j, src_id, int(tid)))
    payload = [(source.sequence(j), library[s_id], library[t], weights, a) for j, s_id, t in jobs]
    workers = int(a["workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_augment_job, payload))
    else:
        results = [_augment_job(p) for p in payload]
    rows = []
    for (j, src_id, tid), (aug, report, q) in zip(jobs, results):
        rows.append({"job": j, "source_object": library[src_id].name, "target_object": library[tid].name,
                     "status": report.status, "iterations": report.iterations,
                     "con_init": report.initial["con"], "con_final": report.final["con"], **q})
        log.info("augment job=%d target=%s con %.3g->%.3g pene=%.4g", j, library[tid].name, report.initial["con"], report.final["con"], q["pene"])
    write_quality_csv(rows, out / "quality.csv")
    if results:
        seqs = [r[0] for r in results]
        tids = [t for _, _, t in jobs]
        arrays = {k: np.stack([getattr(s, k) for s in seqs]) for k in ("body_joints", "hand_joints", "hand_angles", "obj_trans", "obj_rot6d")}
        arrays["object_id"] = np.array(tids, dtype=np.int64)
        arrays["task_label"] = source.arrays["task_label"][[j for j, _, _ in jobs]]
        arrays["source_index"] = np.array([j for j, _, _ in jobs], dtype=np.int64)
        arrays["contact_labels"] = np.stack([contact_labels(s.joints(), library[t].points, s.obj_trans, s.obj_rot6d) for s, t in zip(seqs, tids)])
        arrays["foot_contact"] = np.stack([foot_contact_labels(s.body_joints) for s in seqs])
        HOIDataset(arrays, {"kind": "augmented", "fps": source.fps}).save(out / "augmented")
    return {"n_jobs": len(rows)}


def run_analyze(cfg: dict) -> dict:
    out = _out(cfg)
    model = load_checkpoint(_checkpoint(cfg))
    test, library = load_data(cfg, "test", n_basis=model.n_basis)
    an = cfg["analyze"]
    n = int(an["n_sequences"]) * int(an["repeats"])
    cond, seeds, gt_index = _conditions(cfg, model, test, library, n)
    g = guidance_from(cfg, model.K)
    sampler = Sampler.for_model(model, cfg["sample"]["renoise"])
    gt_all = torch.as_tensor(model.normalizer.encode(test.grids(model.layout)), dtype=torch.float32)
    pts_all = torch.as_tensor(library.points(), dtype=torch.float32)
    T = gt_all.shape[1]
    records = []
    bs = int(cfg["sample"]["batch_size"])
    for lo in range(0, n, bs):
        idx = np.arange(lo, min(lo + bs, n))
        noise = NoiseSource(seeds[idx], (T, model.layout.n_channels))
        gi = torch.as_tensor(gt_index[idx])
        records += analyze_batch(
            sampler, noise, cond.index(torch.as_tensor(idx)), gt_all[gi],
            pts_all[torch.as_tensor(test.arrays["object_id"][gt_index[idx]])], g, sample_ids=idx,
        )
    summary = write_outputs(records, out)
    summary["n_records"] = len(records_to_rows(records))
    _dump_json(summary, out / "guidance_directions.json")
    log.info("analysis light_pen-cfg_pen=%.4f p=%.3g", summary["delta_pen"], summary["sign_test_pen"]["p_value"])
    return summary


def run_sweep(cfg: dict) -> dict:
    out = _out(cfg)
    model = load_checkpoint(_checkpoint(cfg))
    test, library = load_data(cfg, "test", n_basis=model.n_basis)
    s = cfg["sample"]
    cond, seeds, gt_index = _conditions(cfg, model, test, library, s["n_samples"])
    grid = {}
    for w in cfg["sweep"]["omega2"]:
        grid[("omega2", float(w))] = guidance_from(cfg, model.K, omega2=float(w))
    for d in cfg["sweep"]["delta"]:
        grid[("delta", int(d))] = guidance_from(cfg, model.K, delta=int(d))
    T = test.arrays["body_joints"].shape[1]
    names = {f"{p}={v}": g for (p, v), g in grid.items()}
    grids = sample_batched(model, cond, seeds, T, names, int(s["batch_size"]), s["renoise"])
    curves = {"omega2": [], "delta": []}
    for (p, v), g in grid.items():
        ds = samples_dataset(model, grids[f"{p}={v}"], gt_index, test, library, {})
        mean = MetricReport.mean(evaluate_samples(ds, test, library)).to_dict()
        curves[p].append({p: v, **mean})
        log.info("sweep %s=%s contact=%.4f penetration_fraction=%.5f", p, v, mean["contact"], mean["penetration_fraction"])
    for p, rows in curves.items():
        with open(out / f"curve_{p}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[p, *MetricReport.columns()])
            w.writeheader()
            w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    return {"points": len(grid)}


STAGES = {
    "generate-data": run_generate,
    "train": run_train,
    "sample": run_sample,
    "evaluate": run_evaluate,
    "augment": run_augment,
    "analyze-guidance": run_analyze,
    "sweep": run_sweep,
}
