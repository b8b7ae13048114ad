"""File-level orchestration: each function reads and writes the on-disk formats."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from .baselines import IpaRetriever, PixelMlp, build_lut
from .config import RunConfig
from .dataset import load_manifest, load_split, make_dataset
from .evaluate import (
    HygieneError,
    Metrics,
    OracleRetriever,
    compare,
    evaluate,
    parse_angle_grid,
    read_metrics,
    write_metrics,
)
from .model import CaacModel, read_checkpoint, write_checkpoint
from .train import train

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.caacckpt"
HISTORY = "history.csv"


def gen_data(cfg: RunConfig, out_dir) -> dict:
    manifest = make_dataset(out_dir, cfg.data, cfg.scene, cfg.seed, cfg.hash())
    return manifest


def history_csv(history: list[dict], config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# caac-history v1\n# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for h in history:
        w.writerow([int(h["epoch"]), repr(float(h["train_loss"])), repr(float(h["val_loss"])), repr(float(h["lr"]))])
    return buf.getvalue()


def read_history(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "lr": float(r["lr"])} for r in csv.DictReader(lines)]


def new_model(cfg: RunConfig, kind: str):
    if kind == "caac":
        return CaacModel(cfg.model, seed=cfg.train.seed)
    if kind == "mlp":
        return PixelMlp(cfg.mlp, seed=cfg.train.seed)
    raise ValueError(f"unknown model kind {kind!r}")


def train_run(cfg: RunConfig, data_dir, out_dir, kind: str = "caac", resume=None, progress=None):
    """Train and write ``checkpoint.caacckpt``, ``history.csv`` and ``config.json`` under ``out_dir``."""
    train_set = load_split(data_dir, "train")
    try:
        val_set = load_split(data_dir, "val")
    except FileNotFoundError:
        val_set = None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior: list[dict] = []
    start = 0
    if resume:
        model, prov = read_checkpoint(resume)
        start = int(prov.get("epochs_completed", 0))
        hist_path = Path(resume).with_name(HISTORY)
        if hist_path.exists():
            prior = [h for h in read_history(hist_path) if h["epoch"] <= start]
    else:
        model = new_model(cfg, kind)
    result = train(model, train_set, val_set, cfg.train, start_epoch=start, progress=progress)
    history = prior + result.history
    best = min(history, key=lambda h: (h["val_loss"], h["epoch"]))
    provenance = {
        "config_hash": cfg.hash(),
        "epochs_completed": history[-1]["epoch"],
        "best_epoch": best["epoch"],
        "best_val_loss": best["val_loss"],
        "train_seeds": [int(s) for s in train_set.seeds],
        "val_seeds": [int(s) for s in val_set.seeds] if val_set is not None else [],
        "train_config": cfg.train.to_dict(),
    }
    write_checkpoint(out / CHECKPOINT, model, provenance)
    (out / HISTORY).write_text(history_csv(history, cfg.hash()))
    (out / "config.json").write_text(json.dumps(cfg.resolved(), indent=1, sort_keys=True) + "\n")
    return model, history


def retriever_for(method: str | None, checkpoint=None):
    """Return (retriever, label, seeds used for training or None)."""
    if checkpoint:
        model, prov = read_checkpoint(checkpoint)
        if method and method not in (model.kind, "caac" if model.kind == "caac" else model.kind):
            raise ValueError(f"checkpoint holds a {model.kind} model, not {method}")
        used = list(prov.get("train_seeds", [])) + list(prov.get("val_seeds", []))
        return model, model.kind, used
    if method == "ipa":
        return IpaRetriever(build_lut()), "ipa", None
    if method == "oracle":
        return OracleRetriever(), "oracle", None
    if method in ("caac", "mlp"):
        raise ValueError(f"--method {method} needs --checkpoint")
    raise ValueError(f"unknown method {method!r}")


def eval_run(cfg: RunConfig, data_dir, out_path, method=None, checkpoint=None, angles=None,
             label=None) -> Metrics:
    testset = load_split(data_dir, "test")
    manifest_path = Path(data_dir) / "manifest.json"
    retriever, kind, used = retriever_for(method, checkpoint)
    if manifest_path.exists():
        manifest = load_manifest(data_dir)
        test_seeds = set(manifest["splits"]["test"]["seeds"])
        if test_seeds != set(testset.seeds):
            raise HygieneError("test split does not match its manifest")
    grid = parse_angle_grid(angles or cfg.eval.angles, cfg.data.cloud_top_km)
    metrics = evaluate(retriever, testset, grid, method=label or kind, effects=cfg.eval.effects,
                       noise_sigma=cfg.eval.noise_sigma, exclude_seeds=used,
                       batch_size=cfg.eval.batch_size, config_hash=cfg.hash())
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out_path, metrics)
    return metrics


def compare_run(metric_paths, out_path, reference=None):
    comp = compare([read_metrics(p) for p in metric_paths], reference)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(comp.to_csv())
    return comp


BENCH_VARIANTS = ("caac", "caac-fixed", "caac-noangle", "mlp")


def variant_config(cfg: RunConfig, variant: str) -> tuple[RunConfig, str]:
    if variant == "caac":
        return cfg, "caac"
    if variant == "caac-fixed":
        return replace(cfg, train=replace(cfg.train, angle_strategy="fixed")), "caac"
    if variant == "caac-noangle":
        return replace(cfg, model=replace(cfg.model, angle_mode="off")), "caac"
    if variant == "mlp":
        return cfg, "mlp"
    raise ValueError(variant)


def bench(cfg: RunConfig, out_dir, variants=BENCH_VARIANTS, progress=None) -> dict:
    """Full comparison: data, every trained variant, IPA, comparison table and figures.

    Variants whose checkpoint already exists under ``out_dir`` are not retrained;
    ``train_seconds`` in the result only covers variants trained by this call;
    ``histories`` holds the per-epoch rows of every variant.
    """
    from . import plotting

    out = Path(out_dir)
    data = out / "data"
    if not (data / "manifest.json").exists():
        gen_data(cfg, data)
    metric_files = []
    histories = {}
    seconds = {}
    for v in variants:
        vcfg, kind = variant_config(cfg, v)
        run_dir = out / v
        if not (run_dir / CHECKPOINT).exists():
            log.info("training %s", v)
            t0 = time.perf_counter()
            _, histories[v] = train_run(vcfg, data, run_dir, kind, progress=progress)
            seconds[v] = time.perf_counter() - t0
        else:
            histories[v] = read_history(run_dir / HISTORY)
        path = out / "metrics" / f"{v}.csv"
        eval_run(cfg, data, path, checkpoint=run_dir / CHECKPOINT, label=v)
        metric_files.append(path)
        plotting.history_plot(run_dir / "history.png", histories[v])
    ipa_path = out / "metrics" / "ipa.csv"
    eval_run(cfg, data, ipa_path, method="ipa", label="ipa")
    metric_files.append(ipa_path)
    comp = compare_run(metric_files, out / "compare.csv", reference=variants[0])
    (out / "compare.txt").write_text(comp.table() + "\n")
    plotting.error_vs_angle(out / "figures", [read_metrics(p) for p in metric_files])
    return {"comparison": comp, "metrics": {Path(p).stem: read_metrics(p) for p in metric_files},
            "train_seconds": seconds, "histories": histories}
