"""Variant sweep: train every pipeline variant on identical data and compare."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .flops import PAPER_CLAIMS, estimate_flops
from .pipeline import (EncodedDataset, PipelineConfig, Stage2Config, Variant, accuracy_by_kind, build_stage2,
                       train_stage2)
from .synth import DETAIL_Q
from .vit import SrcVitModel

log = logging.getLogger(__name__)

ALL_VARIANTS = tuple(Variant)
QUESTION_LEN = len(DETAIL_Q) + 1
TIE = 0.01  # one accuracy point


def run_ablation_suite(src_vit: SrcVitModel, train: EncodedDataset, test: EncodedDataset, base: PipelineConfig,
                       stage2: Stage2Config, variants: Sequence = ALL_VARIANTS,
                       question_len: int = QUESTION_LEN) -> list[dict]:
    """One row per variant; every variant sees the same data, seed and step budget."""
    full = replace(base, variant=Variant.FULL)
    rows = []
    for v in variants:
        cfg = replace(base, variant=Variant.parse(v))
        model = build_stage2(cfg)
        res = train_stage2(src_vit, model, train, stage2)
        acc = accuracy_by_kind(model.predict(test), test)
        fl = estimate_flops(cfg, question_len, baseline=full)
        rows.append({
            "variant": cfg.variant.value,
            "frames": cfg.T,
            "compressed": cfg.M,
            "accuracy": acc["accuracy"],
            "accuracy_last_frame": acc["accuracy_last_frame"],
            "accuracy_global": acc["accuracy_global"],
            "visual_tokens": fl.visual_tokens,
            "flops_estimate": fl.total,
            "flops_pct": 100.0 * fl.ratio_vs_baseline,
            "seed": cfg.seed,
            "final_loss": res.curve[-1]["loss"] if res.curve else None,
            "encoder_frozen": res.vit_checksum_before == res.vit_checksum_after,
        })
        log.info("%s: accuracy %.3f, %d visual tokens", cfg.variant.value, acc["accuracy"], fl.visual_tokens)
    return rows


def mean_by_variant(rows: Sequence[dict], key: str = "accuracy") -> dict[str, float]:
    acc: dict[str, list] = {}
    for r in rows:
        if r.get(key) is not None:
            acc.setdefault(r["variant"], []).append(r[key])
    return {v: sum(a) / len(a) for v, a in acc.items()}


def ordering_checks(means: dict[str, float], tie: float = TIE) -> dict[str, bool]:
    """Qualitative orderings; ``a >= b`` also holds when a trails b by at most ``tie``."""
    checks = {}

    def ge(a, b):
        if a in means and b in means:
            checks[f"{a}>={b}"] = means[a] >= means[b] - tie

    ge("FULL", "SRC")
    for other in ("S_ONLY", "AVG_POOL", "NO_SR"):
        ge("SRC", other)
    return checks


CSV_COLUMNS = ("variant", "frames", "accuracy", "flops_pct", "visual_tokens", "seed")


def write_table_csv(path, rows: Sequence[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([f"{r[c]:.4f}" if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])


def metrics_report(rows: Sequence[dict]) -> dict:
    per = {}
    for r in rows:
        key = r["variant"] if r["variant"] not in per else f"{r['variant']}@seed{r['seed']}"
        per[key] = {k: r[k] for k in ("accuracy_last_frame", "accuracy_global", "visual_tokens",
                                      "flops_estimate", "seed")}
        per[key].update(accuracy=r["accuracy"], flops_pct=r["flops_pct"])
    means = mean_by_variant(rows)
    return {"variants": per, "mean_accuracy": means, "orderings": ordering_checks(means),
            "reference_flops_pct": PAPER_CLAIMS}


def write_metrics_json(path, rows: Sequence[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics_report(rows), indent=2, sort_keys=True) + "\n")
