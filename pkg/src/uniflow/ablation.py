"""Toy-scale ablation sweeps: one training run per setting, evaluated and tabulated."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from pathlib import Path
from typing import Any

import numpy as np

from .config import RunConfig
from .data import load_split
from .evaluate import evaluate_model
from .trainer import fit

log = logging.getLogger(__name__)

LOSS_BALANCES = ((1.0, 0.0), (100.0, 1.0), (1.0, 1.0), (1.0, 100.0), (0.0, 1.0))
GTB_DEPTHS = (0, 3, 6, 9)
BETAS = (0.5, 1.0, 2.0, 3.0, 5.0)
AXES = ("distill_strategy", "loss_balance", "gtb_depth", "beta", "decoder_design")

COLUMNS = ("axis", "setting", "status", "psnr_db", "ssim", "frechet_proxy", "seam_energy",
           "teacher_alignment", "probe_accuracy", "final_loss_dist", "final_loss_flow", "steps")


def _fmt_ratio(a: float, b: float) -> str:
    return f"{a:g}:{b:g}"


def settings(axis: str, cfg: RunConfig) -> list[tuple[str, dict[str, Any]]]:
    """(label, config overrides) for every point on ``axis``."""
    if axis == "distill_strategy":
        return [("final_layer", {"distill_strategy": "final_layer"}),
                ("uniform", {"distill_strategy": "uniform"}),
                ("progressive (beta=0)", {"distill_strategy": "progressive"}),
                (f"adaptive (beta={cfg.beta:g})", {"distill_strategy": "adaptive"})]
    if axis == "loss_balance":
        return [(_fmt_ratio(d, f), {"lambda_d": d, "lambda_f": f}) for d, f in LOSS_BALANCES]
    if axis == "gtb_depth":
        return [(f"K={k}", {"gtb_depth": k}) for k in GTB_DEPTHS]
    if axis == "beta":
        return [(f"beta={b:g}", {"beta": b, "distill_strategy": "adaptive"}) for b in BETAS]
    if axis == "decoder_design":
        k = max(cfg.gtb_depth, 1)
        return [("pixel regression", {"decoder_mode": "pixel", "gtb_depth": 0}),
                ("pixel flow", {"decoder_mode": "flow", "gtb_depth": 0}),
                (f"pixel flow + GTB (K={k})", {"decoder_mode": "flow", "gtb_depth": k})]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(axis: str, cfg: RunConfig, out_dir: str | Path, eval_limit: int = 512,
                 sample_steps: int | None = None) -> list[dict[str, Any]]:
    """Train and evaluate every setting on ``axis``; write ``ablation_<axis>.csv`` and ``.json``.

    A failing setting is recorded with ``status`` set to the error and does
    not stop the sweep.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(cfg, "train")
    evals = load_split(cfg, "eval")
    rows = []
    for i, (label, overrides) in enumerate(settings(axis, cfg)):
        row: dict[str, Any] = {c: None for c in COLUMNS}
        row.update(axis=axis, setting=label)
        try:
            run_cfg = cfg.replace(**overrides)
            state = fit(run_cfg, out / f"run{i}", data=train)
            report = evaluate_model(state.model, evals, sample_steps or run_cfg.sample_steps, run_cfg.seed,
                                    eval_limit, probe_train=train)
            row.update(report.to_dict())
            last = state.records[-50:]
            row.update(status="ok", steps=state.step,
                       final_loss_dist=float(np.mean([r.loss_dist for r in last])) if last else None,
                       final_loss_flow=float(np.mean([r.loss_flow for r in last])) if last else None)
        except Exception as exc:  # isolate: the remaining settings still run
            log.error("ablation %s / %s failed: %s", axis, label, exc)
            row["status"] = f"error: {exc}"
            (out / f"run{i}").mkdir(parents=True, exist_ok=True)
            (out / f"run{i}" / "error.txt").write_text(traceback.format_exc())
        rows.append(row)
    with open(out / f"ablation_{axis}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    (out / f"ablation_{axis}.json").write_text(json.dumps(rows, indent=2))
    return rows


def format_table(rows: list[dict[str, Any]]) -> str:
    cols = ("setting", "psnr_db", "ssim", "frechet_proxy", "seam_energy", "teacher_alignment", "probe_accuracy")
    lines = [" | ".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v if v is not None else r.get("status")))
        lines.append(" | ".join(cells))
    return "\n".join(lines)
