"""Ablation and loss-weight sensitivity sweeps over the training switches."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import DatasetManifest
from .metrics import EvalReport, report_table_csv
from .trainer import TrainConfig, evaluate_model, train
from .vocab import ConfounderVocab

log = logging.getLogger(__name__)

ABLATIONS: dict[str, dict] = {
    "full": {},
    "w/o IVG": {"use_ivg": False},
    "w/o QV-CL": {"use_qv_cl": False},
    "w/o VV-CL": {"use_vv_cl": False},
    "w/o DCL": {"use_qv_cl": False, "use_vv_cl": False},
    "w/o IVG+DCL": {"use_ivg": False, "use_qv_cl": False, "use_vv_cl": False},
}

SENSITIVITY_GRID = ((0.1, 0.01), (1.0, 1.0), (0.5, 0.1), (0.1, 0.5), (1.5, 1.0))


def sensitivity_variants(grid=SENSITIVITY_GRID) -> dict[str, dict]:
    return {f"alpha={a:g},beta={b:g}": {"alpha": a, "beta": b} for a, b in grid}


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    keys = reports[0].r1_iou.keys()
    return EvalReport({k: float(np.mean([r.r1_iou[k] for r in reports])) for k in keys},
                      float(np.mean([r.mean_iou for r in reports])),
                      reports[0].n_examples)


@dataclass
class VariantResult:
    name: str
    config: TrainConfig
    per_seed: dict[int, EvalReport]

    @property
    def mean(self) -> EvalReport:
        return mean_report(list(self.per_seed.values()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "config_sha256": self.config.sha256(),
            "per_seed": {str(s): r.to_dict() for s, r in self.per_seed.items()},
            "mean": self.mean.to_dict(),
        }


def run_variants(train_manifest: DatasetManifest, test_manifest: DatasetManifest,
                 vocab: ConfounderVocab | None, base: TrainConfig,
                 variants: dict[str, dict], seeds: Sequence[int] = (0,),
                 out_dir: str | os.PathLike | None = None) -> list[VariantResult]:
    """Train and evaluate every variant for every seed, sequentially."""
    results = []
    for name, overrides in variants.items():
        cfg = replace(base, **overrides)
        per_seed = {}
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            ckpt_dir = None
            if out_dir is not None:
                slug = name.replace("/", "").replace(" ", "_").replace("+", "_").replace(",", "_")
                ckpt_dir = Path(out_dir) / "runs" / f"{slug}_seed{seed}"
            res = train(train_manifest, vocab, run_cfg, out_dir=ckpt_dir)
            per_seed[seed] = evaluate_model(res.model, test_manifest)
            log.info("%s seed %d: mIoU %.2f", name, seed, per_seed[seed].mean_iou)
        results.append(VariantResult(name, cfg, per_seed))
    return results


def write_table(results: list[VariantResult], out_dir: str | os.PathLike,
                stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    json_path.write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    csv_path.write_text(report_table_csv(
        {r.name: r.mean for r in results},
        extra_columns={r.name: {"config_sha256": r.config.sha256()[:12]} for r in results}))
    return json_path, csv_path
