"""Multi-task training: alpha * L_vq + beta * L_vv + L_s + L_e."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .contrastive import ContrastMask, moment_mask, qv_loss, vv_loss
from .datamodel import BoundaryIndices, DatasetManifest, WordIndex
from .intervention import predict_span_batch, span_cross_entropy_from_logits
from .metrics import EvalReport, evaluate_predictions
from .model import (GroundingModel, ModelConfig, derive_seed, load_checkpoint,
                    save_checkpoint)
from .vocab import ConfounderVocab

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None = None,
                 diagnostics: dict | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    use_ivg: bool = True
    use_qv_cl: bool = True
    use_vv_cl: bool = True
    clip_norm: float = 1.0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig(**self.model))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


@dataclass
class LossBundle:
    l_vq: torch.Tensor
    l_vv: torch.Tensor
    l_s: torch.Tensor
    l_e: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_vq", "l_vv", "l_s", "l_e", "total")}


def total_loss(l_vq, l_vv, l_s, l_e, config: TrainConfig):
    """Weighted sum; a disabled contrastive term is left out entirely."""
    for name, value in (("l_vq", l_vq), ("l_vv", l_vv), ("l_s", l_s), ("l_e", l_e)):
        value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss component {name}={value}",
                                  diagnostics={name: value})
    total = l_s + l_e
    if config.use_qv_cl:
        total = config.alpha * l_vq + total
    if config.use_vv_cl:
        total = config.beta * l_vv + total
    return total


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    video: torch.Tensor        # (B, T, d_v)
    query_ids: torch.Tensor    # (B, N)
    query_mask: torch.Tensor   # (B, N)
    starts: torch.Tensor       # (B,)
    ends: torch.Tensor


class TensorDataset:
    """The manifest as stacked tensors; queries are padded per batch."""

    def __init__(self, manifest: DatasetManifest, word_index: WordIndex,
                 dtype: torch.dtype = torch.float32):
        self.ids = [ex.id for ex in manifest]
        if len(manifest):
            self.video = torch.from_numpy(
                np.stack([ex.video.features for ex in manifest])).to(dtype)
        else:
            self.video = torch.zeros(0, manifest.t, manifest.d_v, dtype=dtype)
        self.tokens = [ex.query.ids(word_index) for ex in manifest]
        self.starts = torch.tensor([ex.gold_idx.i_start for ex in manifest], dtype=torch.long)
        self.ends = torch.tensor([ex.gold_idx.i_end for ex in manifest], dtype=torch.long)
        self.t = manifest.t

    def __len__(self):
        return len(self.ids)

    def batch(self, index) -> Batch:
        index = list(index)
        n = max(len(self.tokens[i]) for i in index)
        qids = torch.zeros(len(index), n, dtype=torch.long)
        for row, i in enumerate(index):
            qids[row, : len(self.tokens[i])] = torch.tensor(self.tokens[i])
        return Batch([self.ids[i] for i in index], self.video[index], qids,
                     qids != WordIndex.PAD, self.starts[index], self.ends[index])

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for lo in range(0, len(order), batch_size):
            yield self.batch(order[lo:lo + batch_size])


def compute_losses(model: GroundingModel, batch: Batch, config: TrainConfig) -> LossBundle:
    out = model(batch.video, batch.query_ids, batch.query_mask)
    l_s, l_e = span_cross_entropy_from_logits(out.start_logits, out.end_logits,
                                              batch.starts, batch.ends)
    l_s, l_e = l_s.mean(), l_e.mean()
    zero = torch.zeros((), dtype=l_s.dtype)
    v_prime = out.feats.v_prime
    l_vq = l_vv = zero
    if config.use_qv_cl:
        mask = ContrastMask.from_bool(moment_mask(batch.starts, batch.ends, v_prime.shape[1]))
        l_vq = qv_loss(out.feats.q_pooled, v_prime, mask, model.disc_qv).mean()
    if config.use_vv_cl:
        l_vv = vv_loss(v_prime, batch.starts, batch.ends,
                       model.disc_vv_start, model.disc_vv_end).mean()
    total = total_loss(l_vq, l_vv, l_s, l_e, config)
    return LossBundle(l_vq, l_vv, l_s, l_e, total)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: GroundingModel
    log: list[dict]
    checkpoint: Path | None = None


def build_model(train_manifest: DatasetManifest, vocab: ConfounderVocab | None,
                config: TrainConfig) -> GroundingModel:
    if config.use_ivg and vocab is None:
        raise ValueError("use_ivg needs a confounder vocabulary")
    model = GroundingModel(config.model, train_manifest.d_v,
                           WordIndex.from_manifest(train_manifest),
                           vocab if config.use_ivg else None, seed=config.seed)
    return model.to(config.torch_dtype)


def _checkpoint_meta(config: TrainConfig, manifest: DatasetManifest, epoch: int) -> dict:
    return {"train_config": config.to_dict(), "config_sha256": config.sha256(),
            "epoch": epoch, "t": manifest.t}


def train(train_manifest: DatasetManifest, vocab: ConfounderVocab | None,
          config: TrainConfig, out_dir: str | os.PathLike | None = None,
          eval_manifest: DatasetManifest | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch; with ``out_dir`` a checkpoint is written after every epoch.

    The first-batch loss is recorded before any update and re-scored at the
    end of each epoch (``first_batch_total`` / ``first_batch_total_end``).
    """
    if not len(train_manifest):
        raise ValueError("training manifest is empty")
    torch.use_deterministic_algorithms(True)
    model = build_model(train_manifest, vocab, config)
    data = TensorDataset(train_manifest, model.word_index, config.torch_dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = None
    if out_dir is not None:
        last_good = save_checkpoint(model, out_dir / "epoch_000",
                                    _checkpoint_meta(config, train_manifest, 0))
    order_seed = derive_seed(config.seed, "data-order")
    history: list[dict] = []
    first_batch = None

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng([order_seed, epoch]).permutation(len(data))
        sums = dict.fromkeys(("l_vq", "l_vv", "l_s", "l_e", "total"), 0.0)
        n_batches = 0
        entry: dict = {"epoch": epoch}
        for step, batch in enumerate(data.batches(config.batch_size, order)):
            if first_batch is None:
                first_batch = batch
            bundle = compute_losses(model, batch, config)
            value = float(bundle.total.detach())
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingAborted(
                    f"diverged at epoch {epoch} step {step}: total loss {value}",
                    last_good, {"epoch": epoch, "step": step, "batch_ids": batch.ids,
                                **bundle.as_floats()})
            if epoch == 1 and step == 0:
                entry["first_batch_total"] = value
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            if config.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()
            for k, v in bundle.as_floats().items():
                sums[k] += v
            n_batches += 1
        entry.update({k: v / n_batches for k, v in sums.items()})
        model.eval()
        with torch.no_grad():
            entry["first_batch_total_end"] = float(compute_losses(model, first_batch, config).total)
        if eval_manifest is not None:
            entry["eval"] = evaluate_model(model, eval_manifest).to_dict()
        if out_dir is not None:
            last_good = save_checkpoint(model, out_dir / f"epoch_{epoch:03d}",
                                        _checkpoint_meta(config, train_manifest, epoch))
        history.append(entry)
        log.info("epoch %d: %s", epoch, {k: v for k, v in entry.items() if k != "eval"})
        if on_epoch is not None:
            on_epoch(entry)

    model.eval()
    final = None
    if out_dir is not None:
        final = out_dir / "final"
        if final.exists():
            shutil.rmtree(final)
        shutil.copytree(last_good, final)
        with open(out_dir / "train_log.jsonl", "w") as fh:
            for entry in history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(model, history, final)


# -- inference ---------------------------------------------------------------


@torch.no_grad()
def predict(model: GroundingModel, manifest: DatasetManifest,
            batch_size: int = 256) -> list[BoundaryIndices]:
    """Top-1 spans; only encoder, fusion, adjustment and span head run."""
    model.eval()
    dtype = next(model.parameters()).dtype
    data = TensorDataset(manifest, model.word_index, dtype)
    preds = []
    for batch in data.batches(batch_size):
        out = model(batch.video, batch.query_ids, batch.query_mask)
        s, e = predict_span_batch(torch.softmax(out.start_logits, -1),
                                  torch.softmax(out.end_logits, -1))
        preds.extend(BoundaryIndices(int(i), int(j), manifest.t)
                     for i, j in zip(s.tolist(), e.tolist()))
    return preds


def evaluate_model(model: GroundingModel, manifest: DatasetManifest) -> EvalReport:
    if not len(manifest):
        raise ValueError("evaluation manifest is empty")
    if model.d_v != manifest.d_v:
        raise ValueError(f"model expects d_v={model.d_v}, manifest has {manifest.d_v}")
    return evaluate_predictions(predict(model, manifest), [ex.gold_idx for ex in manifest])


def evaluate_checkpoint(ckpt_dir: str | os.PathLike, manifest: DatasetManifest,
                        vocab_path: str | os.PathLike | None = None) -> EvalReport:
    model, meta = load_checkpoint(ckpt_dir, vocab_path)
    if meta.get("t") is not None and meta["t"] != manifest.t:
        raise ValueError(f"checkpoint was trained with T={meta['t']}, manifest has T={manifest.t}")
    return evaluate_model(model, manifest)
