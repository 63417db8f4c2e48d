"""The full grounding network and its checkpoint format.

A checkpoint is a directory holding ``params.npz`` (parameter name ->
little-endian float32 array, shape stored by the .npy header) and
``meta.json`` (model config, word list, confounder vocabulary and hashes).
The zip entries carry a fixed timestamp so identical weights give identical
bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .contrastive import Discriminator
from .datamodel import WordIndex
from .encoder import ContextualizedFeatures, EncoderConfig, FeatureEncoder
from .fusion import CQAFusion
from .intervention import ConfounderEmbeddingTable, SpanHead, deconfound
from .vocab import ConfounderVocab


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    heads: int = 8
    d_w: int = 64
    kernel_size: int = 7
    conv_layers: int = 4


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed so each submodule's init ignores what else exists."""
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, key]).generate_state(1)[0])


def _seeded(seed: int, name: str, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, name))
        return build()


@dataclass
class ModelOutput:
    feats: ContextualizedFeatures
    x: torch.Tensor
    x_adj: torch.Tensor
    start_logits: torch.Tensor
    end_logits: torch.Tensor


class GroundingModel(nn.Module):
    """Encoder -> CQA fusion -> (optional) backdoor adjustment -> span head.

    The three discriminators are only used by the contrastive losses during
    training; :meth:`forward` never touches them.
    """

    def __init__(self, config: ModelConfig, d_v: int, word_index: WordIndex,
                 vocab: ConfounderVocab | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.d_v = d_v
        self.word_index = word_index
        self.vocab = vocab
        enc_cfg = EncoderConfig(vocab_size=len(word_index), d_v=d_v, d=config.d,
                                heads=config.heads, d_w=config.d_w,
                                kernel_size=config.kernel_size,
                                conv_layers=config.conv_layers)
        self.encoder = _seeded(seed, "encoder", lambda: FeatureEncoder(enc_cfg))
        self.fusion = _seeded(seed, "fusion", lambda: CQAFusion(config.d))
        self.span_head = _seeded(seed, "span_head", lambda: SpanHead(config.d))
        self.disc_qv = _seeded(seed, "disc_qv", lambda: Discriminator(config.d))
        self.disc_vv_start = _seeded(seed, "disc_vv_start", lambda: Discriminator(config.d))
        self.disc_vv_end = _seeded(seed, "disc_vv_end", lambda: Discriminator(config.d))
        self.confounders = None
        if vocab is not None:
            self.confounders = _seeded(
                seed, "confounders", lambda: ConfounderEmbeddingTable(vocab, config.d))

    @property
    def uses_ivg(self) -> bool:
        return self.confounders is not None

    def forward(self, video, query_ids, query_mask=None) -> ModelOutput:
        feats = self.encoder(video, query_ids, query_mask)
        x = self.fusion(feats.v_prime, feats.q_prime, feats.q_mask)
        x_adj = deconfound(x, self.confounders)
        start, end = self.span_head(x_adj)
        return ModelOutput(feats, x, x_adj, start, end)


# -- checkpoints -------------------------------------------------------------


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_params(state: dict[str, torch.Tensor], path: str | os.PathLike) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(state):
            arr = state[name].detach().cpu().numpy().astype("<f4")
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _npy_bytes(arr))


def load_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: GroundingModel, out_dir: str | os.PathLike,
                    extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(model.state_dict(), out_dir / "params.npz")
    meta = {
        "model_config": asdict(model.config),
        "d_v": model.d_v,
        "words": model.word_index.words[2:],
        "vocab": None if model.vocab is None else json.loads(model.vocab.to_json()),
        "vocab_sha256": None if model.vocab is None else model.vocab.sha256(),
        "params_sha256": file_sha256(out_dir / "params.npz"),
    }
    meta.update(extra or {})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


class CheckpointError(ValueError):
    pass


def load_checkpoint(ckpt_dir: str | os.PathLike, vocab_path: str | os.PathLike | None = None,
                    dtype=torch.float32) -> tuple[GroundingModel, dict]:
    ckpt_dir = Path(ckpt_dir)
    try:
        meta = json.loads((ckpt_dir / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata in {ckpt_dir}: {exc}")
    vocab = None
    if meta.get("vocab") is not None:
        vocab = ConfounderVocab.from_json(json.dumps(meta["vocab"]))
        if vocab.sha256() != meta["vocab_sha256"]:
            raise CheckpointError("embedded vocabulary does not match its recorded hash")
        if vocab_path is not None and ConfounderVocab.load(vocab_path).sha256() != vocab.sha256():
            raise CheckpointError(f"vocabulary {vocab_path} differs from the one trained with")
    if file_sha256(ckpt_dir / "params.npz") != meta.get("params_sha256"):
        raise CheckpointError("params.npz does not match its recorded hash")
    model = GroundingModel(ModelConfig(**meta["model_config"]), meta["d_v"],
                           WordIndex(meta["words"]), vocab)
    arrays = load_params(ckpt_dir / "params.npz")
    state = {k: torch.from_numpy(v.astype(np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model.to(dtype), meta
