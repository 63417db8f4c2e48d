import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_config
from ivgdcl import trainer as trainer_mod
from ivgdcl.datamodel import (BoundaryIndices, DatasetManifest, GroundingExample,
                              convert_index_to_time)
from ivgdcl.metrics import evaluate_predictions
from ivgdcl.model import CheckpointError, load_checkpoint
from ivgdcl.trainer import (LossBundle, TensorDataset, TrainConfig, TrainingAborted,
                            build_model, compute_losses, evaluate_checkpoint, evaluate_model,
                            predict, total_loss, train)
from ivgdcl.vocab import ConfounderVocab


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_total_loss_examples():
    cfg = TrainConfig()
    assert total_loss(t(2.0), t(2.0), t(3.0), t(3.9), cfg).item() == pytest.approx(7.12)
    assert total_loss(t(2.0), t(2.0), t(3.0), t(3.9), replace(cfg, use_qv_cl=False)).item() \
        == pytest.approx(6.92)
    off = replace(cfg, use_qv_cl=False, use_vv_cl=False)
    assert total_loss(t(2.0), t(2.0), t(3.0), t(4.0), off).item() == 7.0
    assert total_loss(t(1.0), t(2.0), t(0.0), t(0.0), replace(cfg, alpha=0, beta=0)).item() == 0


def test_total_loss_rejects_non_finite():
    with pytest.raises(TrainingAborted):
        total_loss(t(float("nan")), t(0.0), t(1.0), t(1.0), TrainConfig())


def test_loss_bundle_identity(tiny_data):
    train_m, _, vocab = tiny_data
    cfg = tiny_config()
    model = build_model(train_m, vocab, cfg).double()
    data = TensorDataset(train_m, model.word_index, torch.float64)
    b = compute_losses(model, data.batch(range(8)), cfg)
    f = b.as_floats()
    assert abs(f["total"] - (0.1 * f["l_vq"] + 0.01 * f["l_vv"] + f["l_s"] + f["l_e"])) <= 1e-6


def test_config_roundtrip_and_validation():
    cfg = tiny_config(alpha=0.3)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.sha256() == TrainConfig.from_dict(cfg.to_dict()).sha256()
    assert cfg.sha256() != replace(cfg, beta=0.02).sha256()
    for bad in (dict(alpha=-1), dict(batch_size=0), dict(epochs=-1), dict(dtype="int8")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_disabled_term_equals_zero_weight(tiny_data):
    train_m, _, vocab = tiny_data
    a = train(train_m, vocab, tiny_config(epochs=1, use_qv_cl=False)).model
    b = train(train_m, vocab, tiny_config(epochs=1, alpha=0.0)).model
    pa, pb = _params(a), _params(b)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)


def test_zero_epochs_returns_init(tiny_data, tmp_path):
    train_m, _, vocab = tiny_data
    res = train(train_m, vocab, tiny_config(epochs=0), out_dir=tmp_path)
    init = build_model(train_m, vocab, tiny_config(epochs=0))
    pa, pb = _params(res.model), _params(init)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert res.log == [] and (tmp_path / "final" / "params.npz").is_file()


def test_determinism_and_checkpoints(tiny_data, tmp_path):
    train_m, test_m, vocab = tiny_data
    cfg = tiny_config()
    r1 = train(train_m, vocab, cfg, out_dir=tmp_path / "a", eval_manifest=test_m)
    r2 = train(train_m, vocab, cfg, out_dir=tmp_path / "b", eval_manifest=test_m)
    for name in ("epoch_000", "epoch_001", "epoch_002", "final"):
        for f in ("params.npz", "meta.json"):
            assert (tmp_path / "a" / name / f).read_bytes() == (tmp_path / "b" / name / f).read_bytes()
    assert r1.log == r2.log
    assert [e["epoch"] for e in r1.log] == [1, 2]
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    meta = json.loads((tmp_path / "a" / "final" / "meta.json").read_text())
    assert meta["config_sha256"] == cfg.sha256() and meta["epoch"] == 2


def test_checkpoint_roundtrip_predictions(tiny_data, tmp_path):
    train_m, test_m, vocab = tiny_data
    res = train(train_m, vocab, tiny_config(epochs=1), out_dir=tmp_path)
    loaded, meta = load_checkpoint(res.checkpoint)
    assert predict(loaded, test_m) == predict(res.model, test_m)
    rep = evaluate_checkpoint(res.checkpoint, test_m)
    assert rep == evaluate_model(res.model, test_m)
    assert rep == evaluate_checkpoint(res.checkpoint, test_m)  # repeated eval is stable


def test_checkpoint_vocab_mismatch(tiny_data, tmp_path):
    train_m, test_m, vocab = tiny_data
    res = train(train_m, vocab, tiny_config(epochs=0), out_dir=tmp_path / "ck")
    other = ConfounderVocab(role={"x": 1}, action={"y": 1}, object={"z": 1})
    other.save(tmp_path / "other.json")
    with pytest.raises(CheckpointError):
        evaluate_checkpoint(res.checkpoint, test_m, tmp_path / "other.json")
    vocab.save(tmp_path / "same.json")
    evaluate_checkpoint(res.checkpoint, test_m, tmp_path / "same.json")


def test_checkpoint_tamper_detected(tiny_data, tmp_path):
    train_m, _, vocab = tiny_data
    res = train(train_m, vocab, tiny_config(epochs=0), out_dir=tmp_path)
    p = res.checkpoint / "params.npz"
    raw = bytearray(p.read_bytes())
    raw[-100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(res.checkpoint)


def test_t_mismatch(tiny_data, tmp_path):
    from conftest import tiny_spec
    from ivgdcl.synthgen import generate_dataset
    train_m, _, vocab = tiny_data
    res = train(train_m, vocab, tiny_config(epochs=0), out_dir=tmp_path)
    _, other = generate_dataset(tiny_spec(t=20))
    with pytest.raises(ValueError, match="T="):
        evaluate_checkpoint(res.checkpoint, other)


def test_perfect_single_example(tiny_data):
    # relabel one example with the model's own prediction: every metric is 100
    train_m, _, vocab = tiny_data
    model = build_model(train_m, vocab, tiny_config())
    ex = train_m.examples[0]
    (pred,) = predict(model, DatasetManifest("x", train_m.t, train_m.d_v, (ex,)))
    gold = convert_index_to_time(pred, ex.gold_time.duration_s)
    relabelled = GroundingExample(ex.id, ex.video, ex.query, gold)
    assert relabelled.gold_idx == pred
    rep = evaluate_model(model, DatasetManifest("x", train_m.t, train_m.d_v, (relabelled,)))
    assert rep.mean_iou == 100.0 and all(v == 100.0 for v in rep.r1_iou.values())


def test_evaluate_matches_brute_force(tiny_data):
    train_m, test_m, vocab = tiny_data
    model = build_model(train_m, vocab, tiny_config())
    sub = DatasetManifest("x", test_m.t, test_m.d_v, test_m.examples[:10])
    out_preds = []
    with torch.no_grad():
        data = TensorDataset(sub, model.word_index)
        for i in range(len(sub)):
            b = data.batch([i])
            out = model(b.video, b.query_ids, b.query_mask)
            ps = torch.softmax(out.start_logits, -1)[0].tolist()
            pe = torch.softmax(out.end_logits, -1)[0].tolist()
            best = max(((ps[a] * pe[c], -a, -c) for a in range(sub.t) for c in range(a, sub.t)))
            out_preds.append(BoundaryIndices(-best[1], -best[2], sub.t))
    assert predict(model, sub) == out_preds
    assert evaluate_model(model, sub) == evaluate_predictions(out_preds,
                                                              [e.gold_idx for e in sub])


def test_divergence_aborts_with_checkpoint(tiny_data, tmp_path, monkeypatch):
    train_m, _, vocab = tiny_data
    real = trainer_mod.compute_losses
    calls = {"n": 0}

    def exploding(model, batch, config):
        calls["n"] += 1
        bundle = real(model, batch, config)
        if calls["n"] > 3:
            bundle.total = bundle.total * 1e6
        return bundle

    monkeypatch.setattr(trainer_mod, "compute_losses", exploding)
    with pytest.raises(TrainingAborted) as err:
        train(train_m, vocab, tiny_config(epochs=3), out_dir=tmp_path)
    assert err.value.last_checkpoint == tmp_path / "epoch_000"
    assert err.value.diagnostics["epoch"] == 1 and err.value.diagnostics["step"] == 3
    assert (err.value.last_checkpoint / "params.npz").is_file()


def test_ivg_requires_vocab(tiny_data):
    train_m, _, _ = tiny_data
    with pytest.raises(ValueError):
        build_model(train_m, None, tiny_config())
    assert not build_model(train_m, None, tiny_config(use_ivg=False)).uses_ivg


def test_gradient_clipping_preserves_direction():
    p = torch.nn.Parameter(torch.zeros(3))
    p.grad = torch.tensor([3.0, 4.0, 0.0])
    torch.nn.utils.clip_grad_norm_([p], 1.0)
    assert torch.allclose(p.grad, torch.tensor([0.6, 0.8, 0.0]))
