import pytest

from ivgdcl.model import ModelConfig
from ivgdcl.synthgen import BiasSpec, generate_dataset
from ivgdcl.trainer import TrainConfig
from ivgdcl.vocab import build_vocab

TINY_MODEL = ModelConfig(d=16, heads=2, d_w=8, kernel_size=3, conv_layers=1)


def tiny_spec(**kw):
    base = dict(
        actions=("holds", "fixes"), objects=("vacuum", "door"), roles=("person", "man"),
        cooccurrence_counts={("holds", "vacuum"): 12, ("fixes", "vacuum"): 3,
                             ("fixes", "door"): 12, ("holds", "door"): 3},
        test_counts={("holds", "vacuum"): 3, ("fixes", "vacuum"): 5,
                     ("fixes", "door"): 3, ("holds", "door"): 5},
        t=16, d_v=8, noise_sigma=0.3, seed=11,
    )
    base.update(kw)
    return BiasSpec(**base)


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=8, model=TINY_MODEL)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    train, test = generate_dataset(tiny_spec())
    return train, test, build_vocab([e.query.raw_text for e in train])


def write_spec(spec, path):
    """Serialize a BiasSpec in the shipped JSON layout."""
    import json
    from dataclasses import asdict
    d = asdict(spec)
    for key in ("cooccurrence_counts", "test_counts"):
        d[key] = {f"{a}|{o}": n for (a, o), n in d[key].items()}
    path.write_text(json.dumps(d, indent=2))
    return path


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
