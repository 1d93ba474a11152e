import os

import numpy as np
import pytest

from simtlab.model import ModelConfig, SimtModel

SLOW = os.environ.get("SIMTLAB_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="set SIMTLAB_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_model(seed=0, randomize_adapters=True, **overrides):
    """Small model; adapters get random up-projections so routing matters."""
    kw = dict(src_vocab=12, tgt_vocab=12, embed_dim=16, ffn_dim=32, num_layers=2, num_heads=2,
              dropout=0.0, adapter_lagging=(1, 3, 5), adapter_bottleneck=4)
    kw.update(overrides)
    model = SimtModel(ModelConfig(**kw), seed=seed)
    if randomize_adapters:
        rng = np.random.default_rng(seed + 1000)
        for name, p in model.adapter_params().items():
            if name.endswith("up_w") or name.endswith("up_b"):
                p.data = rng.standard_normal(p.shape) * 0.5
    return model


def random_sources(n, seed=0, vocab=12, lo=1, hi=10):
    rng = np.random.default_rng(seed)
    return [list(map(int, rng.integers(4, vocab, rng.integers(lo, hi + 1)))) for _ in range(n)]


@pytest.fixture
def model():
    return make_model()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
