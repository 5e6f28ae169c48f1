from __future__ import annotations

import time

import numpy as np
import pytest

from modmoe import pipeline, synthdata
from modmoe.backbone import TransformerConfig, Vocabulary, build_model
from modmoe.moe import expand_from_dense

TOY_SIZES = {"align": 256, "instruct": 512, "tune": 64, "test": 200}


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary(synthdata.vocabulary_words())


@pytest.fixture(scope="session")
def corpus():
    splits, _ = synthdata.generate_corpus(0, TOY_SIZES)
    return splits


@pytest.fixture(scope="session")
def small_corpus():
    return synthdata.generate_splits(3, {"align": 16, "instruct": 32, "tune": 16, "test": 16})


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, d_model=16, n_layers=2, n_heads=2, ffn_hidden=32,
                max_seq_len=40, d_vision=8, moe_layer_indices=[1], router_hidden=8)
    base.update(kw)
    return TransformerConfig(**base)


@pytest.fixture(scope="session")
def curriculum(corpus, vocab):
    """The toy model taken through every phase, with snapshots between phases."""
    start = time.perf_counter()
    cfg = TransformerConfig(vocab_size=len(vocab), moe_layer_indices=[1, 3])
    model = build_model(cfg, 0)
    snaps = {"init": model.param_set().snapshot()}
    out = {"snaps": snaps}
    out["align"] = pipeline.run_phase1(model, corpus["align"], vocab)
    snaps["align"] = model.param_set().snapshot()
    out["instruct"] = pipeline.run_phase2(model, corpus["instruct"], vocab)
    snaps["instruct"] = model.param_set().snapshot()
    router = pipeline.train_router(model, pipeline.label_subset(corpus["instruct"], 25), vocab)
    out["router"] = router
    expand_from_dense(model, 4, cfg.moe_layer_indices, router)
    snaps["expanded"] = model.param_set().snapshot()
    out["moe"] = pipeline.run_phase3(model, corpus["tune"], vocab)
    snaps["moe"] = model.param_set().snapshot()
    out["model"] = model
    out["seconds"] = time.perf_counter() - start
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
