from __future__ import annotations

import numpy as np
import pytest

from expertroute.backbone import BackboneConfig, build_backbone, pretrain_backbone
from expertroute.optim import OptimizerConfig
from expertroute.taskgen import generate_suite, pretraining_corpus

# Small-but-real configuration used by unit and integration tests.
SMALL_CONFIG = BackboneConfig(
    vocab_size=40,
    d_model=24,
    n_heads=2,
    d_ff=48,
    n_encoder_layers=1,
    n_decoder_layers=1,
    max_seq_len=20,
    seed=5,
)


@pytest.fixture(scope="session")
def small_suite():
    return generate_suite(seed=3, n_heldin=4, n_heldout=2, sizes=(200, 40, 40), vocab_size=40)


@pytest.fixture(scope="session")
def frozen_backbone(small_suite):
    bb = build_backbone(SMALL_CONFIG)
    corpus = pretraining_corpus(seed=3, n_examples=800, n_heldin=4, n_heldout=2, vocab_size=40)
    pretrain_backbone(
        bb, corpus, steps=120, opt_config=OptimizerConfig(lr=3e-3),
        batch_size=16, seed=3, holdout=128,
    )
    return bb
