#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os

import numpy as np
import pytest
import torch

os.environ.setdefault("VLMGAN_PROGRESS_BAR", "false")
os.environ.setdefault("VLMGAN_LOG_LEVEL", "WARNING")

from app.core.config_manager import config_manager  # noqa: E402
from app.data.toy import generate_toy_dataset  # noqa: E402
from app.data.vocab import build_vocab  # noqa: E402
from app.schemas.data import ToySpec  # noqa: E402

# 32px 图像、3 个阶段 (8, 16, 32)、R=4 的最小几何
TINY = {
    "embed_dim": 16,
    "word_embedding_dim": 16,
    "vision_width": 8,
    "msb_heads": 2,
    "base_size": 8,
    "num_stages": 3,
    "gen_width": 8,
    "disc_width": 8,
    "z_dim": 8,
    "condition_dim": 8,
    "residual_blocks": 1,
    "batch_size_vlm": 4,
    "batch_size_gan": 4,
    "vlm_epochs": 1,
    "gan_iterations": 3,
    "checkpoint_every": 2,
}


def make_config(**overrides):
    return config_manager.build(dict(TINY), **overrides)


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def tiny_config64():
    return make_config(dtype="float64")


@pytest.fixture(scope="session")
def toy_splits():
    return generate_toy_dataset(ToySpec(n_train=12, n_test=6, image_size=32, seed=0))


@pytest.fixture(scope="session")
def toy_train(toy_splits):
    return toy_splits[0]


@pytest.fixture(scope="session")
def toy_test(toy_splits):
    return toy_splits[1]


@pytest.fixture(scope="session")
def toy_vocab(toy_splits):
    train, test = toy_splits
    return build_vocab(train.merged(test))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


# ------------------------ 训练产物（整个测试会话共用） ------------------------
@pytest.fixture(scope="session")
def vlm_dir(tmp_path_factory, toy_train, toy_test, toy_vocab):
    from app.service.vlm_training_service import vlm_training_service

    out = tmp_path_factory.mktemp("vlm")
    vlm_training_service.train(toy_train, make_config(), vocab=toy_vocab, test_dataset=toy_test, out_dir=out)
    return out


@pytest.fixture(scope="session")
def gan_dir(tmp_path_factory, toy_train, toy_test, vlm_dir):
    from app.service.gan_training_service import gan_training_service

    out = tmp_path_factory.mktemp("gan")
    gan_training_service.train(toy_train, vlm_dir, make_config(), out, monitor=toy_test)
    return out
