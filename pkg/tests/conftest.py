import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for oracles.py

from mvprior import trainloop
from mvprior.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _train_full(tmp_path_factory):
    """The desk-scale 2k-step seeded training run (shared by acceptance and
    the post-training module tests)."""
    out = str(tmp_path_factory.mktemp("trained"))
    cfg = TrainConfig(seed=0)
    data = trainloop.make_train_data(synth_cfg=None, n_train=96, n_eval=16, seed=0)
    import time

    t0 = time.perf_counter()
    result = trainloop.train(cfg, data, out, eval_every=500, log_every=200, quiet=True)
    wall = time.perf_counter() - t0
    ckpt = trainloop.load_checkpoint(result.checkpoint_path)
    params, _ = trainloop.restore_params(ckpt)
    return {
        "result": result,
        "checkpoint_path": result.checkpoint_path,
        "params": params,
        "model_config": ckpt.model_config,
        "train_config": cfg,
        "wall_seconds": wall,
        "step0_aepe": result.eval_curve[0]["aepe"],
        "final_aepe": result.eval_curve[-1]["aepe"],
    }


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    return _train_full(tmp_path_factory)
