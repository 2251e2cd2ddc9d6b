import numpy as np
import pytest

from scnet.config import resolve_config
from scnet.train import build_model, synthetic_splits

BASE = {"tau": 0.1, "alpha_semantic": 0.1}


def toy_config(**over):
    vals = dict(BASE)
    vals.update(over)
    return resolve_config(vals)


def small_config(**over):
    """Even smaller than toy, for tests that run many forward passes."""
    vals = dict(BASE, d=16, num_heads=2, max_q=8, max_ocr=5, max_obj=4, max_decode=3,
                n_vocab=30, d_ft=8, d_fr=8, icsp_hidden=16, q_layers=1, sct_layers=1,
                plain_layers=1, n_instances=6)
    vals.update(over)
    return resolve_config(vals)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f over every entry of array x (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def small_setup():
    cfg = small_config()
    tr, _, _, notes = synthetic_splits(cfg)
    model = build_model(cfg, tr)
    return cfg, tr, notes, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
