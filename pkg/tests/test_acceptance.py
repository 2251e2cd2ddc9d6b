"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` (the lines are also
printed without ``-s``). The ablation check dominates the runtime (about
20 minutes on one core).
"""

import math
import random
import time

import numpy as np
import pytest

from scnet.config import PHOC_DIM, ModelConfig, resolve_config
from scnet.features import BoundingBox, iou
from scnet.losses import bce_loss, contrastive_loss
from scnet.metrics import EvalRecord, anls_score, levenshtein, vqa_accuracy
from scnet.optim import OptimConfig, lr_at
from scnet.sct import input_lengths
from scnet.tensor import Tensor, no_grad
from scnet.train import ablate, build_model, run_gradcheck, synthetic_splits, train

from conftest import BASE
from test_features import grid_iou
from test_losses import naive_eq8, random_case
from test_metrics import dp_reference
from test_sct import perturb_padding


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


def toy(**over):
    return resolve_config(dict(BASE, **over))


# -- gradient fidelity ----------------------------------------------------

def test_gradient_fidelity(verdict):
    cfg = toy()
    t0 = time.perf_counter()
    tr, _, _, _ = synthetic_splits(cfg)
    run = run_gradcheck(cfg, tr, build_model(cfg, tr))
    secs = time.perf_counter() - t0
    names = set(run.report.max_rel_err)
    must = {f"sct.layer{i}.alpha" for i in range(cfg.model.sct_layers)} | {"icsp.alpha_se"}
    must |= {f"icsp.mlp{k}.{p}" for k in (1, 2) for p in ("weight", "bias")}
    ok = (run.report.worst < 1e-3 and run.coverage == 1.0 and must <= names
          and secs < 60 and run.clamped == 0)
    verdict("gradient fidelity", ok, f"max_rel_err={run.report.worst:.2e} "
            f"coverage={run.coverage:.0%} ({len(names)} params, incl. {sorted(must)}) "
            f"runtime={secs:.1f}s")


# -- structural constants -------------------------------------------------

def test_structural_constants(verdict):
    m, o = ModelConfig(), OptimConfig()
    checks = {
        "input_lengths sct": input_lengths(m) == (70, 82),
        "input_lengths baseline": input_lengths(m, baseline=True) == (170, 182),
        "phoc": PHOC_DIM == 604 and m.d_phoc == 604,
        "fasttext": m.d_ft == 300,
        "joint dim": m.d == 768,
        "heads": m.num_heads == 12,
        "sct layers": m.sct_layers == 2,
        "plain layers": m.plain_layers == 2,
        "decode steps": m.max_decode == 12,
        "lr@0": math.isclose(lr_at(0, o), 2e-5, rel_tol=1e-12),
        "lr@1000": math.isclose(lr_at(1000, o), 1e-4, rel_tol=1e-12),
        "lr@28000": math.isclose(lr_at(28000, o), 1e-5, rel_tol=1e-12),
        "lr@38000": math.isclose(lr_at(38000, o), 1e-6, rel_tol=1e-12),
    }
    bad = [k for k, v in checks.items() if not v]
    verdict("structural constants", not bad, f"{len(checks) - len(bad)}/{len(checks)} match"
            + (f", mismatched: {bad}" if bad else ""))


# -- overfit --------------------------------------------------------------

@pytest.mark.parametrize("variant", ["eq8_verbatim", "denominator_all"])
def test_overfit(verdict, variant):
    cfg = toy(contrastive_variant=variant, eval_interval=25)
    tr, _, _, _ = synthetic_splits(cfg)
    assert len(tr) == 32 and cfg.optim.max_iters == 2000
    t0 = time.perf_counter()
    state = {}

    def converged(res, it):
        with no_grad():
            lo = res.model.loss(res.model.featurize(tr))
        state.update(l_final=float(lo.l_final.data), l_bce=lo.l_bce)
        return (res.tf_accuracy >= 0.95 and state["l_final"] < 0.05 * res.initial_loss
                and lo.l_bce < 0.05 * res.history[0]["l_bce"])

    res = train(cfg, tr, stop_when=converged)
    secs = time.perf_counter() - t0
    l_bce0 = res.history[0]["l_bce"]
    with no_grad():
        l_bce = res.model.loss(res.model.featurize(tr)).l_bce
    ok = (res.iterations <= 2000 and res.tf_accuracy >= 0.95
          and res.final_loss < 0.05 * res.initial_loss and secs < 300)
    verdict(f"overfit ({variant})", ok,
            f"iters={res.iterations} tf_acc={res.tf_accuracy:.3f} "
            f"L_final {res.initial_loss:.4f}->{res.final_loss:.4f} "
            f"(L_bce alone {l_bce0:.4f}->{l_bce:.4f}) runtime={secs:.0f}s")


# -- loss oracles ---------------------------------------------------------

def test_loss_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = {}
    for variant in ("eq8_verbatim", "denominator_all"):
        cfg = resolve_config(dict(BASE, contrastive_variant=variant, tau=0.3)).loss
        err = 0.0
        for _ in range(1000):
            pred, S, y, valid = random_case(rng, B=2, C=int(rng.integers(2, 9)),
                                            k=int(rng.integers(1, 6)))
            got, rep = contrastive_loss(Tensor(pred), S, y, valid, cfg, clamp=False)
            want = naive_eq8(pred, S, y, valid, cfg.tau, variant)
            if rep.used:
                err = max(err, abs(got.item() - want) / max(abs(want), 1e-300))
        worst[variant] = err
    z = rng.random((4, 3, 7)) < 0.5
    bce = bce_loss(Tensor(np.zeros((4, 3, 7))), z.astype(float), np.ones_like(z))
    bce_err = abs(bce.item() - math.log(2))
    two = 0.0
    for tau in (0.05, 0.1, 1.0):
        lc = resolve_config(dict(BASE, tau=tau)).loss
        for _ in range(100):
            S, p = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 4))
            got, _ = contrastive_loss(Tensor(p), S, np.array([[1.0, 0.0]]),
                                      np.ones((1, 2), bool), lc, clamp=False)
            two = max(two, abs(got.item() + (S[0, 0] @ p[0] - S[0, 1] @ p[0]) / tau))
    ok = max(worst.values()) <= 1e-10 and bce_err <= 1e-12 and two <= 1e-9
    verdict("loss oracles", ok, f"eq8 rel_err {worst} bce|ln2 err={bce_err:.1e} "
            f"2-candidate abs err={two:.1e}")


# -- metric oracles -------------------------------------------------------

def test_metric_oracles(verdict):
    r = random.Random(7)
    mism = 0
    for _ in range(10_000):
        a = "".join(r.choice("abcde") for _ in range(r.randint(0, 12)))
        b = "".join(r.choice("abcde") for _ in range(r.randint(0, 12)))
        mism += levenshtein(a, b) != dp_reference(a, b)
    anls_err = abs(anls_score("georgh", "georgia") - (1 - 2 / 7))
    values = set()
    for _ in range(2000):
        refs = [r.choice("xyz") for _ in range(10)]
        values.add(vqa_accuracy(EvalRecord("i", r.choice("xyz"), refs, "vocab")))
    ok = mism == 0 and anls_err <= 1e-12 and values <= {0.0, 1 / 3, 2 / 3, 1.0}
    verdict("metric oracles", ok, f"levenshtein mismatches={mism}/10000 "
            f"anls err={anls_err:.1e} vqa values={sorted(round(v, 4) for v in values)}")


# -- geometry oracle ------------------------------------------------------

def grid_bracket(a, b, n=1000):
    """Range a pixel-centre count estimate can take, each 1-D count being off by at most 1."""
    def span(lo, hi):
        L = max(hi - lo, 0.0) * n
        return max(L - 1, 0.0), L + 1

    ax, ay = span(a.xmin, a.xmax), span(a.ymin, a.ymax)
    bx, by = span(b.xmin, b.xmax), span(b.ymin, b.ymax)
    ix = span(max(a.xmin, b.xmin), min(a.xmax, b.xmax))
    iy = span(max(a.ymin, b.ymin), min(a.ymax, b.ymax))
    i_lo, i_hi = ix[0] * iy[0], ix[1] * iy[1]
    u_hi = ax[1] * ay[1] + bx[1] * by[1] - i_lo
    u_lo = max(ax[0] * ay[0] + bx[0] * by[0] - i_hi, 1e-300)
    return i_lo / u_hi, min(i_hi / u_lo, 1.0)


def test_geometry_oracle(verdict):
    rng = np.random.default_rng(11)
    n = 1000

    def lattice_box():
        # corners on grid lines: the pixel count is then exact, any box size
        x0, x1 = sorted(rng.choice(n + 1, size=2, replace=False))
        y0, y1 = sorted(rng.choice(n + 1, size=2, replace=False))
        return BoundingBox(x0 / n, y0 / n, x1 / n, y1 / n)

    def free_box():
        w, h = rng.uniform(0.01, 0.6, size=2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return BoundingBox(x, y, x + w, y + h)

    worst, overlapping = 0.0, 0
    for _ in range(1000):
        a, b = lattice_box(), lattice_box()
        v = iou(a, b)
        overlapping += v > 0
        worst = max(worst, abs(v - grid_iou(a, b, n)))
    outside, free_worst = 0, 0.0
    for _ in range(1000):
        a, b = free_box(), free_box()
        g = grid_iou(a, b, n)
        lo, hi = grid_bracket(a, b, n)
        outside += not (lo - 1e-9 <= g <= hi + 1e-9 and lo - 1e-9 <= iou(a, b) <= hi + 1e-9)
        free_worst = max(free_worst, abs(iou(a, b) - g))
    seventh = abs(iou(BoundingBox(0, 0, 0.2, 0.2), BoundingBox(0.1, 0.1, 0.3, 0.3)) - 1 / 7)
    verdict("geometry oracle", worst <= 2e-3 and seventh <= 1e-12 and outside == 0,
            f"grid-aligned pairs: max |iou - grid| = {worst:.2e} over 1000 pairs "
            f"({overlapping} overlapping); continuous pairs: {outside}/1000 outside the "
            f"+-1 pixel bracket (raw max diff {free_worst:.1e}); 1/7 case err={seventh:.1e}")


# -- ablation directionality ----------------------------------------------

ABLATION = dict(n_instances=500, n_eval_instances=200, ocr_error_rate=0.3, bias_strength=0.5,
                max_iters=900, decay_steps=[700], eval_interval=10_000)


def test_ablation_directionality(verdict):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        cfg = toy(seed=seed, **ABLATION)
        tr, ev, _, _ = synthetic_splits(cfg)
        on, off = ablate(cfg, tr, ev, cells=((True, True), (True, False)))
        wins += on["vocab_acc"] >= off["vocab_acc"]
        rows.append(f"seed{seed}: {on['vocab_acc']:.3f} vs {off['vocab_acc']:.3f}")
    secs = time.perf_counter() - t0
    verdict("ablation directionality", wins >= 4 and secs < 1800,
            f"ICSP-on >= ICSP-off vocab acc on {wins}/5 seeds [{'; '.join(rows)}] "
            f"runtime={secs / 60:.1f}min")


# -- determinism ----------------------------------------------------------

def test_determinism(verdict, tmp_path):
    cfg = toy(n_instances=32, n_eval_instances=16, max_iters=40, decay_steps=[30],
              warmup_iters=10, eval_interval=20)
    reports = []
    for run in ("a", "b"):
        tr, ev, _, _ = synthetic_splits(cfg)
        train(cfg, tr, ev, out_dir=tmp_path / run)
        reports.append((tmp_path / run / "metrics.json").read_bytes())
    same_preds = ((tmp_path / "a" / "predictions.jsonl").read_bytes()
                  == (tmp_path / "b" / "predictions.jsonl").read_bytes())
    verdict("determinism", reports[0] == reports[1] and same_preds,
            f"metrics.json identical={reports[0] == reports[1]} predictions identical="
            f"{same_preds} report={reports[0].decode().strip()}")


# -- masking and causality ------------------------------------------------

def test_masking_and_causality(verdict):
    cfg = toy()
    tr, _, _, _ = synthetic_splits(cfg)
    model = build_model(cfg, tr)
    batch = model.featurize(tr[:16])
    rng = np.random.default_rng(5)
    with no_grad():
        base = model.forward(batch)
        pert = model.forward(perturb_padding(model, batch, rng))
    keep = np.broadcast_to(batch.slot_mask[:, None, :], base.scores.shape)
    pad_ok = (base.scores.data[keep].tobytes() == pert.scores.data[keep].tobytes()
              and base.cls_output.data.tobytes() == pert.cls_output.data.tobytes())
    T = model.cfg.max_decode
    causal_ok = True
    for t in range(T - 1):
        prev = batch.prev_idx.copy()
        prev[:, t + 1 :] = rng.integers(0, base.scores.shape[-1], size=prev[:, t + 1 :].shape)
        with no_grad():
            got = model.forward(batch, prev).scores.data
        causal_ok &= got[:, : t + 1].tobytes() == base.scores.data[:, : t + 1].tobytes()
    verdict("masking/causality", pad_ok and causal_ok,
            f"padding bit-identical={pad_ok} future-token invariance exact={causal_ok} "
            f"({int((~batch.ocr_mask).sum())} padded OCR, {int((~batch.obj_mask).sum())} "
            f"padded object slots)")

