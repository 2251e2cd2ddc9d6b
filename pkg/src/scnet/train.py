"""Training, evaluation, gradient checking and the ablation grid.

Everything here is deterministic given the resolved :class:`RunConfig`:
parameter init draws from ``(init_seed, seed)`` and minibatch order from
``seed``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, replace
from .data import (
    SynthConfig,
    Vocabulary,
    build_vocabulary,
    generate_dataset,
    reference_answers,
    training_answer,
)
from .features import QuestionVocab, WordVectors, load_word_vectors
from .gradcheck import GradCheckReport, grad_check
from .metrics import EvalRecord, metrics_report, source_of
from .model import Batch, SCNet
from .optim import Adam, lr_at
from .params import load_checkpoint, save_checkpoint
from .sct import input_lengths
from .tensor import NonFiniteError, no_grad

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, last_good: str | None, reason: str):
        super().__init__(f"non-finite loss at iteration {iteration} ({reason}); "
                         f"last good checkpoint: {last_good or 'none'}")
        self.iteration = iteration
        self.last_good = last_good


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def word_table(cfg: RunConfig) -> WordVectors | None:
    return load_word_vectors(cfg.word_vectors_path) if cfg.word_vectors_path else None


def build_model(cfg: RunConfig, train_set, table: WordVectors | None = None) -> SCNet:
    m = cfg.model
    vocab = build_vocabulary([training_answer(i) for i in train_set], m.n_vocab, table, m.d_ft)
    q_vocab = QuestionVocab.from_questions([i.question_tokens for i in train_set])
    return SCNet(m, vocab, q_vocab, cfg.loss, seed=cfg.seed)


def save_run_files(out_dir: Path, cfg: RunConfig, model: SCNet):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    model.vocab.save(out_dir / "vocab.txt")
    model.q_vocab.save(out_dir / "question_vocab.txt")


def load_model(cfg: RunConfig, run_dir, checkpoint=None) -> SCNet:
    """Rebuild a trained model from the vocab files next to its checkpoint."""
    run_dir = Path(run_dir)
    m = cfg.model
    vocab = Vocabulary.load(run_dir / "vocab.txt", word_table(cfg), m.d_ft)
    q_vocab = QuestionVocab.load(run_dir / "question_vocab.txt")
    model = SCNet(m, vocab, q_vocab, cfg.loss, seed=cfg.seed)
    if checkpoint is not None:
        load_checkpoint(checkpoint, model.store)
    return model


def synthetic_splits(cfg: RunConfig, seed: int | None = None, table=None):
    """Train instances ``[0, n)`` and held-out instances ``[n, n + n_eval)`` of one generator."""
    seed = cfg.seed if seed is None else seed
    sc = SynthConfig(seed=seed, n_instances=cfg.n_instances + cfg.n_eval_instances,
                     n_vocab=cfg.model.n_vocab, ocr_error_rate=cfg.ocr_error_rate,
                     bias_strength=cfg.bias_strength,
                     feature_noise_sigma=cfg.feature_noise_sigma, d_fr=cfg.model.d_fr,
                     d_ft=cfg.model.d_ft,
                     max_ocr_tokens=min(6, cfg.model.max_ocr),
                     max_objects=min(6, cfg.model.max_obj))
    insts, notes = generate_dataset(sc, table)
    n = cfg.n_instances
    return insts[:n], insts[n:], notes[:n], notes[n:]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_all(model: SCNet, instances, topk: int = 0) -> list[dict]:
    preds = []
    for lo in range(0, len(instances), EVAL_CHUNK):
        batch = model.featurize(instances[lo : lo + EVAL_CHUNK])
        preds.extend(model.predict(batch, topk=topk))
    return preds


def eval_records(instances, predictions) -> list[EvalRecord]:
    out = []
    for inst, p in zip(instances, predictions):
        refs, padded = reference_answers(inst)
        out.append(EvalRecord(instance_id=inst.instance_id, prediction=p["answer"], references=refs,
                              source=source_of(p["per_step_source"]), padded=padded))
    return out


def evaluate(model: SCNet, instances, cfg: RunConfig, predictions_path=None) -> dict:
    preds = predict_all(model, instances, cfg.topk)
    if predictions_path is not None:
        with open(predictions_path, "w", encoding="utf-8") as fh:
            for p in preds:
                fh.write(json.dumps(p, sort_keys=True) + "\n")
    return metrics_report(eval_records(instances, preds), cfg.hash(), cfg.anls_threshold)


def teacher_forced_accuracy(model: SCNet, batch: Batch) -> float:
    hit = total = 0
    for lo in range(0, len(batch), EVAL_CHUNK):
        h, t = model.teacher_forced_accuracy(batch.subset(np.arange(lo, min(lo + EVAL_CHUNK,
                                                                             len(batch)))))
        hit, total = hit + h, total + t
    return hit / max(total, 1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SCNet
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    iterations: int = 0
    tf_accuracy: float | None = None
    best_metric: float | None = None
    metrics: dict | None = None


def _batches(n: int, size: int, rng: np.random.Generator):
    """Endless epoch-shuffled minibatch index arrays (no shuffling for a single full batch)."""
    while True:
        order = np.arange(n) if size >= n else rng.permutation(n)
        for lo in range(0, n, size):
            yield order[lo : lo + size]


def train(cfg: RunConfig, train_set, eval_set=None, out_dir=None, model: SCNet | None = None,
          max_iters: int | None = None, stop_when=None, table=None) -> TrainResult:
    """Teacher-forced Adam training on ``train_set``.

    ``stop_when(result, iteration)`` may end training early; it is polled at
    every eval interval. Logs go to ``out_dir/train_log.jsonl`` when given.
    """
    if not train_set:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    model = model or build_model(cfg, train_set, table)
    if out is not None:
        save_run_files(out, cfg, model)
    full = model.featurize(train_set)
    if full.unreachable.any():
        log.warning("%d of %d training answers are not fully reachable",
                    int(full.unreachable.sum()), len(full))
    opt = Adam(model.store, cfg.optim)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(full), cfg.optim.batch_size, rng)
    iters = cfg.optim.max_iters if max_iters is None else max_iters
    res = TrainResult(model=model)
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None
    last_good = None
    try:
        for it in range(iters):
            batch = full.subset(next(batches)) if cfg.optim.batch_size < len(full) else full
            lr = lr_at(it, cfg.optim)
            model.store.zero_grad()
            try:
                lo = model.loss(batch)
                lo.l_final.backward()
                opt.step(lr)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingAborted(it, last_good, str(exc)) from exc
            rep = lo.contrastive
            entry = {"iter": it, "l_bce": lo.l_bce, "l_s": lo.l_s,
                     "l_final": float(lo.l_final.data),
                     "skipped_instances": rep.skipped if rep else 0,
                     "clamped_instances": rep.clamped if rep else 0, "lr": lr}
            res.history.append(entry)
            if it == 0:
                res.initial_loss = entry["l_final"]
            if log_fh and (it % cfg.log_interval == 0 or it == iters - 1):
                log_fh.write(json.dumps(entry) + "\n")
            done = it == iters - 1
            if out is not None and (it + 1) % cfg.checkpoint_interval == 0:
                last_good = str(out / f"checkpoint_{it + 1}.ckpt")
                save_checkpoint(last_good, model.store)
            if (it + 1) % cfg.eval_interval == 0 or done:
                res.tf_accuracy = teacher_forced_accuracy(model, full)
                ev = {"iter": it, "tf_accuracy": res.tf_accuracy}
                if eval_set:
                    ev["metrics"] = evaluate(model, eval_set, cfg)
                    score = ev["metrics"]["accuracy"]
                else:
                    score = res.tf_accuracy
                res.evals.append(ev)
                if log_fh:
                    log_fh.write(json.dumps({"eval": ev}, sort_keys=True) + "\n")
                if out is not None and (res.best_metric is None or score > res.best_metric):
                    save_checkpoint(out / "checkpoint_best.ckpt", model.store)
                if res.best_metric is None or score > res.best_metric:
                    res.best_metric = score
                if stop_when is not None and not done and stop_when(res, it):
                    res.iterations = it + 1
                    break
            res.iterations = it + 1
    finally:
        if log_fh:
            log_fh.close()
    with no_grad():
        res.final_loss = float(model.loss(full).l_final.data)
    res.tf_accuracy = teacher_forced_accuracy(model, full)
    if out is not None:
        save_checkpoint(out / "checkpoint_final.ckpt", model.store)
    if eval_set:
        res.metrics = evaluate(model, eval_set, cfg,
                               out / "predictions.jsonl" if out is not None else None)
        if out is not None:
            (out / "metrics.json").write_text(json.dumps(res.metrics, sort_keys=True) + "\n")
    return res


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckRun:
    report: GradCheckReport
    seconds: float
    coverage: float
    clamped: int
    tol: float

    @property
    def passed(self) -> bool:
        return not self.report.failing(self.tol) and self.coverage == 1.0


def run_gradcheck(cfg: RunConfig, instances, model: SCNet | None = None) -> GradCheckRun:
    """Finite-difference check of L_final over every parameter of a fresh model."""
    if not instances:
        raise ValueError("no instances to check")
    chosen = instances[: cfg.gradcheck_instances]
    model = model or build_model(cfg, instances)
    batch = model.featurize(chosen)
    with no_grad():
        first = model.loss(batch)
    clamped = first.contrastive.clamped if first.contrastive else 0
    if clamped:
        log.warning("%d instances hit the contrastive floor; their Ls gradient is zero", clamped)
    t0 = time.perf_counter()
    report = grad_check(lambda _: model.loss(batch).l_final, model.store,
                        max_per_param=cfg.gradcheck_per_param, seed=cfg.seed)
    secs = time.perf_counter() - t0
    return GradCheckRun(report=report, seconds=secs, coverage=report.coverage(model.store),
                        clamped=clamped, tol=cfg.gradcheck_tol)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

CELLS = ((True, True), (True, False), (False, True), (False, False))


def cell_name(use_sct: bool, use_icsp: bool) -> str:
    return f"{'SCT' if use_sct else 'noSCT'}+{'ICSP' if use_icsp else 'noICSP'}"


def ablate(cfg: RunConfig, train_set, eval_set, cells=CELLS, out_dir=None,
           max_iters: int | None = None, table=None) -> list[dict]:
    """Train and evaluate each (use_sct, use_icsp) cell with the shared seed."""
    rows = []
    for use_sct, use_icsp in cells:
        cell_cfg = replace(cfg, use_sct=use_sct, use_icsp=use_icsp)
        name = cell_name(use_sct, use_icsp)
        sub = Path(out_dir) / name if out_dir is not None else None
        t0 = time.perf_counter()
        res = train(cell_cfg, train_set, eval_set or train_set, out_dir=sub,
                    max_iters=max_iters, table=table)
        m = res.metrics
        rows.append({"cell": name, "use_sct": use_sct, "use_icsp": use_icsp,
                     "seq_len": input_lengths(cell_cfg.model, baseline=not use_sct)[1],
                     "accuracy": m["accuracy"], "anls": m["anls"], "vocab_acc": m["vocab_acc"],
                     "ocr_acc": m["ocr_acc"], "n_instances": m["n_instances"],
                     "final_loss": res.final_loss, "seconds": time.perf_counter() - t0})
    return rows


def format_table(rows) -> str:
    head = f"{'cell':<14}{'len':>5}{'acc':>8}{'anls':>8}{'vocab':>8}{'ocr':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['cell']:<14}{r['seq_len']:>5}{100 * r['accuracy']:>8.2f}"
                     f"{r['anls']:>8.3f}{100 * r['vocab_acc']:>8.2f}{100 * r['ocr_acc']:>8.2f}")
    return "\n".join(lines)
