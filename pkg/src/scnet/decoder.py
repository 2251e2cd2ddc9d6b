"""Iterative answer decoding with semantic guidance.

Candidate scores are laid out ``[OCR slots 0..N-1 | vocab 0..M-1]``. The
semantic prediction ``ans_se`` is computed once from the [CLS] output and
reused at every decoding step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import ModelConfig
from .data import END, Vocabulary, normalize_answer
from .params import ParameterStore
from .tensor import Tensor, concat, gelu, where

NEG_INF = -np.inf


@dataclass
class AnswerSpace:
    vocab: Vocabulary
    ocr_texts: list[str]  # normalized recognized text per real OCR slot
    n_slots: int  # padded OCR slot count N

    @property
    def size(self) -> int:
        return self.n_slots + len(self.vocab)

    def word(self, index: int, raw_ocr: list[str] | None = None) -> tuple[str, str]:
        """(emitted text, source) for a candidate index."""
        if index < self.n_slots:
            texts = raw_ocr if raw_ocr is not None else self.ocr_texts
            return texts[index], "ocr"
        return self.vocab.words[index - self.n_slots], "vocab"


def init_decoder(store: ParameterStore, rng, cfg: ModelConfig, n_vocab: int):
    d = cfg.d
    store.add("dec.vocab_emb", rng.normal(0.0, nn.INIT_STD, size=(n_vocab, d)))
    store.add("dec.step_emb", rng.normal(0.0, nn.INIT_STD, size=(cfg.max_decode, d)))
    nn.init_ln(store, "dec.ln_in", d)
    nn.init_linear(store, rng, "dec.ans", d, d)
    nn.init_linear(store, rng, "dec.ocr", d, d)
    nn.init_linear(store, rng, "dec.voc", d, n_vocab)
    if cfg.use_icsp:
        nn.init_linear(store, rng, "icsp.mlp2", d, cfg.icsp_hidden)
        nn.init_linear(store, rng, "icsp.mlp1", cfg.icsp_hidden, cfg.d_ft)
        nn.init_linear(store, rng, "icsp.se", cfg.d_ft, d)
        store.add("icsp.alpha_se", np.full(d, cfg.alpha_se_init))


def predict_answer_semantics(store: ParameterStore, cls_output: Tensor,
                             activation: str = "none") -> Tensor:
    """ans_se = W1 (W2 cls + b2) + b1, optionally with GELU between the layers."""
    h = nn.linear(store, "icsp.mlp2", cls_output)
    if activation == "gelu":
        h = gelu(h)
    return nn.linear(store, "icsp.mlp1", h)


def fuse_semantic_guidance(store: ParameterStore, y_dec: Tensor, ans_se: Tensor) -> Tensor:
    """z_ans = y_dec + alpha_se * (W_se ans_se + b_se).

    ``y_dec`` is ``(B, T, d)``; ``ans_se`` ``(B, d_ft)`` is broadcast over steps.
    """
    guide = nn.linear(store, "icsp.se", ans_se)
    B, d = guide.shape
    return y_dec + store["icsp.alpha_se"] * guide.reshape(B, 1, d)


def score_candidates(store: ParameterStore, z_ans: Tensor, ocr_outputs: Tensor,
                     ocr_mask: np.ndarray) -> Tensor:
    """Bilinear OCR-copy scores then vocabulary scores, masked slots at -inf.

    ``z_ans`` ``(B, T, d)``, ``ocr_outputs`` ``(B, N, d)`` -> ``(B, T, N + M)``.
    """
    a = nn.linear(store, "dec.ans", z_ans)
    o = nn.linear(store, "dec.ocr", ocr_outputs)
    s_ocr = a @ o.swapaxes(-1, -2)  # (B, T, N)
    s_ocr = where(np.asarray(ocr_mask, bool)[:, None, :], s_ocr, NEG_INF)
    return concat([s_ocr, nn.linear(store, "dec.voc", z_ans)], axis=-1)


def select(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; exact ties go to the lowest index (OCR first)."""
    return np.argmax(scores, axis=-1)


def answer_words(answer: str, max_decode: int) -> list[str]:
    return normalize_answer(answer).split()[: max_decode - 1]


def answer_targets(gt_answer: str, vocab: Vocabulary, ocr_texts: list[str], n_slots: int,
                   max_decode: int):
    """Per-step multi-hot targets over ``[OCR slots | vocab]``.

    Returns ``(targets (T, N+M), step_mask (T,), unreachable)``. The answer is
    split on whitespace, one word per step, followed by the end token.
    """
    M = len(vocab)
    words = answer_words(gt_answer, max_decode) + [END]
    targets = np.zeros((max_decode, n_slots + M))
    step_mask = np.zeros(max_decode, dtype=bool)
    unreachable = False
    norm_ocr = [normalize_answer(t) for t in ocr_texts]
    for t, w in enumerate(words):
        step_mask[t] = True
        for j, tw in enumerate(norm_ocr[:n_slots]):
            if tw == w:
                targets[t, j] = 1.0
        k = vocab.word_to_index.get(w)
        if k is not None:
            targets[t, n_slots + k] = 1.0
        if not targets[t].any():
            unreachable = True
    return targets, step_mask, unreachable


def teacher_inputs(targets: np.ndarray, step_mask: np.ndarray, n_slots: int,
                   vocab: Vocabulary) -> np.ndarray:
    """Previous-answer candidate index per step: begin, then gt word of step t-1.

    A ground-truth word is fed back as its first hot candidate (OCR before
    vocab, matching argmax tie-breaking); unreachable words feed the pad row.
    """
    T = targets.shape[0]
    prev = np.full(T, n_slots + vocab.pad, dtype=np.int64)
    prev[0] = n_slots + vocab.begin
    for t in range(1, T):
        if not step_mask[t - 1]:
            continue
        hot = np.flatnonzero(targets[t - 1])
        prev[t] = hot[0] if hot.size else n_slots + vocab.pad
    return prev


def decoder_inputs(store: ParameterStore, ocr_encoded: Tensor, prev_idx: np.ndarray) -> Tensor:
    """Embed previous answers: OCR copies use the encoded OCR state, vocab
    words their learned row; plus a step-position embedding."""
    B, N, d = ocr_encoded.shape
    vocab_emb = store["dec.vocab_emb"]
    M = vocab_emb.shape[0]
    T = prev_idx.shape[1]
    cand = concat([ocr_encoded, vocab_emb.reshape(1, M, d) + np.zeros((B, 1, 1))], axis=1)
    rows = np.repeat(np.arange(B)[:, None], T, axis=1)
    prev = cand[rows, prev_idx]
    x = prev + store["dec.step_emb"][np.arange(T)]
    return nn.ln(store, "dec.ln_in", x)
