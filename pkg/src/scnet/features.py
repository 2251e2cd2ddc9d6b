"""Model inputs: box geometry, PHOC and word vectors, OCR/object/question embeddings."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import nn
from .config import PHOC_DIM, ModelConfig
from .params import ParameterStore
from .tensor import Tensor, check_finite

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# boxes and IoU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"inverted box {self}")

    def as_list(self) -> list[float]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


def normalize_box(raw_box, image_w: float, image_h: float) -> BoundingBox:
    """Pixel (xmin, ymin, xmax, ymax) -> image-relative box clamped to [0, 1]."""
    if not (image_w > 0 and image_h > 0):
        raise ValueError("image extents must be positive")
    x0, y0, x1, y1 = (float(v) for v in raw_box)
    if x0 > x1 or y0 > y1:
        raise ValueError(f"inverted box {raw_box}")

    def clamp(v):
        return min(max(v, 0.0), 1.0)

    return BoundingBox(clamp(x0 / image_w), clamp(y0 / image_h),
                       clamp(x1 / image_w), clamp(y1 / image_h))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_vector(own: BoundingBox, ocr_boxes, obj_boxes, max_ocr: int, max_obj: int) -> np.ndarray:
    """IoU of ``own`` with every OCR slot, then every object slot.

    ``ocr_boxes`` / ``obj_boxes`` hold the real regions in slot order; the
    remaining slots up to ``max_ocr`` / ``max_obj`` are padding and stay 0.
    """
    out = np.zeros(max_ocr + max_obj)
    for j, b in enumerate(ocr_boxes[:max_ocr]):
        out[j] = iou(own, b)
    for j, b in enumerate(obj_boxes[:max_obj]):
        out[max_ocr + j] = iou(own, b)
    return out


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([b.as_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU between box arrays ``(n, 4)`` and ``(m, 4)``."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# PHOC
# ---------------------------------------------------------------------------

PHOC_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
PHOC_LEVELS = (2, 3, 4, 5)
PHOC_BIGRAM_LEVEL = 2


def load_bigrams() -> list[str]:
    text = resources.files("scnet").joinpath("resources/bigrams.txt").read_text()
    grams = [line.strip() for line in text.splitlines() if line.strip()]
    if len(grams) != 50 or len(set(grams)) != 50:
        raise RuntimeError("bigram resource must list 50 distinct bigrams")
    return grams


_BIGRAMS = load_bigrams()
_BIGRAM_INDEX = {g: i for i, g in enumerate(_BIGRAMS)}
_CHAR_INDEX = {c: i for i, c in enumerate(PHOC_ALPHABET)}


def _phoc_clean(word: str) -> str:
    return "".join(c for c in word.lower() if c in _CHAR_INDEX)


def _occupies(start: int, width: int, n: int, region: int, level: int) -> bool:
    # does [start/n, (start+width)/n] overlap [region/level, (region+1)/level]
    # by at least half its own width? integer arithmetic after scaling by n*level
    lo = max(start * level, region * n)
    hi = min((start + width) * level, (region + 1) * n)
    return 2 * (hi - lo) >= width * level


def phoc_encode(word: str) -> np.ndarray:
    """604-bit pyramidal histogram of characters.

    Layout: levels 2..5, each region in order, 36 alphabet bits per region
    (504 bits); then 2 regions x 50 bigram bits (100 bits).
    """
    w = _phoc_clean(word)
    out = np.zeros(PHOC_DIM, dtype=np.float64)
    n = len(w)
    if n == 0:
        return out
    base = 0
    for level in PHOC_LEVELS:
        for i, c in enumerate(w):
            k = _CHAR_INDEX[c]
            for r in range(level):
                if _occupies(i, 1, n, r, level):
                    out[base + r * len(PHOC_ALPHABET) + k] = 1.0
        base += level * len(PHOC_ALPHABET)
    for i in range(n - 1):
        k = _BIGRAM_INDEX.get(w[i : i + 2])
        if k is None:
            continue
        for r in range(PHOC_BIGRAM_LEVEL):
            if _occupies(i, 2, n, r, PHOC_BIGRAM_LEVEL):
                out[base + r * len(_BIGRAMS) + k] = 1.0
    return out


# ---------------------------------------------------------------------------
# word vectors
# ---------------------------------------------------------------------------

class WordVectorError(ValueError):
    pass


@dataclass
class WordVectors:
    dim: int
    table: dict

    def __contains__(self, word):
        return word in self.table


def load_word_vectors(path) -> WordVectors:
    """Read the text format: header ``count dim`` then ``word v1 .. vdim`` lines."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise WordVectorError(f"{path}:1: expected header 'count dim'")
        count, dim = int(header[0]), int(header[1])
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise WordVectorError(
                    f"{path}:{lineno}: expected {dim} floats after the word, got {len(parts) - 1}"
                )
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise WordVectorError(f"{path}:{lineno}: {exc}") from None
    if len(table) != count:
        log.warning("%s: header says %d words, read %d", path, count, len(table))
    return WordVectors(dim=dim, table=table)


def _fnv1a64(s: str) -> int:
    h = 0xCBF29CE484222325
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def char_ngrams(word: str, lo: int = 3, hi: int = 6) -> list[str]:
    w = f"<{word}>"
    return [w[i : i + n] for n in range(lo, hi + 1) for i in range(len(w) - n + 1)]


def hashed_word_vector(word: str, dim: int) -> np.ndarray:
    """Subword fallback: +-1 per character n-gram into ``dim`` buckets."""
    grams = char_ngrams(word)
    out = np.zeros(dim)
    if not grams:
        return out
    for g in grams:
        h = _fnv1a64(g)
        out[h % dim] += 1.0 if (h >> 63) == 0 else -1.0
    return out / math.sqrt(len(grams))


def embed_word(table: WordVectors | None, word: str, dim: int | None = None) -> np.ndarray:
    if table is not None:
        vec = table.table.get(word)
        if vec is not None:
            return vec.copy()
        dim = table.dim
    if dim is None:
        raise ValueError("dim is required without a word-vector table")
    return hashed_word_vector(word, dim)


# ---------------------------------------------------------------------------
# OCR / object embeddings
# ---------------------------------------------------------------------------

def init_ocr_params(store: ParameterStore, rng, cfg: ModelConfig):
    d = cfg.d
    nn.init_linear(store, rng, "ocr.fr", cfg.d_fr, d)
    nn.init_linear(store, rng, "ocr.bx", 4, d)
    nn.init_linear(store, rng, "ocr.ft", cfg.d_ft, d)
    nn.init_linear(store, rng, "ocr.ph", cfg.d_phoc, d, bias=False)
    if cfg.use_sct:
        nn.init_linear(store, rng, "ocr.iou", cfg.max_ocr + cfg.max_obj, d)
    for ln in ("ocr.ln_fr", "ocr.ln_bx", "ocr.ln_ftph"):
        nn.init_ln(store, ln, d)


def init_object_params(store: ParameterStore, rng, cfg: ModelConfig):
    d = cfg.d
    nn.init_linear(store, rng, "obj.fr", cfg.d_fr, d)
    nn.init_linear(store, rng, "obj.bx", 4, d)
    if cfg.use_sct:
        nn.init_linear(store, rng, "obj.iou", cfg.max_ocr + cfg.max_obj, d)
    nn.init_ln(store, "obj.ln_fr", d)
    nn.init_ln(store, "obj.ln_bx", d)


def embed_ocr(store: ParameterStore, appearance, fasttext, phoc, box, iou_vec=None):
    """OCR visual, semantic and IoU parts for arrays shaped ``(..., N, dim)``.

    The box term LN(W_bx box) is one computation shared by both parts.
    Without ``iou_vec`` the IoU part is None.
    """
    box_term = nn.ln(store, "ocr.ln_bx", nn.linear(store, "ocr.bx", Tensor(box)))
    v_part = nn.ln(store, "ocr.ln_fr", nn.linear(store, "ocr.fr", Tensor(appearance))) + box_term
    sem = nn.linear(store, "ocr.ft", Tensor(fasttext)) + nn.linear(store, "ocr.ph", Tensor(phoc))
    s_part = nn.ln(store, "ocr.ln_ftph", sem) + box_term
    check_finite(v_part, "ocr v_part")
    check_finite(s_part, "ocr s_part")
    iou_part = None
    if iou_vec is not None:
        iou_part = check_finite(nn.linear(store, "ocr.iou", Tensor(iou_vec)), "ocr iou_part")
    return v_part, s_part, iou_part


def embed_object(store: ParameterStore, appearance, box, iou_vec=None):
    feat = (nn.ln(store, "obj.ln_fr", nn.linear(store, "obj.fr", Tensor(appearance)))
            + nn.ln(store, "obj.ln_bx", nn.linear(store, "obj.bx", Tensor(box))))
    check_finite(feat, "object feat")
    iou_part = None
    if iou_vec is not None:
        iou_part = check_finite(nn.linear(store, "obj.iou", Tensor(iou_vec)), "object iou_part")
    return feat, iou_part


# ---------------------------------------------------------------------------
# question encoder
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s']")

Q_PAD, Q_CLS, Q_UNK = "[PAD]", "[CLS]", "[UNK]"


def tokenize_question(text_or_tokens) -> list[str]:
    if isinstance(text_or_tokens, str):
        text_or_tokens = text_or_tokens.split()
    out = []
    for tok in text_or_tokens:
        tok = _PUNCT.sub(" ", tok.lower())
        out.extend(tok.split())
    return out


class QuestionVocab:
    """Question-word ids; ``[PAD]``=0, ``[CLS]``=1, ``[UNK]``=2."""

    def __init__(self, words):
        self.words = [Q_PAD, Q_CLS, Q_UNK] + [w for w in words if w not in (Q_PAD, Q_CLS, Q_UNK)]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_questions(cls, questions):
        seen = sorted({t for q in questions for t in tokenize_question(q)})
        return cls(seen)

    def __len__(self):
        return len(self.words)

    def encode(self, tokens, max_q: int) -> list[int]:
        """[CLS] followed by token ids, truncated to ``max_q`` positions."""
        ids = [1] + [self.index.get(t, 2) for t in tokenize_question(tokens)]
        if len(ids) > max_q:
            log.warning("question of %d tokens truncated to %d", len(ids), max_q)
            ids = ids[:max_q]
        return ids

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(words[3:])


@dataclass
class QuestionEncoding:
    tokens: np.ndarray  # (B, L) ids, 0 = pad
    mask: np.ndarray  # (B, L) bool
    base: Tensor
    q_v: Tensor | None
    q_s: Tensor | None
    cls_index: int = 0


def init_question_params(store: ParameterStore, rng, cfg: ModelConfig, q_vocab_size: int):
    d = cfg.d
    store.add("qenc.word_emb", rng.normal(0.0, nn.INIT_STD, size=(q_vocab_size, d)))
    store.add("qenc.pos_emb", rng.normal(0.0, nn.INIT_STD, size=(cfg.max_q, d)))
    nn.init_ln(store, "qenc.ln_emb", d)
    for i in range(cfg.q_layers):
        nn.init_transformer_layer(store, rng, f"qenc.layer{i}", d, cfg.ffn_mult * d)
    nn.init_ln(store, "qenc.ln_out", d)
    if not cfg.use_sct:
        return
    for branch in ("branch_v", "branch_s"):
        nn.init_ln(store, f"qenc.{branch}.ln", d)
        nn.init_mha(store, rng, f"qenc.{branch}.attn", d)


def encode_question(store: ParameterStore, token_ids: np.ndarray, mask: np.ndarray,
                    cfg: ModelConfig) -> QuestionEncoding:
    """Small trainable encoder plus the two branch-specific self-attention layers.

    ``token_ids`` is ``(B, max_q)`` with [CLS] at position 0 and 0 for padding.
    The branch layers only exist in SCT mode; otherwise q_v / q_s are None.
    """
    L = token_ids.shape[1]
    x = store["qenc.word_emb"][token_ids] + store["qenc.pos_emb"][np.arange(L)]
    x = nn.ln(store, "qenc.ln_emb", x)
    attn_mask = nn.key_mask_to_attn(mask)
    for i in range(cfg.q_layers):
        x = nn.transformer_layer(store, f"qenc.layer{i}", x, attn_mask, cfg.num_heads)
    base = nn.ln(store, "qenc.ln_out", x)
    if not cfg.use_sct:
        return QuestionEncoding(tokens=token_ids, mask=mask, base=base, q_v=None, q_s=None)
    branches = []
    for branch in ("branch_v", "branch_s"):
        h = nn.ln(store, f"qenc.{branch}.ln", base)
        branches.append(base + nn.mha(store, f"qenc.{branch}.attn", h, h, attn_mask, cfg.num_heads))
    return QuestionEncoding(tokens=token_ids, mask=mask, base=base, q_v=branches[0],
                            q_s=branches[1])
