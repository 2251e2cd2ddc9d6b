"""Instances, JSONL datasets, the answer vocabulary and the synthetic generator."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .features import (
    BoundingBox,
    WordVectors,
    embed_word,
    hashed_word_vector,
    normalize_box,
    phoc_encode,
)

log = logging.getLogger(__name__)

PAD, BEGIN, END = "<pad>", "<begin>", "<end>"
SPECIALS = (PAD, BEGIN, END)
N_REFERENCES = 10


# ---------------------------------------------------------------------------
# answer normalization
# ---------------------------------------------------------------------------

_STRIP = "".join(chr(c) for c in range(33, 127) if not chr(c).isalnum())


def normalize_answer(text: str) -> str:
    """Lowercase, strip surrounding punctuation, collapse whitespace."""
    return " ".join(text.lower().strip().strip(_STRIP).split())


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class OcrTokenInput:
    text: str
    appearance: np.ndarray
    fasttext: np.ndarray
    phoc: np.ndarray
    box: BoundingBox

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "appearance": [float(v) for v in self.appearance],
            "fasttext": [float(v) for v in self.fasttext],
            "phoc": [int(v) for v in self.phoc],
            "box": _box_dict(self.box),
        }


@dataclass(eq=False)
class ObjectRegionInput:
    appearance: np.ndarray
    box: BoundingBox

    def to_dict(self) -> dict:
        return {"appearance": [float(v) for v in self.appearance], "box": _box_dict(self.box)}


@dataclass(eq=False)
class VqaInstance:
    instance_id: str
    image_w: float
    image_h: float
    question_tokens: list[str]
    ocr: list[OcrTokenInput]
    objects: list[ObjectRegionInput]
    answers: list[str]

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "image_w": float(self.image_w),
            "image_h": float(self.image_h),
            "question_tokens": list(self.question_tokens),
            "ocr": [t.to_dict() for t in self.ocr],
            "objects": [o.to_dict() for o in self.objects],
            "answers": list(self.answers),
        }

    def __eq__(self, other):
        if not isinstance(other, VqaInstance):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _box_dict(b: BoundingBox) -> dict:
    return {"xmin": float(b.xmin), "ymin": float(b.ymin), "xmax": float(b.xmax),
            "ymax": float(b.ymax)}


# ---------------------------------------------------------------------------
# JSONL IO
# ---------------------------------------------------------------------------

class DatasetError(ValueError):
    pass


def _need(obj, key, path, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{path}: missing field {key!r}")
    val = obj[key]
    sub = f"{path}.{key}" if path else key
    if kind == "number":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise DatasetError(f"{sub}: expected a number")
    elif kind == "string":
        if not isinstance(val, str):
            raise DatasetError(f"{sub}: expected a string")
    elif kind == "list":
        if not isinstance(val, list):
            raise DatasetError(f"{sub}: expected a list")
    elif kind == "object":
        if not isinstance(val, dict):
            raise DatasetError(f"{sub}: expected an object")
    return val, sub


def _vector(obj, key, path) -> np.ndarray:
    val, sub = _need(obj, key, path, "list")
    for i, v in enumerate(val):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DatasetError(f"{sub}[{i}]: expected a number")
    return np.array(val, dtype=np.float64)


def _box(obj, path) -> BoundingBox:
    raw, sub = _need(obj, "box", path, "object")
    vals = [_need(raw, k, sub, "number")[0] for k in ("xmin", "ymin", "xmax", "ymax")]
    try:
        return BoundingBox(*(float(v) for v in vals))
    except ValueError as exc:
        raise DatasetError(f"{sub}: {exc}") from None


def instance_from_dict(d: dict) -> VqaInstance:
    if not isinstance(d, dict):
        raise DatasetError("record: expected a JSON object")
    iid, _ = _need(d, "instance_id", "", "string")
    w, _ = _need(d, "image_w", "", "number")
    h, _ = _need(d, "image_h", "", "number")
    qt, qsub = _need(d, "question_tokens", "", "list")
    for i, t in enumerate(qt):
        if not isinstance(t, str):
            raise DatasetError(f"{qsub}[{i}]: expected a string")
    ocr_raw, _ = _need(d, "ocr", "", "list")
    ocr = []
    for i, t in enumerate(ocr_raw):
        p = f"ocr[{i}]"
        text, _ = _need(t, "text", p, "string")
        ocr.append(OcrTokenInput(text=text, appearance=_vector(t, "appearance", p),
                                 fasttext=_vector(t, "fasttext", p),
                                 phoc=_vector(t, "phoc", p), box=_box(t, p)))
    obj_raw, _ = _need(d, "objects", "", "list")
    objects = []
    for i, o in enumerate(obj_raw):
        p = f"objects[{i}]"
        objects.append(ObjectRegionInput(appearance=_vector(o, "appearance", p), box=_box(o, p)))
    answers, asub = _need(d, "answers", "", "list")
    for i, a in enumerate(answers):
        if not isinstance(a, str):
            raise DatasetError(f"{asub}[{i}]: expected a string")
    return VqaInstance(instance_id=iid, image_w=float(w), image_h=float(h),
                       question_tokens=list(qt), ocr=ocr, objects=objects, answers=list(answers))


def dumps_instance(inst: VqaInstance) -> str:
    return json.dumps(inst.to_dict(), separators=(",", ":"))


def save_dataset(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")


def load_dataset(path) -> list[VqaInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                out.append(instance_from_dict(rec))
            except DatasetError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return out


def reference_answers(inst: VqaInstance) -> tuple[list[str], bool]:
    """Exactly 10 normalized references, padded by repetition (flag set if padded)."""
    refs = [normalize_answer(a) for a in inst.answers]
    if not refs:
        raise DatasetError(f"{inst.instance_id}: no answers")
    padded = len(refs) < N_REFERENCES
    while len(refs) < N_REFERENCES:
        refs.append(refs[len(refs) % len(inst.answers)])
    return refs[:N_REFERENCES], padded


def training_answer(inst: VqaInstance) -> str:
    """Most frequent normalized reference; ties go to the earliest."""
    refs = [normalize_answer(a) for a in inst.answers]
    counts = Counter(refs)
    best = max(counts.values())
    return next(r for r in refs if counts[r] == best)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    words: list[str]
    embeddings: np.ndarray
    word_to_index: dict = field(init=False)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary words")
        if tuple(self.words[:3]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.word_to_index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @property
    def pad(self):
        return 0

    @property
    def begin(self):
        return 1

    @property
    def end(self):
        return 2

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path, table: WordVectors | None, d_ft: int):
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(words, _embed_all(words, table, d_ft))


def _embed_all(words, table, d_ft) -> np.ndarray:
    return np.stack([embed_word(table, w, d_ft) for w in words]) if words else np.zeros((0, d_ft))


def build_vocabulary(answers, M: int, table: WordVectors | None = None,
                     d_ft: int = 300) -> Vocabulary:
    """Specials plus the ``M - 3`` most frequent answer words (ties lexicographic)."""
    if M < 4:
        raise ValueError("M must leave room for at least one word after the specials")
    counts = Counter(w for a in answers for w in normalize_answer(a).split())
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: M - len(SPECIALS)]]
    if len(words) < M - len(SPECIALS):
        log.warning("only %d distinct answer words; vocabulary has %d entries instead of %d",
                    len(words), len(words) + 3, M)
    words = list(SPECIALS) + words
    return Vocabulary(words, _embed_all(words, table, d_ft))


# ---------------------------------------------------------------------------
# portable PRNG
# ---------------------------------------------------------------------------

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood) with a per-index split.

    ``next_u64``: state += 0x9E3779B97F4A7C15; return mix64(state).
    ``split(seed, index)`` seeds a child with mix64(seed) ^ mix64((index+1)*golden).
    Uniforms take the top 53 bits; bounded integers use the high word of a
    128-bit product; normals use Box-Muller with no cached second value.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def split(cls, seed: int, index: int) -> "SplitMix64":
        return cls(mix64(seed & MASK64) ^ mix64(((index + 1) * GOLDEN) & MASK64))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return (self.next_u64() * n) >> 64

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def normal(self) -> float:
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

ATTRIBUTES = ("brand", "name", "city", "team", "title", "word")
NOUNS = ("laptop", "sign", "bottle", "shirt", "book", "bus", "poster", "store")
TRIGGER_NOUN = NOUNS[0]
CORRUPT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
_CONSONANTS = "bcdfghklmnprstvwz"
_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    seed: int = 0
    n_instances: int = 32
    n_vocab: int = 100
    ocr_error_rate: float = 0.0
    bias_strength: float = 0.0
    feature_noise_sigma: float = 0.3
    d_fr: int = 32
    d_ft: int = 16
    max_ocr_tokens: int = 6
    max_objects: int = 6
    code_answer_rate: float = 0.25
    signature_strength: float = 1.0  # per-dim scale of the true-text appearance signature

    def __post_init__(self):
        for name in ("ocr_error_rate", "bias_strength", "code_answer_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_ocr_tokens < 3:
            raise ValueError("max_ocr_tokens must be at least 3")


@dataclass
class Annotations:
    """Generator-side ground truth that the model never sees."""

    answer_slot: int
    true_texts: list[str]
    answer_word: str
    attr: str
    noun: str
    is_code_answer: bool
    is_ocr_trap: bool
    is_bias_trap: bool


class Lexicon:
    """Per-seed pronounceable answer words, grouped by attribute class."""

    def __init__(self, cfg: SynthConfig):
        rng = SplitMix64.split(cfg.seed, -1)
        # words plus codes never exceed the vocabulary's free slots, so every
        # answer that occurs in a training set can be given a vocabulary entry
        n_slots = max(cfg.n_vocab - len(SPECIALS), 2 * len(ATTRIBUTES) + 2)
        n_codes = max(1, n_slots // 8)
        n_words = n_slots - n_codes
        seen: set[str] = set()
        words: list[str] = []
        while len(words) < n_words:
            w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS)
                        for _ in range(2 + rng.randint(2)))
            if rng.random() < 0.5:
                w += rng.choice(_CONSONANTS)
            if w not in seen and w not in ATTRIBUTES and w not in NOUNS:
                seen.add(w)
                words.append(w)
        codes: list[str] = []
        while len(codes) < n_codes:
            c = "".join(rng.choice("0123456789") for _ in range(3 + rng.randint(3)))
            if c not in codes:
                codes.append(c)
        self.codes = codes
        self.by_attr = [words[i :: len(ATTRIBUTES)] for i in range(len(ATTRIBUTES))]
        self.distractor = [ws[0] for ws in self.by_attr]
        self.class_means = np.stack([rng.normals(cfg.d_fr) for _ in ATTRIBUTES])
        self.obj_means = np.stack([rng.normals(cfg.d_fr) for _ in NOUNS])

    @property
    def words(self) -> list[str]:
        return [w for ws in self.by_attr for w in ws]


def corrupt_text(text: str, rate: float, rng: SplitMix64) -> str:
    """Substitute each character with probability ``rate`` by a different one."""
    out = []
    for c in text:
        if rng.random() < rate:
            pool = CORRUPT_ALPHABET.replace(c, "")
            out.append(pool[rng.randint(len(pool))])
        else:
            out.append(c)
    return "".join(out)


def _random_box(rng: SplitMix64, w: float, h: float, min_frac=0.05, max_frac=0.3):
    bw = w * (min_frac + (max_frac - min_frac) * rng.random())
    bh = h * (min_frac + (max_frac - min_frac) * rng.random())
    x0 = (w - bw) * rng.random()
    y0 = (h - bh) * rng.random()
    return (x0, y0, x0 + bw, y0 + bh)


def _box_inside(rng: SplitMix64, outer, frac=0.5):
    x0, y0, x1, y1 = outer
    bw, bh = (x1 - x0) * frac, (y1 - y0) * frac
    ox = x0 + (x1 - x0 - bw) * rng.random()
    oy = y0 + (y1 - y0 - bh) * rng.random()
    return (ox, oy, ox + bw, oy + bh)


_LEXICON_CACHE: dict = {}


def lexicon_for(cfg: SynthConfig) -> Lexicon:
    key = (cfg.seed, cfg.n_vocab, cfg.d_fr)
    if key not in _LEXICON_CACHE:
        _LEXICON_CACHE[key] = Lexicon(cfg)
    return _LEXICON_CACHE[key]


def generate_instance(cfg: SynthConfig, index: int,
                      table: WordVectors | None = None) -> tuple[VqaInstance, Annotations]:
    """Deterministic synthetic instance number ``index`` for ``cfg``.

    The answer OCR token has the appearance class of the question attribute
    and sits inside an object of the question noun's class. Appearance also
    carries a signature of the token's true text, so the true word stays
    recoverable when its recognized text is corrupted. Questions about the
    trigger noun are answered by that attribute's distractor word with
    probability ``bias_strength``; otherwise the distractor is planted as a
    non-answer token with that probability.
    """
    if not 0 <= index < cfg.n_instances:
        raise IndexError(f"index {index} outside [0, {cfg.n_instances})")
    lex = lexicon_for(cfg)
    rng = SplitMix64.split(cfg.seed, index)
    img_w = float(320 + 32 * rng.randint(21))
    img_h = float(240 + 32 * rng.randint(16))
    a = rng.randint(len(ATTRIBUTES))
    noun = rng.randint(len(NOUNS))
    trigger = NOUNS[noun] == TRIGGER_NOUN
    biased = trigger and rng.random() < cfg.bias_strength
    is_code = (not biased) and rng.random() < cfg.code_answer_rate
    if biased:
        answer = lex.distractor[a]
    elif is_code:
        answer = rng.choice(lex.codes)
    else:
        # the distractor only ever answers through the bias path
        answer = rng.choice(lex.by_attr[a][1:])

    n_ocr = 3 + rng.randint(cfg.max_ocr_tokens - 2)
    texts = [answer]
    classes = [a]
    plant = trigger and not biased and rng.random() < cfg.bias_strength
    while len(texts) < n_ocr:
        other = (a + 1 + rng.randint(len(ATTRIBUTES) - 1)) % len(ATTRIBUTES)
        if plant and len(texts) == 1:
            word = lex.distractor[a]
        else:
            word = rng.choice(lex.by_attr[other])
        texts.append(word)
        classes.append(other)
    order = list(range(n_ocr))
    for i in range(n_ocr - 1, 0, -1):  # Fisher-Yates
        j = rng.randint(i + 1)
        order[i], order[j] = order[j], order[i]
    texts = [texts[k] for k in order]
    classes = [classes[k] for k in order]
    answer_slot = order.index(0)

    n_obj = 1 + rng.randint(cfg.max_objects)
    obj_boxes = [_random_box(rng, img_w, img_h, 0.2, 0.5) for _ in range(n_obj)]
    obj_classes = [rng.randint(len(NOUNS)) for _ in range(n_obj)]
    anchor = rng.randint(n_obj)
    obj_classes[anchor] = noun

    sigma = cfg.feature_noise_sigma
    ocr = []
    recognized = []
    for slot, (text, cls) in enumerate(zip(texts, classes)):
        raw = (_box_inside(rng, obj_boxes[anchor]) if slot == answer_slot
               else _random_box(rng, img_w, img_h, 0.05, 0.15))
        seen = corrupt_text(text, cfg.ocr_error_rate, rng)
        recognized.append(seen)
        signature = cfg.signature_strength * np.sqrt(cfg.d_fr) * hashed_word_vector(text, cfg.d_fr)
        appearance = (lex.class_means[cls] + signature
                      + sigma * rng.normals(cfg.d_fr))
        ocr.append(OcrTokenInput(text=seen, appearance=appearance,
                                 fasttext=embed_word(table, seen, cfg.d_ft),
                                 phoc=phoc_encode(seen), box=normalize_box(raw, img_w, img_h)))
    objects = [
        ObjectRegionInput(appearance=lex.obj_means[c] + sigma * rng.normals(cfg.d_fr),
                          box=normalize_box(b, img_w, img_h))
        for b, c in zip(obj_boxes, obj_classes)
    ]
    inst = VqaInstance(
        instance_id=f"synth-{cfg.seed}-{index}",
        image_w=img_w,
        image_h=img_h,
        question_tokens=["what", ATTRIBUTES[a], "is", "the", NOUNS[noun]],
        ocr=ocr,
        objects=objects,
        answers=[answer] * N_REFERENCES,
    )
    notes = Annotations(
        answer_slot=answer_slot,
        true_texts=texts,
        answer_word=answer,
        attr=ATTRIBUTES[a],
        noun=NOUNS[noun],
        is_code_answer=is_code,
        is_ocr_trap=(not is_code) and recognized[answer_slot] != answer,
        is_bias_trap=plant,
    )
    return inst, notes


def generate_dataset(cfg: SynthConfig, table: WordVectors | None = None, start: int = 0,
                     stop: int | None = None):
    stop = cfg.n_instances if stop is None else stop
    pairs = [generate_instance(cfg, i, table) for i in range(start, stop)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def reachability(instances, vocab: Vocabulary) -> float:
    """Fraction of instances whose every answer word is in the vocab or OCR text."""
    if not instances:
        return float("nan")
    ok = 0
    for inst in instances:
        ocr_words = {normalize_answer(t.text) for t in inst.ocr}
        words = training_answer(inst).split()
        ok += all(w in vocab.word_to_index or w in ocr_words for w in words)
    return ok / len(instances)
