"""SC-Net assembly: batching, forward pass, training objective and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import decoder as dec
from .config import LossConfig, ModelConfig
from .data import Vocabulary, VqaInstance, normalize_answer, training_answer
from .features import (
    QuestionVocab,
    boxes_to_array,
    embed_object,
    embed_ocr,
    encode_question,
    init_object_params,
    init_ocr_params,
    init_question_params,
    pairwise_iou,
)
from .losses import ContrastiveReport, bce_loss, contrastive_loss, total_loss
from .params import ParameterStore
from .sct import EncodedSequence, EncoderInputs, encode_inputs, init_encoder, run_plain
from .tensor import Tensor, check_finite, no_grad


@dataclass
class Batch:
    instances: list
    q_ids: np.ndarray
    q_mask: np.ndarray
    ocr_app: np.ndarray
    ocr_ft: np.ndarray
    ocr_phoc: np.ndarray
    ocr_box: np.ndarray
    ocr_iou: np.ndarray
    ocr_mask: np.ndarray
    obj_app: np.ndarray
    obj_box: np.ndarray
    obj_iou: np.ndarray
    obj_mask: np.ndarray
    ocr_raw: list  # recognized text per slot, as emitted on copy
    ocr_norm: list
    targets: np.ndarray  # (B, T, N+M)
    step_mask: np.ndarray  # (B, T)
    prev_idx: np.ndarray  # (B, T) teacher-forced previous candidate
    cand_vecs: np.ndarray  # (B, N+M, d_ft)
    cand_valid: np.ndarray  # (B, N+M)
    y_gt: np.ndarray  # (B, N+M)
    unreachable: np.ndarray  # (B,)

    def __len__(self):
        return len(self.instances)

    def subset(self, idx) -> "Batch":
        """Rows ``idx`` of every per-instance field."""
        idx = np.asarray(idx, dtype=np.int64)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[idx] if isinstance(v, np.ndarray) else [v[i] for i in idx]
        return Batch(**kw)

    @property
    def slot_mask(self) -> np.ndarray:
        """(B, N+M) candidate validity for scoring."""
        M = self.targets.shape[-1] - self.ocr_mask.shape[1]
        return np.concatenate([self.ocr_mask, np.ones((len(self), M), bool)], axis=1)


@dataclass
class ForwardOutput:
    scores: Tensor  # (B, T, N+M), masked OCR slots at -inf
    cls_output: Tensor
    ans_se: Tensor | None
    encoded: EncodedSequence
    sequence: Tensor
    y_dec: Tensor
    z_ans: Tensor


@dataclass
class LossOutput:
    l_final: Tensor
    l_bce: float
    l_s: float
    contrastive: ContrastiveReport | None
    forward: ForwardOutput
    extra: dict = field(default_factory=dict)


class SCNet:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, q_vocab: QuestionVocab,
                 loss_cfg: LossConfig, seed: int = 0):
        if vocab.embeddings.shape[1] != cfg.d_ft:
            raise ValueError(
                f"vocabulary vectors are {vocab.embeddings.shape[1]}-d, model expects d_ft={cfg.d_ft}"
            )
        self.cfg = cfg
        self.vocab = vocab
        self.q_vocab = q_vocab
        self.loss_cfg = loss_cfg
        self.store = ParameterStore()
        # parameter init depends on both the model's init_seed and the run seed
        rng = np.random.default_rng([cfg.init_seed, seed])
        init_question_params(self.store, rng, cfg, len(q_vocab))
        init_ocr_params(self.store, rng, cfg)
        init_object_params(self.store, rng, cfg)
        init_encoder(self.store, rng, cfg)
        dec.init_decoder(self.store, rng, cfg, len(vocab))

    # -- batching ----------------------------------------------------------
    def featurize(self, instances: list[VqaInstance]) -> Batch:
        cfg = self.cfg
        B, N, O, T = len(instances), cfg.max_ocr, cfg.max_obj, cfg.max_decode
        M = len(self.vocab)
        q_ids = np.zeros((B, cfg.max_q), dtype=np.int64)
        ocr_app = np.zeros((B, N, cfg.d_fr))
        ocr_ft = np.zeros((B, N, cfg.d_ft))
        ocr_phoc = np.zeros((B, N, cfg.d_phoc))
        ocr_box = np.zeros((B, N, 4))
        ocr_iou = np.zeros((B, N, N + O))
        ocr_mask = np.zeros((B, N), bool)
        obj_app = np.zeros((B, O, cfg.d_fr))
        obj_box = np.zeros((B, O, 4))
        obj_iou = np.zeros((B, O, N + O))
        obj_mask = np.zeros((B, O), bool)
        targets = np.zeros((B, T, N + M))
        step_mask = np.zeros((B, T), bool)
        prev_idx = np.zeros((B, T), dtype=np.int64)
        cand_vecs = np.zeros((B, N + M, cfg.d_ft))
        cand_valid = np.zeros((B, N + M), bool)
        y_gt = np.zeros((B, N + M))
        unreachable = np.zeros(B, bool)
        ocr_raw, ocr_norm = [], []
        vocab_valid = np.ones(M, bool)
        vocab_valid[:3] = False
        for b, inst in enumerate(instances):
            ids = self.q_vocab.encode(inst.question_tokens, cfg.max_q)
            q_ids[b, : len(ids)] = ids
            toks = inst.ocr[:N]
            objs = inst.objects[:O]
            n, o = len(toks), len(objs)
            ocr_mask[b, :n] = True
            obj_mask[b, :o] = True
            for j, t in enumerate(toks):
                ocr_app[b, j] = t.appearance
                ocr_ft[b, j] = t.fasttext
                ocr_phoc[b, j] = t.phoc
            ob = boxes_to_array([t.box for t in toks])
            jb = boxes_to_array([x.box for x in objs])
            for j, x in enumerate(objs):
                obj_app[b, j] = x.appearance
            ocr_box[b, :n] = ob
            obj_box[b, :o] = jb
            everything = np.concatenate([ob, jb])
            cols = np.r_[np.arange(n), N + np.arange(o)]
            if n:
                ocr_iou[b, :n][:, cols] = pairwise_iou(ob, everything)
            if o:
                obj_iou[b, :o][:, cols] = pairwise_iou(jb, everything)
            raw = [t.text for t in toks] + [""] * (N - n)
            norm = [normalize_answer(t) for t in raw]
            ocr_raw.append(raw)
            ocr_norm.append(norm)
            answer = training_answer(inst)
            tg, sm, unreach = dec.answer_targets(answer, self.vocab, norm[:n], N, T)
            targets[b], step_mask[b], unreachable[b] = tg, sm, unreach
            prev_idx[b] = dec.teacher_inputs(tg, sm, N, self.vocab)
            cand_vecs[b, :N] = ocr_ft[b]
            cand_vecs[b, N:] = self.vocab.embeddings
            cand_valid[b, :N] = ocr_mask[b]
            cand_valid[b, N:] = vocab_valid
            gt_words = set(normalize_answer(answer).split())
            for j in range(n):
                y_gt[b, j] = norm[j] in gt_words
            for w in gt_words:
                k = self.vocab.word_to_index.get(w)
                if k is not None:
                    y_gt[b, N + k] = 1.0
        return Batch(instances=list(instances), q_ids=q_ids, q_mask=q_ids > 0, ocr_app=ocr_app,
                     ocr_ft=ocr_ft, ocr_phoc=ocr_phoc, ocr_box=ocr_box, ocr_iou=ocr_iou,
                     ocr_mask=ocr_mask, obj_app=obj_app, obj_box=obj_box, obj_iou=obj_iou,
                     obj_mask=obj_mask, ocr_raw=ocr_raw, ocr_norm=ocr_norm, targets=targets,
                     step_mask=step_mask, prev_idx=prev_idx, cand_vecs=cand_vecs,
                     cand_valid=cand_valid, y_gt=y_gt, unreachable=unreachable)

    # -- forward -----------------------------------------------------------
    def encode(self, batch: Batch) -> EncodedSequence:
        s, cfg = self.store, self.cfg
        q = encode_question(s, batch.q_ids, batch.q_mask, cfg)
        sct = cfg.use_sct
        ocr_v, ocr_s, ocr_i = embed_ocr(s, batch.ocr_app, batch.ocr_ft, batch.ocr_phoc,
                                        batch.ocr_box, batch.ocr_iou if sct else None)
        obj_feat, obj_i = embed_object(s, batch.obj_app, batch.obj_box,
                                       batch.obj_iou if sct else None)
        inp = EncoderInputs(question=q, ocr_v=ocr_v, ocr_s=ocr_s, ocr_iou=ocr_i,
                            ocr_mask=batch.ocr_mask, obj_feat=obj_feat, obj_iou=obj_i,
                            obj_mask=batch.obj_mask)
        return encode_inputs(s, inp, cfg)

    def decode_step_scores(self, batch: Batch, enc: EncodedSequence,
                           prev_idx: np.ndarray) -> ForwardOutput:
        s, cfg = self.store, self.cfg
        dec_in = dec.decoder_inputs(s, enc.ocr_encoded, prev_idx)
        seq = run_plain(s, enc, dec_in, cfg)
        L = enc.encoded.shape[1]
        cls_output = seq[:, 0]
        ocr_out = seq[:, enc.ocr_offset : enc.ocr_offset + enc.n_ocr]
        y_dec = seq[:, L:]
        ans_se = None
        z_ans = y_dec
        if cfg.use_icsp:
            ans_se = dec.predict_answer_semantics(s, cls_output, cfg.icsp_activation)
            z_ans = dec.fuse_semantic_guidance(s, y_dec, ans_se)
        scores = dec.score_candidates(s, z_ans, ocr_out, batch.ocr_mask)
        return ForwardOutput(scores=scores, cls_output=cls_output, ans_se=ans_se, encoded=enc,
                             sequence=seq, y_dec=y_dec, z_ans=z_ans)

    def forward(self, batch: Batch, prev_idx: np.ndarray | None = None) -> ForwardOutput:
        """Teacher-forced forward pass (``prev_idx`` defaults to the batch targets)."""
        enc = self.encode(batch)
        return self.decode_step_scores(batch, enc, batch.prev_idx if prev_idx is None else prev_idx)

    def loss(self, batch: Batch, clamp: bool = True) -> LossOutput:
        out = self.forward(batch)
        valid = batch.step_mask[:, :, None] & batch.slot_mask[:, None, :]
        l_bce = bce_loss(out.scores, batch.targets, valid)
        report = None
        if self.cfg.use_icsp:
            l_s, report = contrastive_loss(out.ans_se, batch.cand_vecs, batch.y_gt,
                                           batch.cand_valid, self.loss_cfg, clamp=clamp)
            l_final = total_loss(l_bce, l_s, self.loss_cfg)
            l_s_val = float(l_s.data)
        else:
            l_final = l_bce
            l_s_val = 0.0
        check_finite(l_final, "L_final")
        return LossOutput(l_final=l_final, l_bce=float(l_bce.data), l_s=l_s_val,
                          contrastive=report, forward=out)

    # -- inference ---------------------------------------------------------
    def teacher_forced_accuracy(self, batch: Batch, out: ForwardOutput | None = None
                                ) -> tuple[int, int]:
        """(correct, total) valid steps whose argmax is a hot target."""
        if out is None:
            with no_grad():
                out = self.forward(batch)
        pick = dec.select(out.scores.data)
        hit = np.take_along_axis(batch.targets, pick[..., None], axis=-1)[..., 0] > 0
        return int((hit & batch.step_mask).sum()), int(batch.step_mask.sum())

    def predict(self, batch: Batch, topk: int = 0) -> list[dict]:
        """Greedy free-running decoding; stops at the end token or max_decode."""
        cfg, N = self.cfg, self.cfg.max_ocr
        B, T = len(batch), cfg.max_decode
        end_idx = N + self.vocab.end
        with no_grad():
            enc = self.encode(batch)
            prev = np.full((B, T), N + self.vocab.pad, dtype=np.int64)
            prev[:, 0] = N + self.vocab.begin
            picks = np.full((B, T), -1, dtype=np.int64)
            step_scores = []
            done = np.zeros(B, bool)
            for t in range(T):
                out = self.decode_step_scores(batch, enc, prev)
                sc = out.scores.data[:, t]
                step_scores.append(sc)
                choice = dec.select(sc)
                picks[:, t] = np.where(done, -1, choice)
                done |= choice == end_idx
                if t + 1 < T:
                    prev[:, t + 1] = np.where(done, N + self.vocab.pad, choice)
                if done.all():
                    break
        results = []
        for b in range(B):
            words, sources, top = [], [], []
            for t in range(T):
                c = picks[b, t]
                if c < 0 or c == end_idx:
                    break
                if c < N:
                    words.append(batch.ocr_raw[b][c])
                    sources.append("ocr")
                else:
                    words.append(self.vocab.words[c - N])
                    sources.append("vocab")
                if topk:
                    sc = step_scores[t][b]
                    order = np.argsort(-sc, kind="stable")[:topk]
                    top.append([[int(i), float(sc[i])] for i in order])
            rec = {"instance_id": batch.instances[b].instance_id, "answer": " ".join(words),
                   "per_step_source": sources}
            if topk:
                rec["scores_topk"] = top
            results.append(rec)
        return results
