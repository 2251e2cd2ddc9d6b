"""Semantics-centered transformer: object-enhanced OCR inputs, two-branch fused layers.

Sequence layout in SCT mode is ``[question (max_q) | OCR (max_ocr)]`` and
objects never take sequence slots. The baseline layout used for ablations is
``[question | OCR | objects]``. Decoding positions are appended after either
layout for the plain transformer stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import ModelConfig
from .features import QuestionEncoding
from .params import ParameterStore
from .tensor import Tensor, check_finite, concat


def input_lengths(cfg: ModelConfig, baseline: bool = False) -> tuple[int, int]:
    """(encoder length, encoder + decoding length)."""
    enc = cfg.max_q + cfg.max_ocr + (cfg.max_obj if baseline else 0)
    return enc, enc + cfg.max_decode


def enhance_ocr_with_objects(ocr_v: Tensor, ocr_s: Tensor, ocr_iou: Tensor, obj_feat: Tensor,
                             obj_iou: Tensor, obj_mask: np.ndarray, return_term: bool = False):
    """Add one IoU-keyed attention read-out over objects to both OCR parts.

    Single-head: OCR IoU parts are queries, object IoU parts keys, object
    features values. With no real object the read-out is zero.
    """
    attn_mask = nn.key_mask_to_attn(obj_mask)
    term = nn.attention(ocr_iou, obj_iou, obj_feat, attn_mask, num_heads=1)
    v_e, s_e = term + ocr_v, term + ocr_s
    if return_term:
        return v_e, s_e, term
    return v_e, s_e


@dataclass
class SctState:
    input_v: Tensor
    input_s: Tensor
    pad_mask: np.ndarray  # (B, L) True = real position
    alpha: Tensor | None = None
    z_fuse: Tensor | None = None
    output: Tensor | None = None


def init_sct_layer(store: ParameterStore, rng, name: str, cfg: ModelConfig):
    d = cfg.d
    store.add(f"{name}.alpha", np.array(cfg.alpha_init))
    for branch in ("sem", "vis"):
        nn.init_ln(store, f"{name}.{branch}.ln", d)
        nn.init_mha(store, rng, f"{name}.{branch}.attn", d)
    nn.init_ln(store, f"{name}.sem.ln_ffn", d)
    nn.init_ffn(store, rng, f"{name}.sem.ffn", d, cfg.ffn_mult * d)


def sct_layer(store: ParameterStore, name: str, state: SctState, num_heads: int) -> SctState:
    """output_s / output_v self-attention, z_fuse = output_s + alpha * output_v.

    Pre-norm: each branch attends over its layer-normed input, the fused
    result is added to the semantic input, then the semantic feed-forward
    block runs with its own residual. The output feeds both branches next.
    """
    mask = nn.key_mask_to_attn(state.pad_mask)
    hs = nn.ln(store, f"{name}.sem.ln", state.input_s)
    hv = nn.ln(store, f"{name}.vis.ln", state.input_v)
    out_s = nn.mha(store, f"{name}.sem.attn", hs, hs, mask, num_heads)
    out_v = nn.mha(store, f"{name}.vis.attn", hv, hv, mask, num_heads)
    alpha = store[f"{name}.alpha"]
    z_fuse = out_s + alpha * out_v
    x = state.input_s + z_fuse
    x = x + nn.ffn(store, f"{name}.sem.ffn", nn.ln(store, f"{name}.sem.ln_ffn", x))
    return SctState(input_v=x, input_s=x, pad_mask=state.pad_mask, alpha=alpha, z_fuse=z_fuse,
                    output=x)


def init_encoder(store: ParameterStore, rng, cfg: ModelConfig):
    d = cfg.d
    for i in range(cfg.sct_layers):
        if cfg.use_sct:
            init_sct_layer(store, rng, f"sct.layer{i}", cfg)
        else:
            nn.init_transformer_layer(store, rng, f"baseline.layer{i}", d, cfg.ffn_mult * d)
    for i in range(cfg.plain_layers):
        nn.init_transformer_layer(store, rng, f"plain.layer{i}", d, cfg.ffn_mult * d)
    nn.init_ln(store, "plain.ln_out", d)


@dataclass
class EncoderInputs:
    question: QuestionEncoding
    ocr_v: Tensor
    ocr_s: Tensor
    ocr_iou: Tensor
    ocr_mask: np.ndarray
    obj_feat: Tensor
    obj_iou: Tensor
    obj_mask: np.ndarray


@dataclass
class EncodedSequence:
    encoded: Tensor  # output of the SCT (or baseline) stack, (B, L_enc, d)
    pad_mask: np.ndarray  # (B, L_enc)
    ocr_offset: int
    n_ocr: int
    enhancement: Tensor | None = None
    states: list | None = None

    @property
    def ocr_encoded(self) -> Tensor:
        return self.encoded[:, self.ocr_offset : self.ocr_offset + self.n_ocr]


def encode_inputs(store: ParameterStore, inp: EncoderInputs, cfg: ModelConfig) -> EncodedSequence:
    """Build the input layout and run the SCT (or baseline) layers."""
    q = inp.question
    if cfg.use_sct:
        v_e, s_e, term = enhance_ocr_with_objects(inp.ocr_v, inp.ocr_s, inp.ocr_iou, inp.obj_feat,
                                                  inp.obj_iou, inp.obj_mask, return_term=True)
        pad = np.concatenate([q.mask, inp.ocr_mask], axis=1)
        state = SctState(input_v=concat([q.q_v, v_e], axis=1),
                         input_s=concat([q.q_s, s_e], axis=1), pad_mask=pad)
        states = []
        for i in range(cfg.sct_layers):
            state = sct_layer(store, f"sct.layer{i}", state, cfg.num_heads)
            states.append(state)
        x = state.output if states else state.input_s
        out = EncodedSequence(encoded=x, pad_mask=pad, ocr_offset=q.mask.shape[1],
                              n_ocr=inp.ocr_mask.shape[1], enhancement=term, states=states)
    else:
        pad = np.concatenate([q.mask, inp.ocr_mask, inp.obj_mask], axis=1)
        x = concat([q.base, inp.ocr_v + inp.ocr_s, inp.obj_feat], axis=1)
        attn_mask = nn.key_mask_to_attn(pad)
        for i in range(cfg.sct_layers):
            x = nn.transformer_layer(store, f"baseline.layer{i}", x, attn_mask, cfg.num_heads)
        out = EncodedSequence(encoded=x, pad_mask=pad, ocr_offset=q.mask.shape[1],
                              n_ocr=inp.ocr_mask.shape[1])
    check_finite(out.encoded, "encoder output")
    return out


def joint_mask(enc_mask: np.ndarray, n_dec: int) -> np.ndarray:
    """(B, L+T, L+T) visibility: everyone sees real encoder slots; decoding
    step t also sees decoding steps <= t; encoder slots never see decoding."""
    B, L = enc_mask.shape
    tot = L + n_dec
    m = np.zeros((B, tot, tot), dtype=bool)
    m[:, :, :L] = enc_mask[:, None, :]
    m[:, L:, L:] = np.tril(np.ones((n_dec, n_dec), dtype=bool))
    return m


def run_plain(store: ParameterStore, enc: EncodedSequence, dec_inputs: Tensor,
              cfg: ModelConfig) -> Tensor:
    """Plain transformer layers over ``[encoded | decoding positions]``."""
    n_dec = dec_inputs.shape[1]
    x = concat([enc.encoded, dec_inputs], axis=1)
    mask = joint_mask(enc.pad_mask, n_dec)
    for i in range(cfg.plain_layers):
        x = nn.transformer_layer(store, f"plain.layer{i}", x, mask, cfg.num_heads)
    return nn.ln(store, "plain.ln_out", x)
