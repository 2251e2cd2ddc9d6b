"""
A synthetic scene, its OCR features and IoU layout
==================================================

Generate a few instances, look at one of them and at the features the
model sees for its OCR tokens.
"""

import numpy as np

from scnet.data import SynthConfig, generate_instance
from scnet.features import BoundingBox, iou, phoc_encode

cfg = SynthConfig(seed=7, n_instances=4, ocr_error_rate=0.3, bias_strength=0.5)
inst, notes = generate_instance(cfg, 2)

print(" ".join(inst.question_tokens), "->", inst.answers[0])
for slot, tok in enumerate(inst.ocr):
    mark = "*" if slot == notes.answer_slot else " "
    print(f"{mark} ocr[{slot}] seen={tok.text!r:10} true={notes.true_texts[slot]!r:10} "
          f"box={np.round(tok.box.as_list(), 2)}")
print("code answer:", notes.is_code_answer, "| word answer hidden by OCR errors:", notes.is_ocr_trap)

# PHOC: 604 bits, one block per pyramid level plus bigram regions
bits = phoc_encode(inst.ocr[notes.answer_slot].text)
print("phoc bits set:", int(bits.sum()), "of", bits.size)

# the IoU helper on two overlapping squares
a, b = BoundingBox(0, 0, 0.2, 0.2), BoundingBox(0.1, 0.1, 0.3, 0.3)
print("iou =", iou(a, b), "(1/7 =", 1 / 7, ")")
