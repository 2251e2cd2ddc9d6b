"""
Overfitting 32 instances with the toy preset
============================================

The full model (two-branch layers plus semantic prediction) should drive
teacher-forced accuracy to 1 on a tiny set. Takes about a minute.
"""

from scnet.config import resolve_config
from scnet.train import synthetic_splits, train

cfg = resolve_config({"tau": 0.1, "alpha_semantic": 0.1, "eval_interval": 50,
                      "contrastive_variant": "denominator_all"})
train_set, _, _, _ = synthetic_splits(cfg)


def good_enough(res, it):
    return res.tf_accuracy >= 0.99


res = train(cfg, train_set, max_iters=600, stop_when=good_enough)
for e in res.evals:
    print(f"iter {e['iter']:4d}  teacher-forced acc {e['tf_accuracy']:.3f}")
print(f"L_final {res.initial_loss:.4f} -> {res.final_loss:.4f} after {res.iterations} iters")

# greedy decoding on a few training questions
preds = res.model.predict(res.model.featurize(train_set[:5]))
for inst, p in zip(train_set, preds):
    print(" ".join(inst.question_tokens), "|", p["answer"], p["per_step_source"],
          "| gt:", inst.answers[0])
