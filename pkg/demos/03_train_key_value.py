"""
Learning a key-value lookup from masked tokens
==============================================

The synthetic corpus is a stream of key/value byte pairs drawn from a fixed
dictionary.  A masked value can only be recovered by reading the key in front
of it, so accuracy well above chance means the model learned to use context.
Runs the desk configuration for 500 steps (a minute or two on a CPU).  The
loss sits on a plateau for a while before the lookup clicks.
"""

import numpy as np

from aveyb import AveyB, ModelConfig, Rng, TrainConfig, train
from aveyb.training import DESK_LR_PEAK, evaluate_masked_accuracy, synthetic_kv_corpus, value_chance

cfg = ModelConfig()
corpus = synthetic_kv_corpus(Rng(0, "corpus"), cfg.vocab_size, 16, cfg.N, 256)
print("first pairs:", corpus.sequences[0][:8])

model = AveyB(cfg)
print(f"{model.num_parameters():,} parameters, accuracy before training "
      f"{evaluate_masked_accuracy(model, corpus):.3f}")

res = train(model, corpus, TrainConfig(steps=500, batch_size=8, lr_peak=DESK_LR_PEAK))
losses = np.array([m["loss"] for m in res.metrics])
for step in (0, 100, 200, 300, 400, 499):
    print(f"step {step:3d}  loss {losses[step]:.3f}  lr {res.metrics[step]['lr']:.2e}")

acc = evaluate_masked_accuracy(model, corpus)
print(f"masked accuracy {acc:.3f}; chance is {1 / cfg.vocab_size:.4f} over bytes "
      f"and {value_chance(corpus):.4f} over the value alphabet")
