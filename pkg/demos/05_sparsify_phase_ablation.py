#!/usr/bin/env python3
"""Sparsify during training only, or during training and inference?

Trains the same model twice: once with top-k active in both phases, once
with top-k during training but dense softmax at evaluation (train_only).
A train_only model evaluates bit-identically to a dense model that
borrows its parameters, so the sparsifier acts purely as a training-time
regularizer in that mode.
"""

from sparseattn.attention import AttentionConfig
from sparseattn.model import (ModelConfig, TrainParams, TransformerModel,
                              evaluate, train)
from sparseattn.tasks import TaskSpec, generate_task

SMALL = dict(vocab_size=16, d_model=32, num_heads=2, num_layers=1, ffn_width=64)
task = TaskSpec(kind="copy", seq_len=8, vocab_size=16, n_train=512, n_eval=64, seed=1)
params = TrainParams(steps=1500, batch_size=16, lr=1e-3,
                     eval_every=50, stop_token_acc=0.995)

results = {}
for phase in ("train_and_predict", "train_only"):
    cfg = ModelConfig(attention=AttentionConfig(variant="topk", k=4,
                                                sparsify_phase=phase),
                      seed=1, **SMALL)
    model, report = train(cfg, task, params)
    results[phase] = (model, report)
    print(f"{phase:18s}: {report.steps_run:4d} steps, "
          f"token accuracy {report.final_token_acc:.4f}")

# the train_only model at eval time IS a dense model with the same weights
model_to, _ = results["train_only"]
dense_twin = TransformerModel(ModelConfig(
    attention=AttentionConfig(variant="dense"), seed=1, **SMALL))
for name, tensor in model_to.params.items():
    dense_twin.params[name].data = tensor.data.copy()

_, eval_set = generate_task(task)
a = evaluate(model_to, eval_set)
b = evaluate(dense_twin, eval_set)
print(f"\ntrain_only evaluated as-is:        {a}")
print(f"dense twin with the same weights:  {b}")
print("identical:", a == b)
