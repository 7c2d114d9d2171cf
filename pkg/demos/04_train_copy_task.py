#!/usr/bin/env python3
"""Train the toy transformer on the copy task with top-k attention.

A two-layer encoder-decoder with k=4 sparse attention learns to copy
8-token sequences to perfect accuracy in a couple of minutes on a CPU.
The run is bit-reproducible: same seed, same report.
"""

import time

from sparseattn.attention import AttentionConfig
from sparseattn.model import ModelConfig, TrainParams, evaluate, train
from sparseattn.tasks import TaskSpec, generate_task

config = ModelConfig(
    vocab_size=16, d_model=64, num_heads=4, num_layers=2, ffn_width=128,
    attention=AttentionConfig(variant="topk", k=4), seed=1)
task = TaskSpec(kind="copy", seq_len=8, vocab_size=16, n_train=512, n_eval=64, seed=1)
params = TrainParams(steps=3000, batch_size=16, lr=1e-3,
                     eval_every=100, stop_token_acc=0.995)

print("training topk(k=4) on copy, stopping at 99.5% token accuracy...")
t0 = time.perf_counter()
model, report = train(config, task, params)
print(f"done in {time.perf_counter() - t0:.0f}s ({report.steps_run} steps)\n")

print("step  epoch  mean_loss  token_acc  seq_acc")
for row in report.rows:
    print(f"{row['step']:5d}  {row['epoch']:5d}  {row['mean_loss']:9.4f}"
          f"  {row['token_acc']:9.4f}  {row['seq_acc']:7.4f}")

_, eval_set = generate_task(task)
final = evaluate(model, eval_set)
print(f"\ngreedy decoding on held-out data: token accuracy {final['token_acc']:.4f}, "
      f"sequence accuracy {final['seq_acc']:.4f}")
