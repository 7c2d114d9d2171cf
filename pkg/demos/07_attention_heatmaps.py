#!/usr/bin/env python3
"""Export attention heatmaps: concentrated top-k vs dispersed dense.

Trains a top-k model to convergence and a dense model very briefly, runs
both on the same held-out sequence, and writes one PGM image per (site,
layer, head).  Top-k rows light up at most k pixels; the briefly trained
dense model spreads mass across the whole row.  View the .pgm files with
any image tool, or read them as text (format P2).
"""

import os

import numpy as np

from sparseattn.attention import AttentionConfig
from sparseattn.heatmap import export_heatmap, parse_pgm
from sparseattn.model import ModelConfig, TrainParams, decoder_input, train
from sparseattn.tasks import TaskSpec, generate_task

OUT = "heatmaps_demo"
os.makedirs(OUT, exist_ok=True)

SMALL = dict(vocab_size=16, d_model=32, num_heads=2, num_layers=1, ffn_width=64)
task = TaskSpec(kind="copy", seq_len=8, vocab_size=16, n_train=512, n_eval=64, seed=1)

runs = {
    "topk": (AttentionConfig(variant="topk", k=2),
             TrainParams(steps=1500, batch_size=16, eval_every=50,
                         stop_token_acc=0.995)),
    "dense": (AttentionConfig(variant="dense"),
              TrainParams(steps=100, batch_size=16, eval_every=10**9)),
}

_, (ev_src, ev_tgt) = generate_task(task)
sample_src, sample_tgt = ev_src[:1], ev_tgt[:1]
print("input sequence:", sample_src[0].tolist())

for tag, (attn, params) in runs.items():
    model, report = train(ModelConfig(attention=attn, seed=1, **SMALL), task, params)
    collect = {}
    model.forward(sample_src, decoder_input(sample_tgt), training=False,
                  collect=collect)
    print(f"\n{tag} model ({report.steps_run} steps, "
          f"token acc {report.final_token_acc:.3f}):")
    for site, mats in collect.items():
        g = model.config.num_heads
        for layer, w in enumerate(mats):
            per_head = w.reshape(g, w.shape[-2], w.shape[-1])
            for h in range(g):
                path = os.path.join(OUT, f"{tag}_{site}_l{layer}_h{h}.pgm")
                export_heatmap(per_head[h], path, format="pgm")
                pixels = parse_pgm(open(path).read())
                lit = (pixels > 0).sum(axis=1)
                print(f"  {site} head {h}: nonzero pixels per row {lit.tolist()}")

print(f"\nimages in {OUT}/")
