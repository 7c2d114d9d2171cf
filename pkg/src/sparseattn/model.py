"""Toy encoder-decoder transformer and its training loop.

Small enough to train on a CPU in seconds-to-minutes, but structurally
faithful: multi-head self-attention in the encoder, causal self-attention
plus context attention in the decoder, post-residual layer norm, FFN
blocks, sinusoidal positions, teacher-forced cross-entropy, greedy
decoding.  Any attention variant plugs in unchanged.

Everything is deterministic given the config: parameters, batch order and
evaluation all draw from named substreams of the single seed, and all
reductions run in a fixed order, so identical configs reproduce identical
parameter bytes and reports.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .tensor import DegenerateRowError, Tensor, backward
from .attention import AttentionConfig, AttentionParams, multi_head_attention_batched
from .tasks import BOS, TaskSpec, generate_task
from .seeding import substream

ATTENTION_SITES = ("enc_self", "dec_self", "context")


@dataclass
class ModelConfig:
    vocab_size: int = 16
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ffn_width: int = 128
    max_len: int = 32
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")
        # keep the attention config consistent with the model dimensions
        self.attention = replace(self.attention, d_model=self.d_model,
                                 num_heads=self.num_heads)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class TrainParams:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 100
    stop_token_acc: float | None = None


@dataclass
class TrainReport:
    """Training outcome: per-evaluation rows plus final greedy metrics.

    ``rows`` hold (step, epoch, mean loss since the previous row, token
    accuracy, sequence accuracy, elapsed seconds).  The CSV serialization
    drops the wall-clock column so that replayed runs produce byte-equal
    artifacts; timing stays available on the report object.
    """

    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    final_loss: float = float("nan")
    final_token_acc: float = float("nan")
    final_seq_acc: float = float("nan")
    steps_run: int = 0
    wall_clock_s: float = 0.0
    config_echo: dict = field(default_factory=dict)
    diverged: bool = False

    CSV_HEADER = "step,epoch,mean_loss,token_acc,seq_acc"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r['step']},{r['epoch']},{r['mean_loss']:.6f},"
                         f"{r['token_acc']:.6f},{r['seq_acc']:.6f}")
        lines.append(f"final,{self.steps_run},{self.final_loss:.6f},"
                     f"{self.final_token_acc:.6f},{self.final_seq_acc:.6f}")
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the partial report."""

    def __init__(self, step: int, report: TrainReport):
        super().__init__(f"non-finite loss at step {step}")
        self.report = report


def sinusoidal_positions(max_len: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d)
    pe = np.zeros((max_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d // 2])
    return pe.astype(dtype)


def _xavier(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class TransformerModel:
    """Encoder-decoder transformer over integer token sequences."""

    def __init__(self, config: ModelConfig):
        self.config = config
        d, dt = config.d_model, config.np_dtype
        rng = substream(config.seed, "params")
        self.params: dict[str, Tensor] = {}

        def add(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        def add_attention(prefix):
            return AttentionParams(
                wq=add(f"{prefix}.wq", _xavier(rng, d, d, dt)),
                wk=add(f"{prefix}.wk", _xavier(rng, d, d, dt)),
                wv=add(f"{prefix}.wv", _xavier(rng, d, d, dt)),
                wc=add(f"{prefix}.wc", _xavier(rng, d, d, dt)),
            )

        def add_ln(prefix):
            return (add(f"{prefix}.gain", np.ones(d, dtype=dt)),
                    add(f"{prefix}.bias", np.zeros(d, dtype=dt)))

        def add_ffn(prefix):
            w = config.ffn_width
            return (add(f"{prefix}.w1", _xavier(rng, d, w, dt)),
                    add(f"{prefix}.b1", np.zeros(w, dtype=dt)),
                    add(f"{prefix}.w2", _xavier(rng, w, d, dt)),
                    add(f"{prefix}.b2", np.zeros(d, dtype=dt)))

        v = config.vocab_size
        self.src_embed = add("embed.src", _xavier(rng, v, d, dt))
        self.tgt_embed = add("embed.tgt", _xavier(rng, v, d, dt))

        self.enc_layers = []
        for i in range(config.num_layers):
            self.enc_layers.append({
                "attn": add_attention(f"enc{i}.self"),
                "ln1": add_ln(f"enc{i}.ln1"),
                "ffn": add_ffn(f"enc{i}.ffn"),
                "ln2": add_ln(f"enc{i}.ln2"),
            })
        self.dec_layers = []
        for i in range(config.num_layers):
            self.dec_layers.append({
                "self": add_attention(f"dec{i}.self"),
                "ln1": add_ln(f"dec{i}.ln1"),
                "ctx": add_attention(f"dec{i}.ctx"),
                "ln2": add_ln(f"dec{i}.ln2"),
                "ffn": add_ffn(f"dec{i}.ffn"),
                "ln3": add_ln(f"dec{i}.ln3"),
            })

        self.w_out = add("out.w", _xavier(rng, d, v, dt))
        self.b_out = add("out.b", np.zeros(v, dtype=dt))

        self.pe = sinusoidal_positions(config.max_len, d, dt)
        base = config.attention
        self.site_configs = {
            "enc_self": replace(base, causal=False),
            "dec_self": replace(base, causal=True),
            "context": replace(base, causal=False),
        }
        self.embed_scale = float(np.sqrt(d))

    # -- forward pieces ----------------------------------------------------

    def _embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        batch, length = ids.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = T.scale(T.embedding(table, ids.reshape(-1)), self.embed_scale)
        pe = np.tile(self.pe[:length], (batch, 1))
        return T.add(x, Tensor(pe))

    def _site_variant_cfg(self, site: str, phase_override: str | None) -> AttentionConfig:
        cfg = self.site_configs[site]
        if phase_override is not None:
            cfg = replace(cfg, sparsify_phase=phase_override)
        return cfg

    def _ffn(self, x: Tensor, ffn) -> Tensor:
        w1, b1, w2, b2 = ffn
        return T.add_bias(T.matmul(T.relu(T.add_bias(T.matmul(x, w1), b1)), w2), b2)

    def _sublayer(self, x: Tensor, out: Tensor, ln) -> Tensor:
        return T.layer_norm(T.add(x, out), ln[0], ln[1])

    def encode(self, src_ids: np.ndarray, training: bool = True,
               phase_override: str | None = None, collect: dict | None = None) -> Tensor:
        batch = src_ids.shape[0]
        x = self._embed(self.src_embed, src_ids)
        cfg = self._site_variant_cfg("enc_self", phase_override)
        for layer in self.enc_layers:
            attn, weights = multi_head_attention_batched(x, x, batch, layer["attn"], cfg,
                                                         training=training)
            if collect is not None:
                collect.setdefault("enc_self", []).append(weights)
            x = self._sublayer(x, attn, layer["ln1"])
            x = self._sublayer(x, self._ffn(x, layer["ffn"]), layer["ln2"])
        return x

    def decode(self, enc_out: Tensor, tgt_in_ids: np.ndarray, training: bool = True,
               phase_override: str | None = None, collect: dict | None = None) -> Tensor:
        batch = tgt_in_ids.shape[0]
        y = self._embed(self.tgt_embed, tgt_in_ids)
        cfg_self = self._site_variant_cfg("dec_self", phase_override)
        cfg_ctx = self._site_variant_cfg("context", phase_override)
        for layer in self.dec_layers:
            attn, w_self = multi_head_attention_batched(y, y, batch, layer["self"], cfg_self,
                                                        training=training)
            if collect is not None:
                collect.setdefault("dec_self", []).append(w_self)
            y = self._sublayer(y, attn, layer["ln1"])
            ctx, w_ctx = multi_head_attention_batched(y, enc_out, batch, layer["ctx"], cfg_ctx,
                                                      training=training)
            if collect is not None:
                collect.setdefault("context", []).append(w_ctx)
            y = self._sublayer(y, ctx, layer["ln2"])
            y = self._sublayer(y, self._ffn(y, layer["ffn"]), layer["ln3"])
        return T.add_bias(T.matmul(y, self.w_out), self.b_out)

    def forward(self, src_ids: np.ndarray, tgt_in_ids: np.ndarray, training: bool = True,
                phase_override: str | None = None, collect: dict | None = None) -> Tensor:
        """Teacher-forced logits, flattened to [batch*tgt_len, vocab]."""
        enc = self.encode(src_ids, training=training, phase_override=phase_override,
                          collect=collect)
        return self.decode(enc, tgt_in_ids, training=training,
                           phase_override=phase_override, collect=collect)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["__config__"] = np.frombuffer(
            json.dumps(asdict(self.config)).encode("utf-8"), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "TransformerModel":
        with np.load(path) as data:
            cfg_dict = json.loads(bytes(data["__config__"]).decode("utf-8"))
            cfg_dict["attention"] = AttentionConfig(**cfg_dict["attention"])
            model = cls(ModelConfig(**cfg_dict))
            for name, t in model.params.items():
                t.data = data[name].copy()
        return model


def decoder_input(tgt: np.ndarray) -> np.ndarray:
    """Teacher-forcing input: BOS followed by the target minus its last token."""
    dec = np.empty_like(tgt)
    dec[:, 0] = BOS
    dec[:, 1:] = tgt[:, :-1]
    return dec


def forward_model(model: TransformerModel, src_tokens, tgt_tokens) -> Tensor:
    """Single-sequence logits [tgt_len, vocab] under teacher forcing."""
    src = np.asarray(src_tokens, dtype=np.int64)[None, :]
    tgt = np.asarray(tgt_tokens, dtype=np.int64)[None, :]
    return model.forward(src, decoder_input(tgt), training=False)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: dict[str, Tensor], tp: TrainParams):
        self.params = params
        self.tp = tp
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        tp = self.tp
        self.t += 1
        b1t = 1.0 - tp.beta1 ** self.t
        b2t = 1.0 - tp.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = tp.beta1 * self.m[k] + (1 - tp.beta1) * g
            self.v[k] = tp.beta2 * self.v[k] + (1 - tp.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data = p.data - (tp.lr * mhat / (np.sqrt(vhat) + tp.adam_eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def greedy_decode(model: TransformerModel, src: np.ndarray, out_len: int,
                  phase_override: str | None = None) -> np.ndarray:
    """Decode ``out_len`` tokens left to right, argmax at each step."""
    batch = src.shape[0]
    enc = model.encode(src, training=False, phase_override=phase_override)
    dec = np.full((batch, 1), BOS, dtype=np.int64)
    for _ in range(out_len):
        logits = model.decode(enc, dec, training=False, phase_override=phase_override)
        vocab = logits.data.shape[-1]
        last = logits.data.reshape(batch, dec.shape[1], vocab)[:, -1, :]
        nxt = np.argmax(last, axis=-1)
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return dec[:, 1:]


def evaluate(model: TransformerModel, dataset, mode: str | None = None) -> dict:
    """Greedy-decoding token/sequence accuracy on (src, tgt) arrays.

    ``mode`` overrides the model's sparsify phase: ``train_only`` evaluates
    with dense softmax regardless of the configured variant,
    ``train_and_predict`` keeps the variant active.  ``None`` uses the
    model's own configuration.
    """
    src, tgt = dataset
    preds = []
    for start in range(0, src.shape[0], 64):
        batch_src = src[start:start + 64]
        preds.append(greedy_decode(model, batch_src, tgt.shape[1], phase_override=mode))
    pred = np.concatenate(preds, axis=0)
    token_acc = float((pred == tgt).mean())
    seq_acc = float((pred == tgt).all(axis=1).mean())
    return {"token_acc": token_acc, "seq_acc": seq_acc, "n_sequences": int(src.shape[0])}


def train(model_config: ModelConfig, task_spec: TaskSpec, train_params: TrainParams):
    """Teacher-forced training; returns ``(model, TrainReport)``.

    Deterministic given the configs.  Raises :class:`TrainingDiverged`
    (with the partial report attached) if the loss leaves the floats.
    """
    (train_src, train_tgt), eval_set = generate_task(task_spec)
    model = TransformerModel(model_config)
    opt = Adam(model.params, train_params)
    shuffle_rng = substream(model_config.seed, "shuffle")

    report = TrainReport(config_echo={
        "model": asdict(model_config), "task": asdict(task_spec),
        "train": asdict(train_params)})
    t0 = time.perf_counter()
    n = train_src.shape[0]
    step = 0
    epoch = 0
    loss_window: list[float] = []
    stop = False

    while step < train_params.steps and not stop:
        epoch += 1
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, train_params.batch_size):
            if step >= train_params.steps or stop:
                break
            idx = perm[start:start + train_params.batch_size]
            src, tgt = train_src[idx], train_tgt[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model.forward(src, decoder_input(tgt), training=True)
                    loss = T.cross_entropy_logits(logits, tgt.reshape(-1))
                loss_val = loss.item()
            except DegenerateRowError:
                # exploded parameters can push whole score rows to -inf
                # before the loss itself turns non-finite
                loss_val = float("nan")
            if not np.isfinite(loss_val):
                report.steps_run = step
                report.wall_clock_s = time.perf_counter() - t0
                report.diverged = True
                raise TrainingDiverged(step, report)
            backward(loss)
            opt.step()
            step += 1
            report.losses.append(loss_val)
            loss_window.append(loss_val)

            if step % train_params.eval_every == 0 or step == train_params.steps:
                metrics = evaluate(model, eval_set)
                report.rows.append({
                    "step": step, "epoch": epoch,
                    "mean_loss": float(np.mean(loss_window)),
                    "token_acc": metrics["token_acc"],
                    "seq_acc": metrics["seq_acc"],
                    "elapsed_s": time.perf_counter() - t0,
                })
                loss_window = []
                if (train_params.stop_token_acc is not None
                        and metrics["token_acc"] >= train_params.stop_token_acc):
                    stop = True

    final = evaluate(model, eval_set)
    report.final_loss = report.losses[-1] if report.losses else float("nan")
    report.final_token_acc = final["token_acc"]
    report.final_seq_acc = final["seq_acc"]
    report.steps_run = step
    report.wall_clock_s = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------------------
# k sweep
# ---------------------------------------------------------------------------

SWEEP_CSV_HEADER = "k,mean_acc,std_acc,n_seeds"


def sweep_k(model_config: ModelConfig, task_spec: TaskSpec, train_params: TrainParams,
            ks, seeds) -> list[dict]:
    """Train/evaluate over a grid of k values and seeds.

    ``ks`` entries are positive ints or the string ``"inf"``, which runs
    the dense variant (every position may be attended).  Returns one row
    per k with mean and population-std of final token accuracy.
    """
    rows = []
    for k in ks:
        accs = []
        for seed in seeds:
            if k == "inf":
                attn = replace(model_config.attention, variant="dense")
            else:
                attn = replace(model_config.attention, variant="topk", k=int(k))
            cfg = replace(model_config, attention=attn, seed=int(seed))
            task = replace(task_spec, seed=int(seed))
            _, rep = train(cfg, task, train_params)
            accs.append(rep.final_token_acc)
        rows.append({
            "k": k,
            "mean_acc": float(np.mean(accs)),
            "std_acc": float(np.std(accs)),
            "n_seeds": len(list(seeds)),
        })
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(f"{r['k']},{r['mean_acc']:.6f},{r['std_acc']:.6f},{r['n_seeds']}")
    return "\n".join(lines) + "\n"
