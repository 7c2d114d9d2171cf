"""Command-line entry point for reproducible runs.

Subcommands: train, eval, sweep, bench, viz, gradcheck.  Every run writes
a ``config_echo.txt`` (key=value, one per line, sorted keys) capturing
all effective parameters; ``--config <file>`` replays a previous run
exactly, with explicitly passed flags overriding the file.

Exit codes: 0 success, 2 usage error, 3 numeric failure (training
divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad_check
from .attention import (
    VARIANTS,
    SPARSIFY_PHASES,
    AttentionConfig,
    attend,
    topk_keep_mask,
    sparsemax_rows_data,
    entmax15_rows_data,
)
from .bench import BENCH_MODES, BenchShape, bench_suite, suite_to_csv
from .fileio import atomic_write_text
from .heatmap import HEATMAP_FORMATS, export_heatmap
from .model import (
    ATTENTION_SITES,
    ModelConfig,
    TrainParams,
    TrainingDiverged,
    TransformerModel,
    decoder_input,
    evaluate,
    sweep_k,
    sweep_to_csv,
    train,
)
from .seeding import substream
from .tasks import TASK_KINDS, TaskSpec, generate_task


class UsageError(ValueError):
    """Bad flags or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# flag table: one declarative spec per command drives parsing, the config
# echo, and replay
# ---------------------------------------------------------------------------

@dataclass
class Flag:
    name: str          # CLI spelling without the leading dashes
    kind: str          # int | float | str | bool | intlist | klist | strlist
    default: object
    help: str = ""
    choices: tuple = ()

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _parse_value(flag: Flag, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if flag.kind == "int":
            val = int(raw)
        elif flag.kind == "float":
            val = float(raw)
        elif flag.kind == "bool":
            if isinstance(raw, bool):
                val = raw
            elif str(raw).lower() in ("true", "1", "yes"):
                val = True
            elif str(raw).lower() in ("false", "0", "no"):
                val = False
            else:
                raise ValueError(raw)
        elif flag.kind == "intlist":
            val = [int(x) for x in str(raw).split(",") if x != ""]
        elif flag.kind == "klist":
            val = [x if x == "inf" else int(x) for x in str(raw).split(",") if x != ""]
        elif flag.kind == "strlist":
            val = [x for x in str(raw).split(",") if x != ""]
        else:
            val = str(raw)
    except (TypeError, ValueError):
        raise UsageError(f"--{flag.name}: cannot parse {raw!r} as {flag.kind}")
    if flag.choices:
        items = val if isinstance(val, list) else [val]
        for item in items:
            if item not in flag.choices:
                raise UsageError(f"--{flag.name}: {item!r} not in {flag.choices}")
    return val


def _format_value(flag: Flag, val) -> str:
    if flag.kind in ("intlist", "klist", "strlist"):
        return ",".join(str(x) for x in val)
    if flag.kind == "bool":
        return "true" if val else "false"
    if flag.kind == "float":
        return repr(float(val))
    return str(val)


COMMON_FLAGS = [
    Flag("seed", "int", 0, "master seed; all randomness derives from it"),
    Flag("outdir", "str", "", "output directory (default: sparseattn_runs/<command>)"),
]

TASK_FLAGS = [
    Flag("task", "str", "copy", "synthetic task", TASK_KINDS),
    Flag("seq-len", "int", 8, "sequence length"),
    Flag("vocab", "int", 16, "vocabulary size incl. reserved pad/bos/eos"),
    Flag("n-train", "int", 512, "training sequences"),
    Flag("n-eval", "int", 64, "evaluation sequences"),
]

MODEL_FLAGS = [
    Flag("variant", "str", "topk", "attention variant", VARIANTS),
    Flag("k", "int", 8, "top-k width (topk variant only)"),
    Flag("heads", "int", 4, "attention heads"),
    Flag("d-model", "int", 64, "model width"),
    Flag("layers", "int", 2, "encoder and decoder layers"),
    Flag("ffn", "int", 128, "feed-forward width"),
    Flag("max-len", "int", 32, "positional table length"),
    Flag("sparsify-phase", "str", "train_and_predict",
         "when the sparsifier is active", SPARSIFY_PHASES),
]

TRAIN_FLAGS = [
    Flag("steps", "int", 3000, "max optimizer steps"),
    Flag("batch-size", "int", 16, "sequences per step"),
    Flag("lr", "float", 1e-3, "learning rate"),
    Flag("eval-every", "int", 100, "steps between greedy evaluations"),
    Flag("stop-token-acc", "float", 0.0,
         "stop once eval token accuracy reaches this (0 disables)"),
]

COMMAND_FLAGS = {
    "train": TASK_FLAGS + MODEL_FLAGS + TRAIN_FLAGS + COMMON_FLAGS,
    "eval": [Flag("model", "str", "", "path to a saved model (.npz)"),
             Flag("mode", "str", "model",
                  "attention phase at evaluation", ("model",) + SPARSIFY_PHASES),
             ] + TASK_FLAGS + COMMON_FLAGS,
    "sweep": [Flag("ks", "klist", [1, 2, 4, 8, 16, "inf"],
                   "comma list of k values; 'inf' runs the dense baseline"),
              Flag("seeds", "intlist", [1, 2, 3], "comma list of seeds"),
              ] + TASK_FLAGS + MODEL_FLAGS + TRAIN_FLAGS + COMMON_FLAGS,
    "bench": [Flag("variants", "strlist", list(VARIANTS), "variants to time", VARIANTS),
              Flag("lk", "intlist", [64, 256], "key/value lengths"),
              Flag("lq", "int", 0, "query length (0: same as l_K)"),
              Flag("batch", "int", 4, "batch size"),
              Flag("d", "int", 64, "model width"),
              Flag("g", "int", 4, "heads"),
              Flag("k", "int", 8, "top-k width"),
              Flag("modes", "strlist", list(BENCH_MODES), "timed modes", BENCH_MODES),
              Flag("iters", "int", 50, "timed iterations per cell (>= 30)"),
              Flag("warmup", "int", 10, "warmup iterations per cell (>= 5)"),
              ] + COMMON_FLAGS,
    "viz": [Flag("model", "str", "", "path to a saved model (.npz)"),
            Flag("sample", "int", 0, "evaluation sample index to visualize"),
            Flag("format", "str", "pgm", "heatmap file format", HEATMAP_FORMATS),
            ] + TASK_FLAGS + COMMON_FLAGS,
    "gradcheck": [Flag("variants", "strlist", list(VARIANTS), "variants to check", VARIANTS),
                  Flag("instances", "int", 20, "random instances per variant"),
                  Flag("eps", "float", 1e-5, "central-difference step"),
                  Flag("tol", "float", 1e-6, "max relative error to pass"),
                  Flag("force-tie", "bool", False,
                       "use an input tied at the selection boundary"),
                  ] + COMMON_FLAGS,
}


def parse_echo(text: str) -> dict:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"malformed config line: {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


def echo_text(command: str, flags: list[Flag], params: dict) -> str:
    pairs = {"command": command}
    for flag in flags:
        pairs[flag.dest] = _format_value(flag, params[flag.dest])
    lines = [f"{k}={v}" for k, v in sorted(pairs.items())]
    return "\n".join(lines) + "\n"


def resolve_params(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    flags = COMMAND_FLAGS[command]
    params = {f.dest: f.default for f in flags}
    if args.config:
        try:
            text = open(args.config).read()
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        file_vals = parse_echo(text)
        cmd = file_vals.pop("command", command)
        if cmd != command:
            raise UsageError(f"config echo is for command {cmd!r}, not {command!r}")
        known = {f.dest: f for f in flags}
        for key, raw in file_vals.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for command {command!r}")
            params[key] = _parse_value(known[key], raw)
    for flag in flags:
        cli_val = getattr(args, flag.dest)
        if cli_val is not None:
            params[flag.dest] = _parse_value(flag, cli_val)
    return params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseattn",
        description="sparse-attention laboratory: train, evaluate, sweep, bench, visualize")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in COMMAND_FLAGS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None,
                       help="replay parameters from a config echo file")
        for flag in flags:
            if flag.kind == "bool":
                p.add_argument(f"--{flag.name}", dest=flag.dest, nargs="?",
                               const="true", default=None, help=flag.help)
            else:
                p.add_argument(f"--{flag.name}", dest=flag.dest, default=None,
                               help=flag.help)
    return parser


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------

def _outdir(params: dict, command: str) -> str:
    out = params["outdir"] or os.path.join("sparseattn_runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def _task_spec(params: dict) -> TaskSpec:
    try:
        return TaskSpec(kind=params["task"], seq_len=params["seq_len"],
                        vocab_size=params["vocab"], n_train=params["n_train"],
                        n_eval=params["n_eval"], seed=params["seed"])
    except ValueError as e:
        raise UsageError(str(e))


def _model_config(params: dict) -> ModelConfig:
    try:
        attn = AttentionConfig(variant=params["variant"], k=params["k"],
                               num_heads=params["heads"], d_model=params["d_model"],
                               sparsify_phase=params["sparsify_phase"])
        return ModelConfig(vocab_size=params["vocab"], d_model=params["d_model"],
                           num_heads=params["heads"], num_layers=params["layers"],
                           ffn_width=params["ffn"], max_len=params["max_len"],
                           attention=attn, seed=params["seed"])
    except ValueError as e:
        raise UsageError(str(e))


def _train_params(params: dict) -> TrainParams:
    if params["steps"] < 1 or params["batch_size"] < 1 or params["eval_every"] < 1:
        raise UsageError("steps, batch-size and eval-every must be >= 1")
    stop = params["stop_token_acc"]
    return TrainParams(steps=params["steps"], batch_size=params["batch_size"],
                       lr=params["lr"], eval_every=params["eval_every"],
                       stop_token_acc=stop if stop > 0 else None)


def _write_echo(command: str, params: dict, outdir: str) -> None:
    atomic_write_text(os.path.join(outdir, "config_echo.txt"),
                      echo_text(command, COMMAND_FLAGS[command], params))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(params: dict) -> int:
    task = _task_spec(params)
    if params["max_len"] < params["seq_len"]:
        raise UsageError("max-len must be >= seq-len")
    cfg = _model_config(params)
    tp = _train_params(params)
    outdir = _outdir(params, "train")
    _write_echo("train", params, outdir)
    try:
        model, report = train(cfg, task, tp)
    except TrainingDiverged as e:
        atomic_write_text(os.path.join(outdir, "train_report.csv"), e.report.to_csv())
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    atomic_write_text(os.path.join(outdir, "train_report.csv"), report.to_csv())
    atomic_write_text(os.path.join(outdir, "run_meta.txt"),
                      f"wall_clock_s={report.wall_clock_s:.3f}\n"
                      f"steps_run={report.steps_run}\n")
    model.save(os.path.join(outdir, "model.npz"))
    print(f"steps={report.steps_run} final_token_acc={report.final_token_acc:.6f} "
          f"final_seq_acc={report.final_seq_acc:.6f} ({report.wall_clock_s:.1f}s)")
    print(f"artifacts in {outdir}")
    return 0


def cmd_eval(params: dict) -> int:
    if not params["model"]:
        raise UsageError("--model is required")
    try:
        model = TransformerModel.load(params["model"])
    except (OSError, KeyError) as e:
        raise UsageError(f"cannot load model {params['model']}: {e}")
    task = _task_spec(params)
    _, eval_set = generate_task(task)
    mode = None if params["mode"] == "model" else params["mode"]
    metrics = evaluate(model, eval_set, mode=mode)
    outdir = _outdir(params, "eval")
    _write_echo("eval", params, outdir)
    atomic_write_text(os.path.join(outdir, "eval_report.csv"),
                      "token_acc,seq_acc,n_sequences\n"
                      f"{metrics['token_acc']:.6f},{metrics['seq_acc']:.6f},"
                      f"{metrics['n_sequences']}\n")
    print(f"token_acc={metrics['token_acc']:.6f} seq_acc={metrics['seq_acc']:.6f}")
    return 0


def cmd_sweep(params: dict) -> int:
    task = _task_spec(params)
    cfg = _model_config(params)
    tp = _train_params(params)
    if not params["ks"] or not params["seeds"]:
        raise UsageError("--ks and --seeds must be nonempty")
    for k in params["ks"]:
        if k != "inf" and k < 1:
            raise UsageError("k values must be >= 1 or 'inf'")
    outdir = _outdir(params, "sweep")
    _write_echo("sweep", params, outdir)
    rows = sweep_k(cfg, task, tp, params["ks"], params["seeds"])
    atomic_write_text(os.path.join(outdir, "sweep.csv"), sweep_to_csv(rows))
    for r in rows:
        print(f"k={r['k']}: mean_acc={r['mean_acc']:.6f} std={r['std_acc']:.6f}")
    print(f"artifacts in {outdir}")
    return 0


def cmd_bench(params: dict) -> int:
    if params["iters"] < 30:
        raise UsageError("--iters must be >= 30")
    if params["warmup"] < 5:
        raise UsageError("--warmup must be >= 5")
    if params["d"] % params["g"] != 0:
        raise UsageError("--d must be divisible by --g")
    if not params["lk"] or not params["variants"] or not params["modes"]:
        raise UsageError("--lk, --variants and --modes must be nonempty")
    shapes = [BenchShape(batch=params["batch"],
                         l_q=params["lq"] or lk, l_k=lk,
                         d=params["d"], g=params["g"], k=params["k"])
              for lk in params["lk"]]
    outdir = _outdir(params, "bench")
    _write_echo("bench", params, outdir)
    reports = bench_suite(shapes, params["variants"], modes=params["modes"],
                          iters=params["iters"], warmup=params["warmup"],
                          seed=params["seed"])
    atomic_write_text(os.path.join(outdir, "bench.csv"), suite_to_csv(reports))
    for r in reports:
        print(f"{r.variant:10s} l_K={r.shape.l_k:4d} {r.mode:17s} "
              f"median={r.median_s * 1e3:8.2f} ms  {r.tokens_per_s:10.0f} tokens/s")
    print(f"artifacts in {outdir}")
    return 0


def cmd_viz(params: dict) -> int:
    if not params["model"]:
        raise UsageError("--model is required")
    try:
        model = TransformerModel.load(params["model"])
    except (OSError, KeyError) as e:
        raise UsageError(f"cannot load model {params['model']}: {e}")
    task = _task_spec(params)
    _, (eval_src, eval_tgt) = generate_task(task)
    idx = params["sample"]
    if not 0 <= idx < eval_src.shape[0]:
        raise UsageError(f"--sample must be in [0, {eval_src.shape[0]})")
    src = eval_src[idx:idx + 1]
    tgt = eval_tgt[idx:idx + 1]
    collect: dict = {}
    model.forward(src, decoder_input(tgt), training=False, collect=collect)
    outdir = _outdir(params, "viz")
    _write_echo("viz", params, outdir)
    fmt = params["format"]
    count = 0
    for site in ATTENTION_SITES:
        for layer, weights in enumerate(collect.get(site, [])):
            g = model.config.num_heads
            per_head = weights.reshape(g, weights.shape[-2], weights.shape[-1])
            for h in range(g):
                path = os.path.join(outdir, f"{site}_layer{layer}_head{h}.{fmt}")
                export_heatmap(per_head[h], path, format=fmt)
                count += 1
    print(f"wrote {count} heatmaps to {outdir}")
    return 0


def _gradcheck_instance(rng, variant: str, k_top: int, force_tie: bool):
    """One (loss, pattern, q) triple for checking d(loss)/dQ."""
    l_q, l_k, d = 3, 6, 4
    if force_tie:
        # every score in a row ties, so any perturbation flips the top-k
        # selection boundary and the guard must skip every coordinate
        q = np.ones((2, d))
        k_mat = np.eye(d)[:4]
        v = rng.standard_normal((4, d))
        coeff = rng.standard_normal((2, d))
    else:
        while True:
            q = rng.standard_normal((l_q, d))
            k_mat = rng.standard_normal((l_k, d))
            scores = (q @ k_mat.T) / np.sqrt(d)
            gaps = np.diff(np.sort(scores, axis=-1), axis=-1)
            if gaps.min() < 1e-3:
                continue
            if variant in ("sparsemax", "entmax15"):
                probs = (sparsemax_rows_data(scores) if variant == "sparsemax"
                         else entmax15_rows_data(scores))
                # probabilities right at the support boundary have more
                # curvature than eps=1e-5 central differences can resolve
                if probs[probs > 0].min() < 1e-4:
                    continue
            break
        v = rng.standard_normal((l_k, d))
        coeff = rng.standard_normal((l_q, d))

    def loss(qt):
        c, _ = attend(qt, Tensor(k_mat), Tensor(v), variant=variant, k_top=k_top)
        return T.sum_all(T.mul(c, Tensor(coeff)))

    def pattern(q_arr):
        p = (q_arr @ k_mat.T) / np.sqrt(d)
        if variant == "topk":
            return topk_keep_mask(p, k_top)
        if variant == "sparsemax":
            return sparsemax_rows_data(p) > 0
        if variant == "entmax15":
            return entmax15_rows_data(p) > 0
        return np.zeros(1)

    return loss, pattern, q


def _count_checked(pattern, q, eps):
    flat = q.reshape(-1)
    checked = 0
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        if np.array_equal(pattern(xp.reshape(q.shape)), pattern(xm.reshape(q.shape))):
            checked += 1
    return checked


def cmd_gradcheck(params: dict) -> int:
    if params["instances"] < 1:
        raise UsageError("--instances must be >= 1")
    rng = substream(params["seed"], "gradcheck")
    eps, tol = params["eps"], params["tol"]
    outdir = _outdir(params, "gradcheck")
    _write_echo("gradcheck", params, outdir)
    lines = []
    failed = False
    for variant in params["variants"]:
        worst = 0.0
        skipped = 0
        for _ in range(params["instances"]):
            loss, pattern, q = _gradcheck_instance(rng, variant, 2, params["force_tie"])
            if _count_checked(pattern, q, eps) == 0:
                skipped += 1
                continue
            worst = max(worst, grad_check(loss, q, eps=eps, pattern_fn=pattern,
                                          floor=1e-4))
        checked = params["instances"] - skipped
        if checked == 0:
            status = "SKIP (selection boundary tie at every coordinate)"
        elif worst <= tol:
            status = "PASS"
        else:
            status = "FAIL"
            failed = True
        lines.append(f"{variant}: instances={params['instances']} checked={checked} "
                     f"skipped={skipped} max_rel_err={worst:.3e} {status}")
    text = "\n".join(lines) + "\n"
    atomic_write_text(os.path.join(outdir, "gradcheck.txt"), text)
    print(text, end="")
    return 3 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "viz": cmd_viz,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        params = resolve_params(args.command, args)
        return COMMANDS[args.command](params)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
