"""Config-driven command line: synthetic data generation, training runs,
mode-switch NLL curves, cross-mode retrieval evaluation, FLOPs tables, and
checkpoint inspection.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
failure. Human-readable progress goes to stderr; machine records go to
files (and tables to stdout).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as tensor_mod
from .checkpoint import (
    CheckpointError,
    config_digest,
    load_checkpoint,
    load_params,
    save_params,
)
from .config import ConfigError, RunConfig, dump_run_config, load_run_config
from .data import generate_mqar, generate_needle, mqar_stream, needle_stream
from .flops import crossover_length, flops_table
from .inference import InferenceSession, ModePlan, cross_mode_retrieval_eval, nll_by_position
from .metrics import MetricsWriter
from .model import count_params, init_params, model_forward
from .modes import MixerMode
from .tensor import NumericsError, SeededRng
from .training import train_loop

A, L = MixerMode.ATTENTION, MixerMode.LINEAR


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _run_id(cfg: RunConfig) -> str:
    return f"{config_digest(cfg.model).hex()[:12]}-s{cfg.seed}"


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.precision = args.precision
        cfg.model.precision = args.precision
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    tensor_mod.set_precision(cfg.precision)
    return cfg


def _train_stream(cfg: RunConfig, rng: SeededRng):
    spec = cfg.data.spec(cfg.seed)
    if cfg.data.kind == "mqar":
        return mqar_stream(spec, rng)
    return needle_stream(spec, rng)


def _restore(cfg: RunConfig, checkpoint_path):
    params = init_params(cfg.model, SeededRng(cfg.seed).child("init"))
    load_params(params, cfg.model, checkpoint_path)
    return params


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.yaml")
    rng = SeededRng(cfg.seed)
    stream = _train_stream(cfg, rng.child("data"))
    run_id = _run_id(cfg)
    every = cfg.train.checkpoint_every
    total, shared = count_params(cfg.model)
    _log(f"run {run_id}: {total} params (shared fraction {shared:.3f}), "
         f"{cfg.train.steps} steps, batch {cfg.train.batch_size}")
    with MetricsWriter(out / "metrics.jsonl", run_id, cfg.log_wall_time) as mw:
        def on_step(step, rec, params):
            mw.write(step, "loss", rec["loss"])
            mw.write(step, "lr", rec["lr"])
            mw.write(step, "attention_fraction", rec["attention_fraction"])
            if step % 100 == 0 or step == cfg.train.steps - 1:
                _log(f"step {step}: loss {rec['loss']:.4f} lr {rec['lr']:.3e}")
            if every and step > 0 and step % every == 0:
                save_params(params, cfg.model, out / f"checkpoint_{step:07d}.oryx")

        params, _opt, history = train_loop(stream, cfg.model, cfg.train, rng, on_step=on_step)
    save_params(params, cfg.model, out / "checkpoint_final.oryx")
    _log(f"final loss {history[-1]['loss']:.4f}; checkpoint at {out / 'checkpoint_final.oryx'}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    count = args.count
    spec = cfg.data.spec(cfg.seed)
    out_path = Path(args.out_file)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        if cfg.data.kind == "mqar":
            for seq in generate_mqar(spec, count):
                f.write(json.dumps({
                    "tokens": seq.tokens.tolist(),
                    "answer_positions": np.where(seq.answer_mask)[0].tolist(),
                }) + "\n")
        else:
            for task in generate_needle(spec, count):
                f.write(json.dumps({
                    "context": task.context.tolist(),
                    "query": task.query.tolist(),
                    "answer": task.answer.tolist(),
                }) + "\n")
    _log(f"wrote {count} {cfg.data.kind} records to {out_path}")
    return 0


def _eval_sequences(cfg: RunConfig, count: int):
    spec = cfg.data.spec(cfg.data.eval_seed)
    if cfg.data.kind == "mqar":
        return [s.tokens for s in generate_mqar(spec, count)]
    return [t.flat() for t in generate_needle(spec, count)]


def cmd_switch_curve(args) -> int:
    cfg = _load_config(args)
    params = _restore(cfg, args.checkpoint)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    seqs = _eval_sequences(cfg, exp.eval_count)
    t = len(seqs[0])
    switch = exp.switch_position if exp.switch_position is not None else t // 2
    plans = {
        "all_attention": ModePlan.constant(A),
        "all_linear": ModePlan.constant(L),
        f"attention_to_linear_at_{switch}": ModePlan.switching(A, [(switch, L)]),
        f"linear_to_attention_at_{switch}": ModePlan.switching(L, [(switch, A)]),
    }
    for name, plan in plans.items():
        curve = nll_by_position(params, cfg.model, seqs, plan, exp.smoothing_window)
        rec = {
            "plan": name,
            "window": curve.window,
            "positions": list(range(1, t)),
            "nll": curve.values.tolist(),
            "smoothed": curve.smoothed().tolist(),
        }
        path = out / f"curve_{name}.json"
        with open(path, "w") as f:
            json.dump(rec, f)
        _log(f"{name}: mean nll {curve.values.mean():.4f} -> {path}")
    return 0


def cmd_retrieval_eval(args) -> int:
    cfg = _load_config(args)
    if cfg.data.kind != "needle":
        raise ConfigError("retrieval-eval requires data.kind: needle")
    params = _restore(cfg, args.checkpoint)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = generate_needle(cfg.data.needle_spec(cfg.data.eval_seed), cfg.experiment.eval_count)
    combos = [(A, A), (L, A), (A, L), (L, L)]
    results = {}
    print(f"{'context':>10s} {'prompt+gen':>10s} {'accuracy':>9s}")
    for ctx_mode, prompt_mode in combos:
        acc = cross_mode_retrieval_eval(
            params, cfg.model, tasks, ctx_mode, prompt_mode, cfg.experiment.split_fraction
        )
        results[f"{ctx_mode.value}+{prompt_mode.value}"] = acc
        print(f"{ctx_mode.value:>10s} {prompt_mode.value:>10s} {acc:9.3f}")
    with open(out / "retrieval.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return 0


def cmd_flops(args) -> int:
    rows = flops_table(args.t, args.c, args.dk, args.dv, args.delta)
    print(f"{'T':>6s} {'C':>5s} {'delta':>6s} {'attention':>14s} {'linear':>14s} "
          f"{'oryx':>14s} {'crossover_T':>12s}")
    for r in rows:
        print(f"{r['T']:6d} {r['C']:5d} {r['delta']:6.2f} {r['attention']:14d} "
              f"{r['linear']:14d} {r['oryx']:14d} {r['crossover_T']:12d}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    tensors, header = load_checkpoint(args.path)
    print(f"version {header['version']}  precision {header['precision']}  "
          f"tensors {header['n_tensors']}  digest {header['digest'].hex()[:16]}...")
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"  {name:40s} {str(arr.dtype):8s} {arr.shape}")
    print(f"total parameters: {total}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oryx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config (YAML)")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--precision", choices=("f32", "f64"), default=None)
        sp.add_argument("--out", default=None, help="override output directory")

    sp = sub.add_parser("train", help="train a model on the configured synthetic task")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("gen-data", help="write the configured dataset to a JSONL file")
    common(sp)
    sp.add_argument("--out-file", required=True)
    sp.add_argument("--count", type=int, default=64)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("switch-curve", help="per-position NLL under mode-switch plans")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_switch_curve)

    sp = sub.add_parser("retrieval-eval", help="cross-mode context/prompt retrieval accuracy")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_retrieval_eval)

    sp = sub.add_parser("flops", help="analytic FLOPs table and crossover lengths")
    sp.add_argument("--t", type=int, nargs="+", default=[512, 1024, 2048, 4096])
    sp.add_argument("--c", type=int, nargs="+", default=[128])
    sp.add_argument("--dk", type=int, default=128)
    sp.add_argument("--dv", type=int, default=128)
    sp.add_argument("--delta", type=float, nargs="+", default=[0.75])
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("inspect-checkpoint", help="print checkpoint header and directory")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_inspect_checkpoint)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return 2
    except CheckpointError as e:
        _log(f"checkpoint error: {e}")
        return 3
    except OSError as e:
        _log(f"io error: {e}")
        return 3
    except NumericsError as e:
        _log(f"numeric failure: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
