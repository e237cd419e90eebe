"""Command-line experiment runner.

Subcommands: ``make-synthetic``, ``train``, ``eval``, ``sweep``,
``manipulate`` and ``verify-theorems``. Each accepts ``--config`` (JSON),
``--seed`` and ``--out``; command-line values override the config file and
the resolved configuration is stored in every artifact's manifest.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointFormatError, capture, config_hash, load_checkpoint, restore, save_checkpoint
from .corpus import (ClusterSpec, Corpus, Vocab, build_vocab, clustered_corpus,
                     generate_clustered_dataset, load_corpus, read_lines, write_lines)
from .metrics import LMConfig, apply_offset, attribute_vector, corpus_bleu, evaluate_model, forward_reverse_ppl, interpolate
from .objectives import Optimizers, TrainConfig, TrainingError, train_epoch
from .seqmodel import ModelConfig, SeqAutoencoder
from . import theorems

DEFAULTS: dict = {
    "data": {"synthetic": {}},
    "model": {},
    "train": {},
    "eval": {"ks": [10, 20, 50, 100], "ppl_samples": 0, "lm": {}},
    "save_every": 1,
}

PRESETS: Dict[str, dict] = {
    # desk-scale settings for the clustered binary benchmark
    "synthetic": {
        "data": {"synthetic": {"num_clusters": 5, "per_cluster": 100, "length": 50, "flip_prob": 0.2}},
        "model": {"embed_dim": 32, "hidden_dim": 64, "latent_dim": 2, "disc_hidden": 64, "max_length": 50},
        "train": {"objective": "daae", "perturbation": {"kind": "bit-flip", "p": 0.2}, "batch_size": 50,
                  "epochs": 800, "lr": 1e-3, "beta1": 0.5},
        "eval": {"ks": [10, 20, 50, 100], "ppl_samples": 0, "lm": {}},
    },
    "text": {
        "data": {"corpus": None, "labels": None, "min_count": 1, "max_length": 30},
        "model": {"embed_dim": 128, "hidden_dim": 256, "latent_dim": 32, "disc_hidden": 128, "max_length": 30},
        "train": {"objective": "daae", "perturbation": {"kind": "word-delete", "p": 0.3}, "batch_size": 256,
                  "epochs": 10},
    },
}


class UsageError(ValueError):
    pass


# configuration

def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path: Optional[str] = None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = deep_merge(cfg, PRESETS[preset])
    if path:
        cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
    return deep_merge(cfg, overrides or {})


def git_describe() -> Optional[str]:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def make_manifest(config: dict, **extra) -> dict:
    return {"config": config, "config_hash": config_hash(config), "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "git": git_describe(), **extra}


def load_data(config: dict, vocab: Optional[Vocab] = None):
    """``(corpus, vocab)`` from the ``data`` section: a synthetic spec or corpus paths."""
    data = config["data"]
    max_length = config["model"].get("max_length", 50)
    if data.get("corpus"):
        lines = read_lines(data["corpus"])
        vocab = vocab or build_vocab(lines, data.get("min_count", 1))
        corpus = load_corpus(data["corpus"], vocab, data.get("max_length", max_length), data.get("labels"))
        return corpus, vocab
    spec = ClusterSpec(**data.get("synthetic", {}))
    return clustered_corpus(spec, vocab)


def build_model(config: dict, vocab: Vocab) -> SeqAutoencoder:
    tc = TrainConfig(**config["train"])
    mc = dict(config["model"])
    mc["variational"] = tc.objective in ("beta-vae", "laae")
    return SeqAutoencoder(ModelConfig(vocab_size=len(vocab), **mc), tc.seed)


def model_from_checkpoint(ck: Checkpoint) -> SeqAutoencoder:
    vocab = Vocab(ck.manifest["vocab"])
    model = build_model(ck.manifest["config"], vocab)
    restore(ck, model)
    return model


# training

def _append_jsonl(path: Path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def run_training(config: dict, out: Path, resume: bool = False, log=None) -> SeqAutoencoder:
    """Train per ``config`` into ``out``: ``checkpoint.daae`` and ``metrics.jsonl``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.daae"
    metrics_path = out / "metrics.jsonl"
    corpus, vocab = load_data(config)
    tc = TrainConfig(**config["train"])
    model = build_model(config, vocab)
    optim = Optimizers(model, tc)
    manifest = make_manifest(config, vocab=vocab.to_list())
    start = 0
    if resume and ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        if ck.manifest.get("config_hash") != manifest["config_hash"]:
            raise UsageError("checkpoint was written with a different configuration")
        restore(ck, model, optim)
        manifest = ck.manifest
        start = ck.epoch
    elif metrics_path.exists():
        metrics_path.unlink()
    save_every = max(1, int(config.get("save_every", 1)))
    for epoch in range(start, tc.epochs):
        try:
            row = train_epoch(model, corpus, tc, optim, epoch)
        except TrainingError as exc:
            failed = dict(manifest, status="failed", error=str(exc))
            save_checkpoint(ckpt_path.with_suffix(".failed.daae"), capture(model, optim, failed, epoch))
            raise
        _append_jsonl(metrics_path, {"config_hash": manifest["config_hash"], "epoch": epoch + 1, **row})
        if log:
            log(f"epoch {epoch + 1}/{tc.epochs} " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
        if (epoch + 1) % save_every == 0 or epoch + 1 == tc.epochs:
            save_checkpoint(ckpt_path, capture(model, optim, dict(manifest, status="ok"), epoch + 1))
    if start >= tc.epochs and not ckpt_path.exists():
        save_checkpoint(ckpt_path, capture(model, optim, dict(manifest, status="ok"), start))
    return model


def run_eval(ck: Checkpoint, config: dict, corpus: Corpus, model_id: str, need_purity: bool = False):
    if need_purity and corpus.labels is None:
        raise UsageError("purity requested but the corpus has no label sidecar")
    model = model_from_checkpoint(ck)
    ev = config.get("eval", {})
    ks = [k for k in ev.get("ks", [10]) if k < len(corpus)]
    report = evaluate_model(model, corpus, model_id, ks=ks, seed=int(config["train"].get("seed", 0)),
                            ppl_samples=int(ev.get("ppl_samples", 0)), lm_cfg=LMConfig(**ev.get("lm", {})))
    report.params["config_hash"] = ck.manifest.get("config_hash")
    return report


# subcommands

def cmd_make_synthetic(args) -> int:
    config = resolve_config(args.config, args.preset)
    spec_d = dict(config["data"].get("synthetic", {}))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = ClusterSpec(**spec_d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines, labels, _ = generate_clustered_dataset(spec)
    write_lines(out / "synthetic.txt", lines)
    write_lines(out / "synthetic.labels", [str(l) for l in labels])
    man = make_manifest({"data": {"synthetic": spec_d}})
    (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=1))
    print(f"wrote {len(lines)} sequences to {out / 'synthetic.txt'}")
    return 0


def _train_overrides(args) -> dict:
    over: dict = {"train": {}}
    if args.seed is not None:
        over["train"]["seed"] = args.seed
    for name in ("objective", "epochs"):
        if getattr(args, name, None) is not None:
            over["train"][name] = getattr(args, name)
    return over


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.preset, _train_overrides(args))
    try:
        run_training(config, Path(args.out), resume=args.resume, log=print)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    print(f"checkpoint: {Path(args.out) / 'checkpoint.daae'}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    config = ck.manifest["config"]
    if args.config:
        config = deep_merge(config, json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        config = deep_merge(config, {"train": {"seed": args.seed}})
    corpus, _ = load_data(config, Vocab(ck.manifest["vocab"]))
    report = run_eval(ck, config, corpus, str(args.checkpoint), need_purity=args.purity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.append_to(out / "eval.jsonl")
    print(report.to_json())
    return 0


SWEEP_AXES = {"beta": ("beta-vae", "beta"), "lambda1": ("laae", "lambda1"), "p": ("daae", None)}


def sweep_point(config: dict, axis: str, value: float) -> dict:
    objective, key = SWEEP_AXES[axis]
    train = {"objective": objective}
    if key:
        train[key] = value
    else:
        kind = config["train"].get("perturbation", {}).get("kind", "word-delete")
        train["perturbation"] = {"kind": kind, "p": value}
    return deep_merge(config, {"train": train})


def cmd_sweep(args) -> int:
    config = resolve_config(args.config, args.preset, _train_overrides(args))
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    values = [float(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_sweep(config, args.axis, values, out, log=print)
    print((out / "sweep.csv").read_text())
    return 0


def run_sweep(config: dict, axis: str, values: Sequence[float], out: Path, log=None) -> List[dict]:
    """Train and score one model per value; writes ``sweep.csv`` and ``sweep.jsonl``."""
    out = Path(out)
    rows = []
    samples = int(config.get("eval", {}).get("ppl_samples", 0)) or 100
    lm_cfg = LMConfig(**config.get("eval", {}).get("lm", {}))
    for value in values:
        cfg = sweep_point(config, axis, value)
        run_dir = out / f"{axis}={value:g}"
        model = run_training(cfg, run_dir, log=log)
        corpus, _ = load_data(cfg)
        seqs = [list(s) for s in corpus.sequences]
        bleu = corpus_bleu(model.reconstruct(seqs), seqs)
        fwd, rev, warn = forward_reverse_ppl(model, seqs, samples, lm_cfg, seed=int(cfg["train"].get("seed", 0)))
        row = {"value": value, "bleu": bleu, "forward_ppl": fwd, "reverse_ppl": rev}
        rows.append(row)
        _append_jsonl(out / "sweep.jsonl", {**row, "config_hash": config_hash(cfg), "axis": axis,
                                            "warnings": warn,
                                            "reverse_ppl": None if math.isinf(rev) else rev})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "bleu", "forward_ppl", "reverse_ppl"])
    for r in rows:
        w.writerow([f"{r['value']:g}", f"{r['bleu']:.4f}", f"{r['forward_ppl']:.4f}", f"{r['reverse_ppl']:.4f}"])
    tmp = out / "sweep.csv.tmp"
    tmp.write_text(buf.getvalue())
    tmp.replace(out / "sweep.csv")
    (out / "sweep.manifest.json").write_text(json.dumps(make_manifest(config, axis=axis, values=list(values)),
                                                        sort_keys=True, indent=1))
    return rows


def _read_inputs(path, vocab: Vocab, max_length: int) -> List[List[int]]:
    return [vocab.encode(l.split()[:max_length]) for l in read_lines(path) if l.split()]


def cmd_manipulate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ck)
    vocab = Vocab(ck.manifest["vocab"])
    if not args.input:
        raise UsageError("--input is required")
    seqs = _read_inputs(args.input, vocab, model.cfg.max_length)
    lines: List[str] = []
    if args.mode == "interpolate":
        if len(seqs) < 2:
            raise UsageError("interpolation needs an input file with two sequences")
        for t, s in zip(np.linspace(0, 1, args.steps), interpolate(model, seqs[0], seqs[1], args.steps)):
            lines.append(f"{t:.3f}\t{vocab.detokenize(s)}")
    elif args.mode == "arithmetic":
        if not args.labels or args.positive is None or args.negative is None:
            raise UsageError("arithmetic needs --labels, --positive and --negative")
        labels = [l.strip() for l in read_lines(args.labels)]
        if len(labels) != len(read_lines(args.input)):
            raise UsageError("label file and input file differ in length")
        raw = [l for l in read_lines(args.input)]
        pairs = [(vocab.encode(r.split()[: model.cfg.max_length]), lab) for r, lab in zip(raw, labels) if r.split()]
        pos = [s for s, l in pairs if l == args.positive][: args.per_label]
        neg = [s for s, l in pairs if l == args.negative][: args.per_label]
        v = attribute_vector(model, pos, neg)
        scales = [float(x) for x in args.scales.split(",")]
        for s in neg[: args.show]:
            for sc in scales:
                lines.append(f"{sc:+g}\t{vocab.detokenize(s)}\t{vocab.detokenize(apply_offset(model, s, v, sc))}")
    else:
        raise UsageError(f"unknown mode {args.mode!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_lines(out / f"{args.mode}.txt", lines)
    sys.stdout.write(text)
    return 0


def cmd_verify_theorems(args) -> int:
    config = resolve_config(args.config)
    th = config.get("theorems", {})
    seed = args.seed if args.seed is not None else th.get("seed", 0)
    reports = [
        theorems.verify_theorem1(seed=seed, **th.get("theorem1", {})),
        theorems.verify_theorem2(**th.get("theorem2", {})),
        theorems.verify_theorem3(seed=seed, **th.get("theorem3", {})),
    ]
    result = {"config_hash": config_hash(th), "reports": reports}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "theorems.json.tmp"
    tmp.write_text(json.dumps(result, indent=1, sort_keys=True, default=_json_default))
    tmp.replace(out / "theorems.json")
    violations = sum(r["fail"] for r in reports)
    inconclusive = sum(r["inconclusive"] for r in reports)
    for r in reports:
        print(f"{r['check']}: pass={r['pass']} fail={r['fail']} inconclusive={r['inconclusive']} skipped={r['skipped']}")
    print(f"violations={violations} solver_failures={inconclusive}")
    return 1 if violations else 0


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daae-lab", description="Sequence autoencoder latent-geometry lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    sp = common(sub.add_parser("make-synthetic", help="write the clustered binary dataset"))
    sp.add_argument("--preset", default="synthetic", choices=sorted(PRESETS))
    sp.set_defaults(func=cmd_make_synthetic)

    sp = common(sub.add_parser("train", help="train an autoencoder"))
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--objective")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.daae")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--purity", action="store_true", help="require label purity")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep", help="trade-off sweep over beta, lambda1 or p"))
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--objective")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("manipulate", help="interpolation or attribute arithmetic"), out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", required=True, choices=["interpolate", "arithmetic"])
    sp.add_argument("--input", help="input sequences, one per line")
    sp.add_argument("--labels", help="label sidecar for arithmetic mode")
    sp.add_argument("--positive")
    sp.add_argument("--negative")
    sp.add_argument("--per-label", type=int, default=100)
    sp.add_argument("--show", type=int, default=5)
    sp.add_argument("--scales", default="1,1.5,2")
    sp.add_argument("--steps", type=int, default=5)
    sp.set_defaults(func=cmd_manipulate)

    sp = common(sub.add_parser("verify-theorems", help="numerical checks of the geometry theorems"))
    sp.set_defaults(func=cmd_verify_theorems)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
