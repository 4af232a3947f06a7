"""Command-line entry point.

    semnav worldgen   write the train/val environments as JSON
    semnav pretrain   pre-train an agent, write checkpoint + JSONL log
    semnav finetune   fine-tune (optionally from --ckpt), write checkpoint + logs
    semnav eval       evaluate a checkpoint on the unseen split
    semnav generate   next-view reconstruction study for a checkpoint
    semnav gradcheck  finite-difference check of every parameter group
    semnav ablate     run variants x seeds, write one CSV row per pair

Exit codes: 0 success, 1 failed check, 2 config error, 3 divergence, 4 I/O error.
Every artifact-producing command writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import world
from .codebook import CodebookState
from .errors import InvalidArgument, NotFound, TrainingDiverged
from .experiment import (
    Corpus,
    RunSpec,
    ablation_rows,
    apply_variant,
    build_corpus,
    finetune_stage,
    parse_spec,
    parse_variant,
    parse_variants,
    pretrain_stage,
    spec_text,
    val_routes,
    variant_means,
    with_seed,
)
from .generation import X_PERCENTS, reconstruction_study, side_by_side
from .metrics import METRIC_NAMES, evaluate_split, results_csv
from .model.agent import Agent, ModelConfig
from .model.gradcheck import run_gradcheck
from .model.params import checkpoint_bytes, read_checkpoint
from .pretrain import aggregation_mode, initial_codebook
from .seeding import derive_rng

MANIFEST_SCHEMA = "semnav-manifest/1"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def blob_hash(data: bytes) -> str:
    """Git-style content hash: sha1 over 'blob <len>\\0' + data."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def load_spec(args) -> tuple[RunSpec, bytes]:
    raw = b""
    if args.config:
        try:
            with open(args.config, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from e
    try:
        spec = parse_spec(raw.decode("utf-8"))
    except (InvalidArgument, UnicodeDecodeError) as e:
        raise ConfigError(str(e)) from e
    if getattr(args, "variant", None) and args.command in ("pretrain", "finetune"):
        spec = apply_variant(spec, parse_variant(args.variant))
    return with_seed(spec, args.seed), raw


class Outputs:
    """Writes files under one directory and records their hashes for the manifest."""

    def __init__(self, out_dir: str):
        self.dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.hashes: dict[str, str] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def write(self, name: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        with open(self.path(name), "wb") as f:
            f.write(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()

    def manifest(self, args, spec: RunSpec, inputs: dict[str, bytes], extra: dict | None = None) -> None:
        text = spec_text(spec)
        record = {
            "schema": MANIFEST_SCHEMA,
            "command": args.command,
            "seed": args.seed,
            "variant": getattr(args, "variant", None),
            "config_hash": hashlib.sha256(text.encode("utf-8")).hexdigest(),
            "config": text,
            "inputs": {k: blob_hash(v) for k, v in sorted(inputs.items())},
            "outputs": dict(sorted(self.hashes.items())),
            **(extra or {}),
        }
        with open(self.path("manifest.json"), "w") as f:
            f.write(json.dumps(record, indent=2, sort_keys=True) + "\n")


def save_agent(agent: Agent, codebook: CodebookState, spec: RunSpec, stage: str, aggregation: str | None = None) -> bytes:
    """Checkpoint with the codebook scores as float64 extras; ``aggregation`` names the pre-training mode."""
    meta = {
        "stage": stage,
        "model": agent.config.to_dict(),
        "aggregation": aggregation or spec.pretrain.aggregation,
        "selected_S": list(codebook.selected_S),
        "codebook": {"lam": codebook.lam, "gamma": codebook.gamma, "dynamic": codebook.dynamic},
        "config": spec_text(spec),
    }
    extras = {"codebook.s_f": codebook.s_f, "codebook.s_d": codebook.s_d, "codebook.s_t": codebook.s_t}
    return checkpoint_bytes(agent.params, extras, meta)


def load_agent(path: str) -> tuple[Agent, CodebookState, dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    f32, f64, meta = read_checkpoint(blob)
    agent = Agent(ModelConfig(**meta["model"]), seed=0)
    missing = set(agent.params.names()) - set(f32)
    if missing:
        raise InvalidArgument(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    agent.params.load_state(f32)
    cb = meta["codebook"]
    state = CodebookState(
        f64["codebook.s_f"], f64["codebook.s_d"], f64["codebook.s_t"], tuple(meta["selected_S"]), cb["lam"], cb["gamma"], cb["dynamic"]
    )
    return agent, state, meta, blob


def _codebook_for(spec: RunSpec, corpus: Corpus, pre) -> CodebookState:
    return pre.codebook if pre is not None else initial_codebook(spec.pretrain, corpus.train)


# -- commands ----------------------------------------------------------------------


def cmd_worldgen(args) -> int:
    spec, raw = load_spec(args)
    exp = spec.experiment
    out = Outputs(args.out)
    for split, base, n in (("train", exp.train_seed_base, exp.n_train_envs), ("val", exp.val_seed_base, exp.n_val_envs)):
        for i in range(n):
            env = world.generate_environment(base + i, exp.grid_size)
            out.write(f"{split}_{i:02d}.json", world.dumps(env))
            ep = world.sample_episode(env, args.seed + i)
            out.write(f"{split}_{i:02d}_episode.json", world.dumps(ep))
    out.manifest(args, spec, {"config": raw})
    print(f"wrote {len(out.hashes)} files to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    spec, raw = load_spec(args)
    corpus = build_corpus(spec.experiment)
    out = Outputs(args.out)
    log_path = out.path("pretrain_log.jsonl")
    with open(log_path, "w") as log:
        agent, _, pre = pretrain_stage(spec, corpus, args.seed, log)
    with open(log_path, "rb") as f:
        out.hashes["pretrain_log.jsonl"] = hashlib.sha256(f.read()).hexdigest()
    out.write("pretrain.snmd", save_agent(agent, _codebook_for(spec, corpus, pre), spec, "pretrain"))
    out.manifest(args, spec, {"config": raw}, {"steps": spec.pretrain.steps})
    if pre is not None and pre.log:
        last = pre.log[-min(20, len(pre.log)) :]
        print(f"pretrain: {len(pre.log)} steps, mean loss over last {len(last)} = {np.mean([r['loss'] for r in last]):.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    spec, raw = load_spec(args)
    corpus = build_corpus(spec.experiment)
    inputs = {"config": raw}
    aggregation = None
    if args.ckpt:
        agent, cb, meta, blob = load_agent(args.ckpt)
        inputs["ckpt"] = blob
        aggregation = meta["aggregation"]
    else:
        agent, _, pre = pretrain_stage(dataclasses.replace(spec, pretrain=dataclasses.replace(spec.pretrain, steps=0)), corpus, args.seed)
        cb = _codebook_for(spec, corpus, pre)
    out = Outputs(args.out)
    eval_path = out.path("eval_log.jsonl")
    with open(eval_path, "w") as log:
        ft, report = finetune_stage(spec, corpus, args.seed, agent, cb.subset, log)
    with open(eval_path, "rb") as f:
        out.hashes["eval_log.jsonl"] = hashlib.sha256(f.read()).hexdigest()
    out.write("train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in ft.train_log))
    out.write("finetune.snmd", save_agent(agent, cb, spec, "finetune", aggregation))
    out.write("metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    out.manifest(args, spec, inputs)
    print(" ".join(f"{k}={report.aggregate.as_dict()[k]:.4f}" for k in METRIC_NAMES))
    return EXIT_OK


def _require_ckpt(args) -> None:
    if not args.ckpt:
        raise ConfigError(f"{args.command} needs --ckpt")


def cmd_eval(args) -> int:
    _require_ckpt(args)
    spec, raw = load_spec(args)
    agent, cb, _, blob = load_agent(args.ckpt)
    corpus = build_corpus(spec.experiment)
    report = evaluate_split(agent, val_routes(corpus, spec.experiment.val_episodes, args.seed), cb.subset, spec.finetune.max_steps)
    out = Outputs(args.out)
    out.write("metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    out.write("episodes.csv", results_csv(report))
    out.manifest(args, spec, {"config": raw, "ckpt": blob})
    print(" ".join(f"{k}={report.aggregate.as_dict()[k]:.4f}" for k in METRIC_NAMES))
    return EXIT_OK


def cmd_generate(args) -> int:
    _require_ckpt(args)
    spec, raw = load_spec(args)
    agent, cb, meta, blob = load_agent(args.ckpt)
    mode, _ = aggregation_mode(meta["aggregation"])
    if mode != "weighted":
        raise InvalidArgument("generation needs a checkpoint pre-trained with weighted aggregation")
    corpus = build_corpus(spec.experiment)
    routes = val_routes(corpus, args.views, args.seed)
    out = Outputs(args.out)
    summaries, dumps = [], []
    for x in args.x:
        summary, reports = reconstruction_study(agent, routes, cb.subset, x, derive_rng(args.seed, "generate", x))
        summaries.append(summary.to_dict())
        out.write(f"reconstruction_x{x}.jsonl", "".join(r.to_json() + "\n" for r in reports))
        for k, r in enumerate(reports[:3]):
            dumps.append(f"view {k}, x = {x}, filled patches {list(r.filled)}\n")
            dumps.append(side_by_side(r.truth, r.tokens, r.baseline_random.tokens, routes[k].cache.codebook) + "\n")
        print(f"x={x}: model distance {summary.model_distance:.4f}  random distance {summary.random_distance:.4f}"
              f"  feature accuracy {summary.model_feature_accuracy:.4f} vs {summary.random_feature_accuracy:.4f}")
    out.write("summary.json", json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    out.write("side_by_side.txt", "".join(dumps))
    out.manifest(args, spec, {"config": raw, "ckpt": blob})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    for line in report.lines():
        print(line)
    print("gradcheck: " + ("PASS" if report.ok else "FAIL"))
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    spec, raw = load_spec(args)
    variants = parse_variants(args.variant if args.variant else spec.experiment.variants)
    seeds = [args.seed + i for i in range(spec.experiment.n_seeds)]
    out = Outputs(args.out)

    def progress(row):
        print(f"{row['variant']:>20s} seed={row['seed']} " + " ".join(f"{k}={row[k]:.4f}" for k in METRIC_NAMES), flush=True)

    rows = ablation_rows(spec, variants, seeds, progress=progress)
    fields = ["variant", "seed", *METRIC_NAMES]
    s = io.StringIO()
    w = csv.DictWriter(s, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k in METRIC_NAMES else r[k]) for k in fields})
    out.write("ablation.csv", s.getvalue())
    means = variant_means(rows)
    out.write("means.json", json.dumps(means, indent=2, sort_keys=True) + "\n")
    out.manifest(args, spec, {"config": raw}, {"seeds": seeds, "variants": [v.name for v in variants]})
    for name, m in means.items():
        print(f"mean {name:>20s} " + " ".join(f"{k}={m[k]:.4f}" for k in METRIC_NAMES))
    return EXIT_OK


COMMANDS = {
    "worldgen": cmd_worldgen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semnav", description="Desk-scale navigation pre-training with future-view semantics")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=os.path.join("runs", name))
        p.add_argument("--ckpt", help="checkpoint to start from or evaluate")
        p.add_argument("--variant", help="variant name or spec; for ablate a ';'-separated list")
        if name == "generate":
            p.add_argument("--x", type=lambda s: [int(v) for v in s.split(",")], default=list(X_PERCENTS))
            p.add_argument("--views", type=int, default=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as e:
        print(str(e), file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InvalidArgument, NotFound) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
