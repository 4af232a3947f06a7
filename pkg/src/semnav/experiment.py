"""Experiment plumbing: corpora, variants, and the pretrain -> finetune -> eval pipeline.

A single ``key = value`` file configures a run.  Keys prefixed ``pretrain.``
and ``finetune.`` set fields of the corresponding configs; the rest set
:class:`ExperimentConfig` fields.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .data import EnvCache, sample_routes
from .errors import InvalidArgument
from .finetune import FinetuneConfig, FinetuneResult, run_finetuning
from .metrics import METRIC_NAMES, SplitReport, evaluate_split
from .model.agent import Agent, ModelConfig
from .pretrain import PretrainConfig, PretrainResult, initial_codebook, run_pretraining
from .seeding import derive_seed
from .tokenizer import Codebook, make_codebook
from .world import generate_environment

ADOPTED_TASKS = ("MLM", "ITM", "SAP")
NEW_TASKS = ("MTM", "MPM", "APIG")


@dataclass(frozen=True)
class ExperimentConfig:
    grid_size: int = 4
    n_train_envs: int = 8
    n_val_envs: int = 4
    train_seed_base: int = 1000
    val_seed_base: int = 900000  # disjoint from training seeds: the unseen split
    codebook_seed: int = 0
    tau: float = 0.25
    n_seeds: int = 3
    variants: str = "baseline;all"
    # "adopted": scale pre-training steps so every variant gives the adopted
    # tasks the same expected number of updates; "fixed": use pretrain.steps as is
    budget: str = "adopted"
    val_episodes: int = 200


@dataclass(frozen=True)
class RunSpec:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)


def parse_spec(text: str) -> RunSpec:
    values = cfgmod.parse_text(text)
    groups: dict[str, dict[str, str]] = {"experiment": {}, "pretrain": {}, "finetune": {}, "model": {}}
    for k, v in values.items():
        prefix, _, rest = k.partition(".")
        if rest and prefix in ("pretrain", "finetune", "model"):
            groups[prefix][rest] = v
        else:
            groups["experiment"][k] = v
    spec = RunSpec(
        cfgmod.apply(ExperimentConfig, groups["experiment"]),
        cfgmod.apply(PretrainConfig, groups["pretrain"]),
        cfgmod.apply(FinetuneConfig, groups["finetune"]),
        cfgmod.apply(ModelConfig, groups["model"]),
    )
    spec.pretrain.validate()
    spec.finetune.validate()
    return spec


def spec_text(spec: RunSpec) -> str:
    lines = []
    for prefix, obj in (("", spec.experiment), ("pretrain.", spec.pretrain), ("finetune.", spec.finetune), ("model.", spec.model)):
        for line in cfgmod.to_text(obj).splitlines():
            lines.append(prefix + line)
    return "\n".join(lines) + "\n"


def with_seed(spec: RunSpec, seed: int) -> RunSpec:
    return dataclasses.replace(
        spec,
        pretrain=dataclasses.replace(spec.pretrain, seed=seed),
        finetune=dataclasses.replace(spec.finetune, seed=seed),
    )


# -- corpora --------------------------------------------------------------------


@dataclass
class Corpus:
    codebook: Codebook
    train: list[EnvCache]
    val: list[EnvCache]


def build_corpus(exp: ExperimentConfig) -> Corpus:
    cb = make_codebook(exp.codebook_seed, exp.tau)
    train = [EnvCache(generate_environment(exp.train_seed_base + i, exp.grid_size), cb) for i in range(exp.n_train_envs)]
    val = [EnvCache(generate_environment(exp.val_seed_base + i, exp.grid_size), cb) for i in range(exp.n_val_envs)]
    return Corpus(cb, train, val)


def val_routes(corpus: Corpus, n: int, seed: int = 0):
    per = max(1, -(-n // len(corpus.val)))
    routes = [rt for i, c in enumerate(corpus.val) for rt in sample_routes(c, per, derive_seed(seed, "eval-routes", i))]
    return routes[:n]


# -- variants -------------------------------------------------------------------

PRESETS = {
    "baseline": "tasks=MLM+ITM+SAP",
    "mtm": "tasks=MLM+ITM+SAP+MTM",
    "mpm": "tasks=MLM+ITM+SAP+MPM",
    "apig": "tasks=MLM+ITM+SAP+APIG",
    "all": "tasks=MLM+ITM+SAP+MTM+MPM+APIG",
    "all-static": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/codebook=static",
    "all-dynamic": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/codebook=dynamic",
    "all-none": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/codebook=none",
    "all-sample": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/agg=sample",
    "all-weighted": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/agg=weighted",
    "all-weighted-block": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/agg=weighted-block",
    "all-lat": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/lat=1",
    "all-nolat": "tasks=MLM+ITM+SAP+MTM+MPM+APIG/lat=0",
}


@dataclass(frozen=True)
class Variant:
    name: str
    tasks: tuple[str, ...] = ("MLM", "ITM", "SAP", "MTM", "MPM", "APIG")
    codebook: str | None = None
    aggregation: str | None = None
    lat: bool | None = None


def parse_variant(text: str) -> Variant:
    """A preset name, or ``name:key=value/key=value`` with keys tasks, codebook, agg, lat."""
    text = text.strip()
    name, _, body = text.partition(":")
    if not body:
        if name not in PRESETS:
            raise InvalidArgument(f"unknown variant {name!r}")
        body = PRESETS[name]
    kw = {}
    for item in body.split("/"):
        k, _, v = item.partition("=")
        k, v = k.strip(), v.strip()
        if k == "tasks":
            tasks = tuple(t for t in v.split("+") if t)
            bad = set(tasks) - set(ADOPTED_TASKS + NEW_TASKS)
            if bad or not tasks:
                raise InvalidArgument(f"bad task list {v!r}")
            kw["tasks"] = tasks
        elif k == "codebook":
            kw["codebook"] = v
        elif k == "agg":
            kw["aggregation"] = v
        elif k == "lat":
            kw["lat"] = v not in ("0", "false", "no", "off")
        else:
            raise InvalidArgument(f"unknown variant key {k!r}")
    return Variant(name, **kw)


def parse_variants(text: str) -> list[Variant]:
    return [parse_variant(v) for v in text.replace("\n", ";").split(";") if v.strip()]


def apply_variant(spec: RunSpec, v: Variant) -> RunSpec:
    weights = {t: spec.pretrain.task_weights.get(t, 3.0 if t == "MTM" else 1.0) for t in v.tasks}
    pre = dataclasses.replace(spec.pretrain, task_weights=weights)
    if v.codebook is not None:
        pre = dataclasses.replace(pre, codebook=v.codebook)
    if v.aggregation is not None:
        pre = dataclasses.replace(pre, aggregation=v.aggregation)
    if spec.experiment.budget == "adopted":
        adopted = sum(w for t, w in weights.items() if t in ADOPTED_TASKS)
        full = sum(weights.values())
        if adopted > 0:
            pre = dataclasses.replace(pre, steps=int(round(spec.pretrain.steps * full / adopted)))
    elif spec.experiment.budget != "fixed":
        raise InvalidArgument(f"unknown budget {spec.experiment.budget!r}")
    ft = dataclasses.replace(spec.finetune, aggregation=pre.aggregation)
    if v.lat is not None:
        ft = dataclasses.replace(ft, lat_weight=1.0 if v.lat else 0.0, il_rl_ratio=0.15 if v.lat else 0.2)
    return dataclasses.replace(spec, pretrain=pre, finetune=ft)


# -- pipeline -------------------------------------------------------------------


@dataclass
class RunOutcome:
    pretrain: PretrainResult | None
    finetune: FinetuneResult | None
    report: SplitReport


def pretrain_stage(spec: RunSpec, corpus: Corpus, seed: int, log_file=None) -> tuple[Agent, np.ndarray, PretrainResult | None]:
    """Fresh agent for ``seed``, pre-trained when steps > 0; returns (agent, S, result)."""
    spec = with_seed(spec, seed)
    agent = Agent(spec.model, seed=derive_seed(seed, "model-init"))
    if spec.pretrain.steps > 0:
        pre = run_pretraining(spec.pretrain, corpus.train, agent, log_file)
        return agent, pre.codebook.subset, pre
    return agent, initial_codebook(spec.pretrain, corpus.train).subset, None


def finetune_stage(spec: RunSpec, corpus: Corpus, seed: int, agent: Agent, S, eval_log=None) -> tuple[FinetuneResult, SplitReport]:
    spec = with_seed(spec, seed)
    ft = run_finetuning(spec.finetune, agent, corpus.train, corpus.val, S, eval_log)
    report = evaluate_split(agent, val_routes(corpus, spec.experiment.val_episodes), S, spec.finetune.max_steps)
    return ft, report


def clone_agent(agent: Agent) -> Agent:
    out = Agent(agent.config, seed=0)
    out.params.load_state(agent.params.state())
    return out


def run_pipeline(spec: RunSpec, corpus: Corpus, seed: int, pretrain_log=None, eval_log=None) -> RunOutcome:
    agent, S, pre = pretrain_stage(spec, corpus, seed, pretrain_log)
    ft, report = finetune_stage(spec, corpus, seed, agent, S, eval_log)
    return RunOutcome(pre, ft, report)


def ablation_rows(spec: RunSpec, variants: list[Variant], seeds: list[int], corpus: Corpus | None = None, progress=None) -> list[dict]:
    """One row per (variant, seed).  Variants whose pre-training settings coincide
    share one pre-trained checkpoint per seed."""
    corpus = corpus or build_corpus(spec.experiment)
    shared: dict[tuple, tuple[Agent, np.ndarray]] = {}
    rows = []
    for v in variants:
        vspec = apply_variant(spec, v)
        key_base = json.dumps([vspec.pretrain.describe(), vspec.model.to_dict()], sort_keys=True, default=str)
        for s in seeds:
            key = (key_base, s)
            if key not in shared:
                agent, S, _ = pretrain_stage(vspec, corpus, s)
                shared[key] = (clone_agent(agent), S)
            base, S = shared[key]
            agent = clone_agent(base)
            _, report = finetune_stage(vspec, corpus, s, agent, S)
            row = {"variant": v.name, "seed": s, **{k: report.aggregate.as_dict()[k] for k in METRIC_NAMES}}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def variant_means(rows: list[dict]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {k: float(np.mean([r[k] for r in sel])) for k in METRIC_NAMES}
    return out
