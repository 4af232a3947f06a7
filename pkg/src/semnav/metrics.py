"""Trajectory metrics over the navigation graph: SR, SPL, NE, TL, nDTW, sDTW, CLS.

Distances are shortest-path hop counts; success means stopping within
``D_TH`` hops of the goal.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import InvalidArgument
from .world import Environment, bfs_distances

D_TH = 1.0
METRIC_NAMES = ("sr", "spl", "ne", "tl", "ndtw", "sdtw", "cls")
BUCKETS = (3, 4, 5, 6)


@dataclass(frozen=True)
class EvalResult:
    sr: float
    spl: float
    ne: float
    tl: float
    ndtw: float
    sdtw: float
    cls: float

    def as_dict(self) -> dict:
        return asdict(self)


def distance_matrix(env: Environment) -> np.ndarray:
    """All-pairs hop distances, computed once per environment object."""
    d = env.__dict__.get("_dist_matrix")
    if d is None:
        d = np.stack([bfs_distances(env, s) for s in range(env.n_nodes)])
        env.__dict__["_dist_matrix"] = d
    return d


def dtw(a, b, dist: np.ndarray) -> float:
    """Exact dynamic time warping between node sequences with graph-distance cost."""
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = dist[a[i - 1], b[j - 1]] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def _check_path(path, env: Environment) -> list[int]:
    path = [int(x) for x in path]
    if not path:
        raise InvalidArgument("paths must be nonempty")
    for x in path:
        env._check(x)
    return path


def evaluate_trajectory(pred, ref, env: Environment, d_th: float = D_TH) -> EvalResult:
    pred, ref = _check_path(pred, env), _check_path(ref, env)
    dist = distance_matrix(env)
    ne = float(dist[pred[-1], ref[-1]])
    sr = 1.0 if ne <= d_th else 0.0
    len_pred, len_ref = len(pred) - 1, len(ref) - 1
    longest = max(len_pred, len_ref)
    spl = sr * len_ref / longest if longest > 0 else sr
    ndtw = math.exp(-dtw(pred, ref, dist) / (len(ref) * d_th))
    pc = float(np.mean([math.exp(-dist[r, pred].min() / d_th) for r in ref]))
    expected = pc * len_ref
    denom = expected + abs(expected - len_pred)
    ls = expected / denom if denom > 0 else 1.0
    return EvalResult(sr, spl, ne, float(len_pred), ndtw, sr * ndtw, pc * ls)


def mean_result(results: list[EvalResult]) -> EvalResult:
    if not results:
        raise InvalidArgument("no results to average")
    return EvalResult(**{f.name: float(np.mean([getattr(r, f.name) for r in results])) for f in fields(EvalResult)})


@dataclass
class SplitReport:
    aggregate: EvalResult
    per_episode: list[EvalResult]
    ref_lengths: list[int]
    buckets: dict[int, tuple[int, float]]  # path length -> (count, SR)
    paths: list[list[int]]

    def to_dict(self) -> dict:
        return {
            **self.aggregate.as_dict(),
            "n": len(self.per_episode),
            "buckets": {str(k): {"count": c, "sr": s} for k, (c, s) in self.buckets.items()},
        }


def bucketize(results: list[EvalResult], ref_lengths: list[int]) -> dict[int, tuple[int, float]]:
    out = {}
    for k in sorted(set(ref_lengths) | set(BUCKETS)):
        srs = [r.sr for r, n in zip(results, ref_lengths) if n == k]
        if srs or k in BUCKETS:
            out[k] = (len(srs), float(np.mean(srs)) if srs else 0.0)
    return out


def report_from_paths(pred_paths, routes) -> SplitReport:
    if not routes:
        raise InvalidArgument("empty evaluation set")
    results = [evaluate_trajectory(p, rt.path, rt.cache.env) for p, rt in zip(pred_paths, routes)]
    lengths = [len(rt.path) - 1 for rt in routes]
    return SplitReport(mean_result(results), results, lengths, bucketize(results, lengths), [list(p) for p in pred_paths])


def evaluate_split(agent, routes, S=None, max_steps: int = 10) -> SplitReport:
    """Greedy rollouts on every route, scored against its reference path."""
    from .finetune import rollout_batch

    trajs = rollout_batch(agent, routes, "greedy", max_steps=max_steps)
    return report_from_paths([t.nodes for t in trajs], routes)


def results_csv(report: SplitReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "path_length", *METRIC_NAMES])
    for i, (r, n) in enumerate(zip(report.per_episode, report.ref_lengths)):
        w.writerow([i, n, *(repr(float(getattr(r, k))) for k in METRIC_NAMES)])
    return buf.getvalue()
