"""Procedural panoramic gridworld: environments, panoramas, episodes, instructions.

The world is a square lattice of cells grouped into 2x2-cell rooms.  Cells of a
room are always connected to each other; rooms are joined through doorways
chosen by a seeded spanning tree plus a few extra openings, so the graph is
connected but not a full lattice.

Every cell carries a panorama of 36 views (12 headings every 30 degrees x 3
elevation bands), and every view is a 4x4 grid of discrete feature tuples
(surface, color, object).  Views at level elevation that face an open doorway
show the neighbouring cell's room; closed directions show the room's wall.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, NotFound
from .seeding import hash_u64, hash_unit

SCHEMA = "semnav-world/1"

N_HEADINGS = 12
N_ELEVATIONS = 3
N_VIEWS = N_HEADINGS * N_ELEVATIONS
PATCH_GRID = 4
N_PATCHES = PATCH_GRID * PATCH_GRID
ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)
LEVEL = 1

N_SURFACES, N_COLORS, N_OBJECTS = 8, 8, 4
N_FEATURES = N_SURFACES * N_COLORS * N_OBJECTS  # 256

MIN_EDGES, MAX_EDGES = 3, 6
MAX_INSTRUCTION_WORDS = 31  # plus the <CLS> slot the model prepends

# north, east, south, west; heading index = 3 * direction
DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))
DIRECTION_NAMES = ("north", "east", "south", "west")
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")

_SPECIAL = ["<pad>", "<cls>", "<sep>", "<mask>"]
_WORDS = ["go", "enter", "the", "room", "stop", *DIRECTION_NAMES, *COLOR_NAMES]
VOCAB = tuple(_SPECIAL + _WORDS + [f"<unused{i}>" for i in range(128 - len(_SPECIAL) - len(_WORDS))])
VOCAB_SIZE = len(VOCAB)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, CLS, SEP, MASK = 0, 1, 2, 3


class FeatureTuple(NamedTuple):
    surface_id: int
    color_id: int
    object_id: int


def pack_feature(f) -> int:
    s, c, o = f
    return (int(s) * N_COLORS + int(c)) * N_OBJECTS + int(o)


def unpack_feature(i: int) -> FeatureTuple:
    i = int(i)
    return FeatureTuple(i // (N_COLORS * N_OBJECTS), (i // N_OBJECTS) % N_COLORS, i % N_OBJECTS)


class Node(NamedTuple):
    id: int
    row: int
    col: int
    room: int


class Room(NamedTuple):
    id: int
    color_id: int
    floor: int
    wall: int
    ceiling: int


@dataclass(frozen=True)
class View:
    patches: tuple[FeatureTuple, ...]
    heading: float
    elevation: float

    @property
    def packed(self) -> np.ndarray:
        return np.array([pack_feature(p) for p in self.patches], dtype=np.int64)


@dataclass(frozen=True)
class Panorama:
    node: int
    views: tuple[View, ...]


class Candidate(NamedTuple):
    """A navigable neighbour, or STOP when ``node`` is None."""

    node: int | None
    view_index: int | None
    view: View | None

    @property
    def is_stop(self) -> bool:
        return self.node is None


@dataclass
class Environment:
    seed: int
    grid_size: int
    nodes: list[Node]
    edges: list[tuple[int, int]]
    rooms: list[Room]
    objects: np.ndarray  # per node object id
    features: np.ndarray  # (n_nodes, 36, 16) packed feature ids
    _adj: dict[int, list[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        self._adj = {k: sorted(v) for k, v in adj.items()}

    @property
    def side(self) -> int:
        return 2 * self.grid_size

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self, node: int) -> list[int]:
        self._check(node)
        return self._adj[node]

    def _check(self, node) -> None:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < len(self.nodes):
            raise NotFound(f"unknown node {node!r}")

    @property
    def cell_features(self) -> dict[tuple[int, int, int, int], FeatureTuple]:
        """The full (node, heading, elevation, patch) -> FeatureTuple map."""
        out = {}
        for n in range(self.n_nodes):
            for v in range(N_VIEWS):
                h, e = divmod(v, N_ELEVATIONS)
                for p in range(N_PATCHES):
                    out[(n, h, e, p)] = unpack_feature(self.features[n, v, p])
        return out

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.grid_size == other.grid_size
            and self.nodes == other.nodes
            and self.edges == other.edges
            and self.rooms == other.rooms
            and np.array_equal(self.objects, other.objects)
            and np.array_equal(self.features, other.features)
        )


@dataclass
class Episode:
    instruction: list[int]
    path: list[int]
    panoramas: list[Panorama]
    candidates: list[list[Candidate]]
    teacher_actions: list[int]
    env_seed: int = 0

    @property
    def n_edges(self) -> int:
        return len(self.path) - 1


def view_index(heading: int, elevation: int) -> int:
    return heading * N_ELEVATIONS + elevation


def direction_between(env: Environment, a: int, b: int) -> int:
    na, nb = env.nodes[a], env.nodes[b]
    return DIRECTIONS.index((nb.row - na.row, nb.col - na.col))


# ---------------------------------------------------------------------------
# generation


def _room_of(r, c, grid_size):
    return (r // 2) * grid_size + (c // 2)


def _doorways(seed: int, grid_size: int) -> set[tuple[int, int]]:
    """Open cell pairs between adjacent rooms; guarantees connectivity."""
    side = 2 * grid_size
    cid = lambda r, c: r * side + c  # noqa: E731
    # each pair of adjacent rooms shares two boundary cell pairs
    boundary: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for r in range(side):
        for c in range(side):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= side or c2 >= side:
                    continue
                ra, rb = _room_of(r, c, grid_size), _room_of(r2, c2, grid_size)
                if ra != rb:
                    boundary.setdefault((ra, rb), []).append((cid(r, c), cid(r2, c2)))
    # randomized Kruskal over rooms with hash weights
    parent = list(range(grid_size * grid_size))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    pairs = sorted(boundary, key=lambda k: (float(hash_unit(seed, 11, k[0], k[1])), k))
    open_pairs: set[tuple[int, int]] = set()
    for ra, rb in pairs:
        cells = boundary[(ra, rb)]
        fa, fb = find(ra), find(rb)
        if fa != fb:
            parent[fa] = fb
            pick = int(hash_u64(seed, 12, ra, rb) % np.uint64(len(cells)))
            open_pairs.add(cells[pick])
        for a, b in cells:
            if hash_unit(seed, 13, a, b) < 0.3:
                open_pairs.add((a, b))
    return open_pairs


def _render_features(seed, grid_size, rooms, objects, edge_set) -> np.ndarray:
    side = 2 * grid_size
    n = side * side
    feats = np.zeros((n, N_HEADINGS, N_ELEVATIONS, PATCH_GRID, PATCH_GRID, 3), dtype=np.int64)
    room_arr = np.array([[r.color_id, r.floor, r.wall, r.ceiling] for r in rooms])
    pr = np.arange(PATCH_GRID)[:, None]
    pc = np.arange(PATCH_GRID)[None, :]
    for node in range(n):
        r, c = divmod(node, side)
        color, floor, wall, ceil = room_arr[_room_of(r, c, grid_size)]
        own_floor = (floor, color, objects[node])
        wall_t = (wall, color, 0)
        for h in range(N_HEADINGS):
            d = int(round(h / 3)) % 4
            dr, dc = DIRECTIONS[d]
            r2, c2 = r + dr, c + dc
            nb = r2 * side + c2 if 0 <= r2 < side and 0 <= c2 < side else -1
            is_open = nb >= 0 and (min(node, nb), max(node, nb)) in edge_set
            if is_open:
                ncolor, nfloor, _, nceil = room_arr[_room_of(r2, c2, grid_size)]
                beyond = (nfloor, ncolor, objects[nb])
                beyond_top = (nceil, ncolor, 0)
            else:
                beyond, beyond_top = wall_t, wall_t
            # diagonal headings see the opening shifted sideways
            shift = (0, -1, 1)[h % 3]
            gap = ((pc == 1 + shift) | (pc == 2 + shift)) & np.ones_like(pr, dtype=bool)
            down = np.where((pr <= 1)[..., None] & gap[..., None], beyond, own_floor)
            level = np.where((pr >= 1)[..., None] & gap[..., None], beyond, wall_t)
            level = np.where(((pr == 3) & ~gap)[..., None], own_floor, level)
            up = np.where(((pr == 3) & gap)[..., None], beyond_top, (ceil, color, 0))
            up = np.where(((pr == 3) & ~gap)[..., None], wall_t, up)
            feats[node, h, 0] = down
            feats[node, h, 1] = level
            feats[node, h, 2] = up
    # deterministic texture noise keyed on coordinates
    idx = np.indices(feats.shape[:5])
    node_r, node_c = np.divmod(idx[0], side)
    key = (node_r, node_c, idx[1], idx[2], idx[3] * PATCH_GRID + idx[4])
    u_obj = hash_unit(seed, 21, *key)
    u_srf = hash_unit(seed, 22, *key)
    feats[..., 2] = np.where(u_obj < 0.12, hash_u64(seed, 23, *key) % np.uint64(N_OBJECTS), feats[..., 2])
    feats[..., 0] = np.where(u_srf < 0.06, hash_u64(seed, 24, *key) % np.uint64(N_SURFACES), feats[..., 0])
    packed = (feats[..., 0] * N_COLORS + feats[..., 1]) * N_OBJECTS + feats[..., 2]
    return packed.reshape(n, N_VIEWS, N_PATCHES)


def generate_environment(seed: int, grid_size: int) -> Environment:
    """Build the environment for ``seed`` with ``grid_size`` rooms per side."""
    if int(grid_size) < 4:
        raise InvalidArgument(f"grid_size must be >= 4, got {grid_size}")
    grid_size = int(grid_size)
    side = 2 * grid_size
    rooms = []
    for rid in range(grid_size * grid_size):
        rr, rc = divmod(rid, grid_size)
        attrs = [int(hash_u64(seed, 1 + k, rr, rc) % np.uint64(8)) for k in range(4)]
        rooms.append(Room(rid, *attrs))
    nodes = [Node(r * side + c, r, c, _room_of(r, c, grid_size)) for r in range(side) for c in range(side)]
    objects = np.array(
        [int(hash_u64(seed, 5, n.row, n.col) % np.uint64(N_OBJECTS)) for n in nodes], dtype=np.int64
    )
    edges = set()
    for n in nodes:
        for dr, dc in ((0, 1), (1, 0)):
            r2, c2 = n.row + dr, n.col + dc
            if r2 < side and c2 < side and _room_of(r2, c2, grid_size) == n.room:
                edges.add((n.id, r2 * side + c2))
    edges |= _doorways(seed, grid_size)
    edges = sorted(edges)
    features = _render_features(seed, grid_size, rooms, objects, set(edges))
    return Environment(int(seed), grid_size, nodes, edges, rooms, objects, features)


# ---------------------------------------------------------------------------
# observation


def get_view(env: Environment, node: int, index: int) -> View:
    h, e = divmod(index, N_ELEVATIONS)
    patches = tuple(unpack_feature(i) for i in env.features[node, index])
    return View(patches, h * 2 * math.pi / N_HEADINGS, ELEVATIONS[e])


def get_panorama(env: Environment, node: int) -> Panorama:
    env._check(node)
    return Panorama(int(node), tuple(get_view(env, node, v) for v in range(N_VIEWS)))


def navigable_candidates(env: Environment, node: int) -> list[Candidate]:
    """One candidate per neighbour (ascending id) followed by STOP."""
    out = []
    for nb in env.neighbors(node):
        vi = view_index(3 * direction_between(env, node, nb), LEVEL)
        out.append(Candidate(nb, vi, get_view(env, node, vi)))
    out.append(Candidate(None, None, None))
    return out


# ---------------------------------------------------------------------------
# graph search


def bfs_distances(env: Environment, source: int) -> np.ndarray:
    env._check(source)
    dist = np.full(env.n_nodes, -1, dtype=np.int64)
    dist[source] = 0
    q = deque([source])
    while q:
        u = q.popleft()
        for v in env._adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def shortest_path(env: Environment, a: int, b: int) -> list[int]:
    env._check(a)
    env._check(b)
    dist = bfs_distances(env, b)
    path = [int(a)]
    while path[-1] != b:
        u = path[-1]
        path.append(min(v for v in env._adj[u] if dist[v] == dist[u] - 1))
    return path


# ---------------------------------------------------------------------------
# episodes


def instruction_for_path(env: Environment, path: list[int]) -> list[int]:
    words = []
    for a, b in zip(path, path[1:]):
        words += ["go", DIRECTION_NAMES[direction_between(env, a, b)]]
        ra, rb = env.nodes[a].room, env.nodes[b].room
        if ra != rb:
            words += ["enter", "the", COLOR_NAMES[env.rooms[rb].color_id], "room"]
    words.append("stop")
    return [WORD_ID[w] for w in words]


def episode_from_path(env: Environment, path: list[int]) -> Episode:
    panoramas = [get_panorama(env, n) for n in path]
    candidates = [navigable_candidates(env, n) for n in path]
    teacher = []
    for i, cands in enumerate(candidates):
        if i == len(path) - 1:
            teacher.append(len(cands) - 1)
        else:
            teacher.append(next(k for k, c in enumerate(cands) if c.node == path[i + 1]))
    return Episode(instruction_for_path(env, path), list(path), panoramas, candidates, teacher, env.seed)


def sample_path(env: Environment, rng_seed: int) -> list[int]:
    rng = np.random.default_rng(rng_seed)
    while True:
        start = int(rng.integers(env.n_nodes))
        dist = bfs_distances(env, start)
        goals = np.flatnonzero((dist >= MIN_EDGES) & (dist <= MAX_EDGES))
        if len(goals) == 0:
            continue
        goal = int(goals[rng.integers(len(goals))])
        path = shortest_path(env, start, goal)
        if len(instruction_for_path(env, path)) <= MAX_INSTRUCTION_WORDS:
            return path


def sample_episode(env: Environment, rng_seed: int) -> Episode:
    return episode_from_path(env, sample_path(env, rng_seed))


# ---------------------------------------------------------------------------
# serialization


def env_to_dict(env: Environment) -> dict:
    return {
        "schema": SCHEMA,
        "kind": "environment",
        "seed": env.seed,
        "grid_size": env.grid_size,
        "nodes": [list(n) for n in env.nodes],
        "edges": [list(e) for e in env.edges],
        "rooms": [list(r) for r in env.rooms],
        "objects": env.objects.tolist(),
        "features": env.features.tolist(),
    }


def env_from_dict(d: dict) -> Environment:
    if d.get("schema") != SCHEMA or d.get("kind") != "environment":
        raise InvalidArgument(f"not a {SCHEMA} environment document")
    return Environment(
        int(d["seed"]),
        int(d["grid_size"]),
        [Node(*n) for n in d["nodes"]],
        [tuple(e) for e in d["edges"]],
        [Room(*r) for r in d["rooms"]],
        np.array(d["objects"], dtype=np.int64),
        np.array(d["features"], dtype=np.int64).reshape(-1, N_VIEWS, N_PATCHES),
    )


def _view_to_list(v: View | None):
    if v is None:
        return None
    return {"patches": [list(p) for p in v.patches], "heading": v.heading, "elevation": v.elevation}


def _view_from_list(d) -> View | None:
    if d is None:
        return None
    return View(tuple(FeatureTuple(*p) for p in d["patches"]), float(d["heading"]), float(d["elevation"]))


def episode_to_dict(ep: Episode) -> dict:
    return {
        "schema": SCHEMA,
        "kind": "episode",
        "env_seed": ep.env_seed,
        "instruction": list(ep.instruction),
        "path": list(ep.path),
        "panoramas": [
            {"node": p.node, "views": [_view_to_list(v) for v in p.views]} for p in ep.panoramas
        ],
        "candidates": [
            [{"node": c.node, "view_index": c.view_index, "view": _view_to_list(c.view)} for c in step]
            for step in ep.candidates
        ],
        "teacher_actions": list(ep.teacher_actions),
    }


def episode_from_dict(d: dict) -> Episode:
    if d.get("schema") != SCHEMA or d.get("kind") != "episode":
        raise InvalidArgument(f"not a {SCHEMA} episode document")
    return Episode(
        list(d["instruction"]),
        list(d["path"]),
        [Panorama(p["node"], tuple(_view_from_list(v) for v in p["views"])) for p in d["panoramas"]],
        [[Candidate(c["node"], c["view_index"], _view_from_list(c["view"])) for c in step] for step in d["candidates"]],
        list(d["teacher_actions"]),
        int(d["env_seed"]),
    )


def dumps(obj: Environment | Episode) -> str:
    if isinstance(obj, Environment):
        return json.dumps(env_to_dict(obj), separators=(",", ":"))
    return json.dumps(episode_to_dict(obj), separators=(",", ":"))


def loads(text: str) -> Environment | Episode:
    d = json.loads(text)
    if d.get("kind") == "environment":
        return env_from_dict(d)
    return episode_from_dict(d)
