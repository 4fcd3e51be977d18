"""Fragment-level 3D graphs, fragmentation of atom graphs, BFS traces and datasets."""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import networkx as nx
import numpy as np

from .exceptions import ContractViolation, GenerationError, ParseError, ValidationError
from .geometry import asphericity, radius_of_gyration

__all__ = [
    "N_MAX",
    "AtomGraph",
    "FragmentVocab",
    "FragmentGraph3D",
    "Expand",
    "Stop",
    "GenerationTrace",
    "SynthConfig",
    "make_vocab",
    "fragmentize",
    "bfs_trace",
    "synth_dataset",
    "read_jsonl",
    "write_jsonl",
    "read_atom_graph",
    "write_atom_graph",
    "read_vocab",
    "write_vocab",
]

N_MAX = 32

# weight of edges to junction singletons in the spanning-tree step; larger than
# any possible atom overlap so junction links always survive
_JUNCTION_WEIGHT = 1000


def _norm_edge(i: int, j: int) -> tuple[int, int]:
    return (int(i), int(j)) if i < j else (int(j), int(i))


def _check_edges(edges, n: int, what: str) -> list[tuple[int, int]]:
    out = []
    seen = set()
    for e in edges:
        if len(e) != 2:
            raise ValidationError(f"{what}: edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"{what}: edge ({i}, {j}) out of range for {n} nodes")
        if i == j:
            raise ValidationError(f"{what}: self-loop at node {i}")
        key = _norm_edge(i, j)
        if key in seen:
            raise ValidationError(f"{what}: duplicate edge {key}")
        seen.add(key)
        out.append(key)
    return out


def _is_connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    todo = [0]
    while todo:
        for j in adj[todo.pop()]:
            if j not in seen:
                seen.add(j)
                todo.append(j)
    return len(seen) == n


@dataclass
class AtomGraph:
    atom_types: list[int]
    bonds: list[tuple[int, int]]
    coords: np.ndarray

    def __post_init__(self):
        self.atom_types = [int(t) for t in self.atom_types]
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)

    @property
    def n(self) -> int:
        return len(self.atom_types)

    def validate(self) -> None:
        if self.n < 1:
            raise ValidationError("atom graph has no atoms")
        if self.coords.shape != (self.n, 3) or not np.all(np.isfinite(self.coords)):
            raise ValidationError("atom coordinates must be finite and n x 3")
        self.bonds = _check_edges(self.bonds, self.n, "atom graph")
        if not _is_connected(self.n, self.bonds):
            raise ContractViolation("atom graph is disconnected")

    def to_dict(self) -> dict:
        return {
            "atom_types": list(self.atom_types),
            "bonds": [list(b) for b in self.bonds],
            "coords": self.coords.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AtomGraph":
        try:
            return cls(d["atom_types"], [tuple(b) for b in d["bonds"]], d["coords"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad atom graph object: {exc}") from None


@dataclass
class FragmentVocab:
    """Fragment type names plus a symmetric K x K compatibility mask."""

    names: list[str]
    compat: np.ndarray

    def __post_init__(self):
        self.names = [str(s) for s in self.names]
        self.compat = np.asarray(self.compat, dtype=bool)
        k = len(self.names)
        if self.compat.shape != (k, k):
            raise ValidationError(f"compat must be {k}x{k}, got {self.compat.shape}")
        if not np.array_equal(self.compat, self.compat.T):
            raise ValidationError("compat matrix must be symmetric")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def stop_index(self) -> int:
        return self.K

    def to_dict(self) -> dict:
        return {"names": list(self.names), "compat": self.compat.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FragmentVocab":
        try:
            return cls(d["names"], d["compat"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad vocabulary object: {exc}") from None


def make_vocab(K: int, seed: int = 0, density: float = 0.5) -> FragmentVocab:
    """Random symmetric compatibility over ``K`` synthetic fragment types.

    Every type gets at least one compatible partner.
    """
    if K < 1:
        raise ContractViolation("K must be positive")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((K, K)) < density)
    compat = upper | upper.T
    for i in range(K):
        if not compat[i].any():
            j = int(rng.integers(K))
            compat[i, j] = compat[j, i] = True
    return FragmentVocab([f"F{i}" for i in range(K)], compat)


@dataclass
class FragmentGraph3D:
    frag_types: list[int]
    edges: list[tuple[int, int]]
    coords: np.ndarray
    props: dict[str, float] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.frag_types = [int(t) for t in self.frag_types]
        self.edges = [_norm_edge(*e) for e in self.edges]
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.props = {str(k): float(v) for k, v in self.props.items()}

    @property
    def n(self) -> int:
        return len(self.frag_types)

    def neighbors(self) -> list[list[int]]:
        adj = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def validate(self, vocab: FragmentVocab | None = None, n_max: int = N_MAX) -> None:
        """Raise :class:`ValidationError` naming this graph when an invariant fails."""
        tag = f"graph {self.id!r}"
        if not 1 <= self.n <= n_max:
            raise ValidationError(f"{tag}: node count {self.n} outside [1, {n_max}]")
        if self.coords.shape != (self.n, 3) or not np.all(np.isfinite(self.coords)):
            raise ValidationError(f"{tag}: coords must be finite and {self.n} x 3")
        _check_edges(self.edges, self.n, tag)
        if not _is_connected(self.n, self.edges):
            raise ValidationError(f"{tag}: graph is disconnected")
        if vocab is not None:
            for t in self.frag_types:
                if not 0 <= t < vocab.K:
                    raise ValidationError(f"{tag}: fragment type {t} outside vocabulary")
            for i, j in self.edges:
                if not vocab.compat[self.frag_types[i], self.frag_types[j]]:
                    raise ValidationError(f"{tag}: edge ({i}, {j}) joins incompatible types")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "frag_types": list(self.frag_types),
            "edges": [list(e) for e in self.edges],
            "coords": self.coords.tolist(),
            "props": dict(self.props),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FragmentGraph3D":
        return cls(
            frag_types=d["frag_types"],
            edges=[tuple(e) for e in d["edges"]],
            coords=np.asarray(d["coords"], dtype=np.float64).reshape(-1, 3),
            props=d.get("props", {}),
            id=str(d.get("id", "")),
        )

    def copy(self) -> "FragmentGraph3D":
        return FragmentGraph3D(
            list(self.frag_types), list(self.edges), self.coords.copy(), dict(self.props), self.id
        )


# --- traces -----------------------------------------------------------------


@dataclass(frozen=True)
class Expand:
    focus: int
    target: int
    is_new_node: bool


@dataclass(frozen=True)
class Stop:
    focus: int


Event = Union[Expand, Stop]


@dataclass
class GenerationTrace:
    node_visit_order: list[int]
    steps: list[Event]

    @property
    def root(self) -> int:
        return self.steps[0].focus

    def replay(self) -> tuple[set[int], set[tuple[int, int]]]:
        """Apply the events in order; returns the placed node set and edge set."""
        nodes = {self.root}
        edges = set()
        for ev in self.steps:
            if isinstance(ev, Expand):
                if ev.is_new_node:
                    if ev.target in nodes:
                        raise ContractViolation(f"node {ev.target} placed twice")
                    nodes.add(ev.target)
                elif ev.target not in nodes:
                    raise ContractViolation(f"re-link to unplaced node {ev.target}")
                edges.add(_norm_edge(ev.focus, ev.target))
        return nodes, edges

    def check_against(self, g: FragmentGraph3D) -> None:
        nodes, edges = self.replay()
        if nodes != set(range(g.n)) or edges != set(g.edges):
            raise ContractViolation(f"trace does not reproduce graph {g.id!r}")


def bfs_trace(g: FragmentGraph3D, root: int = 0) -> GenerationTrace:
    """Breadth-first focus/expand trace with neighbors visited in ascending index.

    Edges to nodes that are already placed become ``Expand(is_new_node=False)``
    events, emitted once per edge.
    """
    if not 0 <= root < g.n:
        raise ContractViolation(f"root {root} outside graph with {g.n} nodes")
    adj = g.neighbors()
    placed = {root}
    linked: set[tuple[int, int]] = set()
    order = [root]
    queue = deque([root])
    steps: list[Event] = []
    while queue:
        f = queue.popleft()
        for u in adj[f]:
            key = _norm_edge(f, u)
            if key in linked:
                continue
            linked.add(key)
            new = u not in placed
            steps.append(Expand(f, u, new))
            if new:
                placed.add(u)
                order.append(u)
                queue.append(u)
        steps.append(Stop(f))
    return GenerationTrace(order, steps)


# --- fragmentation ----------------------------------------------------------


def _signature(atoms: Sequence[int], atom_types: Sequence[int], is_ring: bool) -> str:
    ts = "-".join(str(t) for t in sorted(atom_types[a] for a in atoms))
    if len(atoms) == 1:
        return f"atom:{ts}"
    if is_ring:
        return f"ring{len(atoms)}:{ts}"
    return f"bond:{ts}"


def fragmentize(
    g: AtomGraph, vocab_index: dict[str, int] | None = None
) -> tuple[FragmentGraph3D, list[list[int]]]:
    """Junction-tree style decomposition of an atom graph into fragments.

    Fragments are non-ring bonds, simple rings of a minimum cycle basis (rings
    sharing more than two atoms merged), and singleton junction atoms bonded to
    more than three others that sit in at least three fragments.  Fragments that
    share atoms are linked, and a maximum spanning tree over the overlap
    weights removes cycles.

    Returns the fragment graph (types from ``vocab_index``, which is extended in
    place with unseen signatures) and, per atom, the fragment indices holding it.
    """
    g.validate()
    vocab_index = {} if vocab_index is None else vocab_index
    G = nx.Graph()
    G.add_nodes_from(range(g.n))
    G.add_edges_from(g.bonds)

    clusters: list[tuple[frozenset, bool]] = [
        (frozenset(e), False) for e in sorted(_norm_edge(*b) for b in nx.bridges(G))
    ]
    rings = [set(c) for c in nx.minimum_cycle_basis(G)]
    merged = True
    while merged:
        merged = False
        for a in range(len(rings)):
            for b in range(a + 1, len(rings)):
                if len(rings[a] & rings[b]) > 2:
                    rings[a] |= rings.pop(b)
                    merged = True
                    break
            if merged:
                break
    clusters += [(frozenset(r), True) for r in rings]
    if not clusters:
        clusters = [(frozenset([0]), False)]

    degree = dict(G.degree())
    junctions = []
    for atom in range(g.n):
        holders = [c for c, _ in clusters if atom in c]
        if degree[atom] > 3 and len(holders) >= 3:
            junctions.append(atom)
    clusters += [(frozenset([a]), False) for a in junctions]
    clusters.sort(key=lambda c: (sorted(c[0]), len(c[0])))
    sets = [c for c, _ in clusters]

    weights: dict[tuple[int, int], int] = {}
    junction_of = {next(iter(c)): k for k, c in enumerate(sets) if len(c) == 1 and next(iter(c)) in junctions}
    for atom in range(g.n):
        holders = [k for k, c in enumerate(sets) if atom in c]
        if atom in junction_of:
            s = junction_of[atom]
            for k in holders:
                if k != s:
                    weights[_norm_edge(k, s)] = _JUNCTION_WEIGHT
            continue
        for x in range(len(holders)):
            for y in range(x + 1, len(holders)):
                key = _norm_edge(holders[x], holders[y])
                if key not in weights:
                    weights[key] = len(sets[holders[x]] & sets[holders[y]])
    T = nx.Graph()
    T.add_nodes_from(range(len(sets)))
    for (i, j), w in sorted(weights.items()):
        T.add_edge(i, j, weight=w)
    tree = nx.maximum_spanning_tree(T, algorithm="kruskal")
    edges = sorted(_norm_edge(i, j) for i, j in tree.edges())

    types = []
    for c, is_ring in clusters:
        sig = _signature(sorted(c), g.atom_types, is_ring)
        if sig not in vocab_index:
            vocab_index[sig] = len(vocab_index)
        types.append(vocab_index[sig])
    coords = np.array([g.coords[sorted(c)].mean(axis=0) for c in sets])
    assignment = [[k for k, c in enumerate(sets) if atom in c] for atom in range(g.n)]
    frag = FragmentGraph3D(types, edges, coords)
    if frag.n >= 2:
        frag.props["asphericity"] = _safe_asphericity(coords)
    frag.props["rg"] = radius_of_gyration(coords)
    return frag, assignment


def _safe_asphericity(coords) -> float:
    try:
        return asphericity(coords)
    except Exception:  # coincident centers
        return 0.0


# --- synthetic data ---------------------------------------------------------


@dataclass
class SynthConfig:
    count: int = 500
    K: int = 8
    n_range: tuple[int, int] = (3, 8)
    bond_length_range: tuple[float, float] = (1.0, 1.6)
    seed: int = 0
    cycle_prob: float = 0.2
    max_degree: int = 4

    def __post_init__(self):
        self.n_range = tuple(int(v) for v in self.n_range)
        self.bond_length_range = tuple(float(v) for v in self.bond_length_range)
        lo, hi = self.n_range
        if self.count < 1 or not 1 <= lo <= hi <= N_MAX:
            raise ContractViolation(f"bad synth config: count={self.count}, n_range={self.n_range}")
        if not 0 < self.bond_length_range[0] <= self.bond_length_range[1]:
            raise ContractViolation("bond_length_range must be positive and ordered")


def _unit_vector(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _synth_one(rng, cfg: SynthConfig, vocab: FragmentVocab, gid: str) -> FragmentGraph3D:
    lo, hi = cfg.n_range
    n = int(rng.integers(lo, hi + 1))
    has_partner = vocab.compat.any(axis=1)
    if n > 1 and not has_partner.any():
        raise GenerationError("vocabulary has no compatible pair; cannot grow a graph")
    roots = np.flatnonzero(has_partner) if n > 1 else np.arange(vocab.K)
    types = [int(rng.choice(roots))]
    coords = [np.zeros(3)]
    edges: list[tuple[int, int]] = []
    degree = [0]
    bl_lo, bl_hi = cfg.bond_length_range
    for k in range(1, n):
        for _attempt in range(200):
            parents = [i for i in range(k) if degree[i] < cfg.max_degree and has_partner[types[i]]]
            p = int(rng.choice(parents))
            t = int(rng.choice(np.flatnonzero(vocab.compat[types[p]])))
            pos = coords[p] + rng.uniform(bl_lo, bl_hi) * _unit_vector(rng)
            dmin = min(np.linalg.norm(pos - c) for c in coords)
            if dmin >= 0.75 * bl_lo:
                break
        types.append(t)
        coords.append(pos)
        edges.append((p, k))
        degree[p] += 1
        degree.append(1)
    coords = np.array(coords)
    if n >= 3 and rng.random() < cfg.cycle_prob:
        present = set(edges)
        best = None
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in present or not vocab.compat[types[i], types[j]]:
                    continue
                if degree[i] >= cfg.max_degree or degree[j] >= cfg.max_degree:
                    continue
                d = float(np.linalg.norm(coords[i] - coords[j]))
                if d <= 1.5 * bl_hi and (best is None or d < best[0]):
                    best = (d, i, j)
        if best is not None:
            edges.append((best[1], best[2]))
            degree[best[1]] += 1
            degree[best[2]] += 1
    coords = coords - coords.mean(axis=0)
    # canonical node order: by type, then degree, then distance to the centroid
    dist = np.round(np.linalg.norm(coords, axis=1), 9)
    order = np.lexsort((dist, np.array(degree), np.array(types)))
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    g = FragmentGraph3D(
        [types[i] for i in order],
        sorted(_norm_edge(rank[i], rank[j]) for i, j in edges),
        coords[order],
        id=gid,
    )
    if n >= 2:
        g.props["asphericity"] = asphericity(g.coords)
    g.props["rg"] = radius_of_gyration(g.coords)
    return g


def synth_dataset(cfg: SynthConfig, vocab: FragmentVocab | None = None) -> list[FragmentGraph3D]:
    """Random compatibility-respecting fragment graphs with stored shape properties.

    Graph ``i`` uses its own generator seeded with ``cfg.seed + i``.
    """
    vocab = make_vocab(cfg.K, cfg.seed) if vocab is None else vocab
    if vocab.K != cfg.K:
        raise ContractViolation(f"vocabulary has {vocab.K} types, config says {cfg.K}")
    out = []
    for i in range(cfg.count):
        rng = np.random.default_rng(cfg.seed + i)
        out.append(_synth_one(rng, cfg, vocab, f"synth-{cfg.seed}-{i}"))
    return out


# --- files ------------------------------------------------------------------


def write_jsonl(path: Union[str, os.PathLike], graphs: Iterable[FragmentGraph3D]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_dict(), separators=(",", ":")) + "\n")


def read_jsonl(
    path: Union[str, os.PathLike], vocab: FragmentVocab | None = None, n_max: int = N_MAX
) -> list[FragmentGraph3D]:
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                g = FragmentGraph3D.from_dict(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            g.validate(vocab, n_max=n_max)
            graphs.append(g)
    return graphs


def read_atom_graph(path) -> AtomGraph:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return AtomGraph.from_dict(obj)


def write_atom_graph(path, g: AtomGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(g.to_dict(), fh)


def read_vocab(path) -> FragmentVocab:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return FragmentVocab.from_dict(obj)


def write_vocab(path, vocab: FragmentVocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab.to_dict(), fh)
