"""Chordal sparsity for the real lifted voltage matrix.

The lifted matrix is indexed by real coordinates (``2k`` = Re v_k,
``2k+1`` = Im v_k). Its sparsity pattern is chordally extended by symbolic
elimination under a minimum-degree ordering; the maximal cliques of the
filled graph become the PSD blocks of the decomposed relaxation, and the
clique tree fixes which overlapping entries must agree.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import IO, Iterable, Sequence

from ropf.matpower import Network

__all__ = [
    "SparsityGraph",
    "Link",
    "CliqueDecomposition",
    "sparsity_graph",
    "amd_ordering",
    "chordal_extension",
    "clique_tree",
    "merge_cliques",
    "decompose",
    "dense_decomposition",
    "is_chordal",
    "fill_in",
    "dump_cliques",
]


@dataclass
class SparsityGraph:
    n: int
    adj: list[set[int]]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "SparsityGraph":
        adj: list[set[int]] = [set() for _ in range(n)]
        for a, b in edges:
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        return cls(n, adj)

    def edges(self) -> set[tuple[int, int]]:
        return {(a, b) for a in range(self.n) for b in self.adj[a] if a < b}

    def copy(self) -> "SparsityGraph":
        return SparsityGraph(self.n, [set(s) for s in self.adj])


def sparsity_graph(net: Network) -> SparsityGraph:
    """Pattern needed by the relaxation: bus coordinate pairs and branch quadruples."""
    idx = net.bus_index
    edges = [(2 * k, 2 * k + 1) for k in range(net.n)]
    for br in net.branches:
        o, d = idx[br.orig], idx[br.dest]
        edges.extend(combinations((2 * o, 2 * o + 1, 2 * d, 2 * d + 1), 2))
    return SparsityGraph.from_edges(2 * net.n, edges)


def amd_ordering(g: SparsityGraph) -> list[int]:
    """Greedy minimum-degree elimination order, ties broken by lowest vertex id.

    Degrees are exact (tracked on the explicit elimination graph); at the
    sizes handled here the approximate degree bounds of AMD bring nothing.
    """
    adj = [set(s) for s in g.adj]
    alive = [True] * g.n
    heap = [(len(adj[v]), v) for v in range(g.n)]
    heapq.heapify(heap)
    order: list[int] = []
    while heap:
        deg, v = heapq.heappop(heap)
        if not alive[v] or deg != len(adj[v]):
            continue
        alive[v] = False
        order.append(v)
        nbrs = adj[v]
        for a in nbrs:
            adj[a].discard(v)
            adj[a].update(nbrs)
            adj[a].discard(a)
        for a in nbrs:
            heapq.heappush(heap, (len(adj[a]), a))
        adj[v] = set()
    return order


def fill_in(g: SparsityGraph, order: Sequence[int]) -> int:
    """Number of fill edges produced by eliminating in ``order``."""
    filled, _ = chordal_extension(g, order)
    return len(filled.edges()) - len(g.edges())


def chordal_extension(g: SparsityGraph, order: Sequence[int]) -> tuple[SparsityGraph, list[tuple[int, ...]]]:
    """Symbolic elimination: filled graph and its maximal cliques.

    A vertex's candidate clique is itself plus its later neighbours; it is
    maximal unless some elimination-tree child has exactly one more later
    neighbour (that child's candidate then contains it).
    """
    if sorted(order) != list(range(g.n)):
        raise ValueError("order is not a permutation of the vertices")
    pos = {v: k for k, v in enumerate(order)}
    adj = [set(s) for s in g.adj]
    filled = g.copy()
    later: dict[int, list[int]] = {}
    parent: dict[int, int | None] = {}
    for v in order:
        hi = sorted((a for a in adj[v] if pos[a] > pos[v]), key=pos.__getitem__)
        later[v] = hi
        parent[v] = hi[0] if hi else None
        for a, b in combinations(hi, 2):
            if b not in adj[a]:
                adj[a].add(b)
                adj[b].add(a)
                filled.adj[a].add(b)
                filled.adj[b].add(a)
    non_maximal = set()
    for w in order:
        p = parent[w]
        if p is not None and len(later[w]) == len(later[p]) + 1:
            non_maximal.add(p)
    cliques = [tuple(sorted([v, *later[v]])) for v in order if v not in non_maximal]
    return filled, cliques


def is_chordal(g: SparsityGraph) -> bool:
    """Maximum cardinality search followed by a perfect-elimination check."""
    n = g.n
    weight = [0] * n
    numbered = [False] * n
    visit: list[int] = []
    for _ in range(n):
        v = max((u for u in range(n) if not numbered[u]), key=lambda u: (weight[u], -u))
        numbered[v] = True
        visit.append(v)
        for a in g.adj[v]:
            if not numbered[a]:
                weight[a] += 1
    peo = visit[::-1]
    pos = {v: k for k, v in enumerate(peo)}
    for v in peo:
        hi = [a for a in g.adj[v] if pos[a] > pos[v]]
        if not hi:
            continue
        first = min(hi, key=pos.__getitem__)
        if any(a != first and a not in g.adj[first] for a in hi):
            return False
    return True


@dataclass(frozen=True)
class Link:
    parent: int
    child: int
    shared: tuple[int, ...]

    @property
    def entries(self) -> int:
        s = len(self.shared)
        return s * (s + 1) // 2


@dataclass
class CliqueDecomposition:
    cliques: list[tuple[int, ...]]
    parent: list[int | None]
    n_vertices: int
    links: list[Link] = field(init=False)

    def __post_init__(self) -> None:
        self.links = [
            Link(p, c, tuple(sorted(set(self.cliques[p]) & set(self.cliques[c]))))
            for c, p in enumerate(self.parent)
            if p is not None
        ]
        self.links = [lk for lk in self.links if lk.shared]

    @property
    def link_entries(self) -> int:
        return sum(lk.entries for lk in self.links)

    @property
    def max_clique(self) -> int:
        return max(map(len, self.cliques))

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.cliques]
        for c, p in enumerate(self.parent):
            if p is not None:
                kids[p].append(c)
        return kids

    def has_rip(self) -> bool:
        """Cliques containing any given vertex induce a connected subtree."""
        owners: dict[int, list[int]] = {}
        for k, cl in enumerate(self.cliques):
            for v in cl:
                owners.setdefault(v, []).append(k)
        for v, ks in owners.items():
            inside = set(ks)
            # a subtree has exactly one member whose parent is outside it
            tops = sum(1 for k in ks if self.parent[k] is None or self.parent[k] not in inside)
            if tops != 1:
                return False
        return True

    def covers(self, g: SparsityGraph) -> bool:
        pairs = set()
        for cl in self.cliques:
            pairs.update(combinations(cl, 2))
        return all(e in pairs for e in g.edges())

    def pattern(self) -> SparsityGraph:
        """Graph whose edges are the entries held by the cliques."""
        return SparsityGraph.from_edges(
            self.n_vertices, (e for cl in self.cliques for e in combinations(cl, 2))
        )


def clique_tree(cliques: Sequence[tuple[int, ...]], n_vertices: int | None = None) -> CliqueDecomposition:
    """Maximum-weight spanning forest on clique intersection sizes (Kruskal).

    Ties are broken by clique index order; components are rooted at their
    lowest-index clique. Raises if the result lacks the running intersection
    property, which happens exactly when the cliques do not come from a
    chordal graph.
    """
    cliques = [tuple(sorted(c)) for c in cliques]
    if n_vertices is None:
        n_vertices = 1 + max((max(c) for c in cliques if c), default=-1)
    sets = [set(c) for c in cliques]
    owners: dict[int, list[int]] = {}
    for k, cl in enumerate(cliques):
        for v in cl:
            owners.setdefault(v, []).append(k)
    weights: dict[tuple[int, int], int] = {}
    for ks in owners.values():
        for a, b in combinations(ks, 2):
            weights[(a, b)] = weights.get((a, b), 0) + 1
    edges = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))

    root = list(range(len(cliques)))

    def find(a: int) -> int:
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    nbrs: list[list[int]] = [[] for _ in cliques]
    for (a, b), _ in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            root[max(ra, rb)] = min(ra, rb)
            nbrs[a].append(b)
            nbrs[b].append(a)

    parent: list[int | None] = [None] * len(cliques)
    seen = [False] * len(cliques)
    for r in range(len(cliques)):
        if seen[r]:
            continue
        seen[r] = True
        stack = [r]
        while stack:
            a = stack.pop()
            for b in sorted(nbrs[a]):
                if not seen[b]:
                    seen[b] = True
                    parent[b] = a
                    stack.append(b)
    deco = CliqueDecomposition(list(cliques), parent, n_vertices)
    for a, b in combinations(range(len(sets)), 2):
        if sets[a] <= sets[b] or sets[b] <= sets[a]:
            raise ValueError(f"clique {a} and clique {b} are nested")
    if not deco.has_rip():
        raise ValueError("cliques do not admit a clique tree (input not chordal)")
    return deco


def _merge_gain(p: Sequence[int], c: Sequence[int], shared: int, weight: float) -> bool:
    union = len(p) + len(c) - shared
    scale = max(len(p), len(c)) ** 2
    link_cost = weight * (shared * (shared + 1) // 2) * scale
    return union**3 <= len(p) ** 3 + len(c) ** 3 + link_cost


def merge_cliques(deco: CliqueDecomposition, k_max: int = 1, weight: float = 1.0) -> CliqueDecomposition:
    """Greedy parent-child merging on the clique tree.

    A child is absorbed into its parent when the estimated cost does not grow:
    ``|P u C|^3 <= |P|^3 + |C|^3 + weight * t * max(|P|, |C|)^2`` where ``t``
    is the number of linking entries removed by the merge. Each of the
    ``k_max`` passes visits children in post-order and stops early when a
    pass merges nothing.
    """
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    cliques = [tuple(c) for c in deco.cliques]
    parent = list(deco.parent)
    alive = [True] * len(cliques)
    for _ in range(k_max):
        changed = False
        kids: list[list[int]] = [[] for _ in cliques]
        for c, p in enumerate(parent):
            if p is not None and alive[c]:
                kids[p].append(c)
        post: list[int] = []
        for r in range(len(cliques)):
            if alive[r] and parent[r] is None:
                stack = [(r, False)]
                while stack:
                    a, done = stack.pop()
                    if done:
                        post.append(a)
                        continue
                    stack.append((a, True))
                    stack.extend((b, False) for b in reversed(kids[a]))
        for c in post:
            p = parent[c]
            if p is None or not alive[c]:
                continue
            shared = len(set(cliques[p]) & set(cliques[c]))
            if not _merge_gain(cliques[p], cliques[c], shared, weight):
                continue
            cliques[p] = tuple(sorted(set(cliques[p]) | set(cliques[c])))
            alive[c] = False
            for g, pg in enumerate(parent):
                if pg == c:
                    parent[g] = p
            changed = True
        if not changed:
            break
    keep = [k for k in range(len(cliques)) if alive[k]]
    renum = {k: i for i, k in enumerate(keep)}
    new_parent = [None if parent[k] is None else renum[parent[k]] for k in keep]
    return CliqueDecomposition([cliques[k] for k in keep], new_parent, deco.n_vertices)


def decompose(net: Network, k_max: int = 1) -> CliqueDecomposition:
    g = sparsity_graph(net)
    _, cliques = chordal_extension(g, amd_ordering(g))
    deco = clique_tree(cliques, g.n)
    return merge_cliques(deco, k_max) if k_max > 0 else deco


def dense_decomposition(net: Network) -> CliqueDecomposition:
    """A single block holding the whole lifted matrix."""
    return CliqueDecomposition([tuple(range(2 * net.n))], [None], 2 * net.n)


def dump_cliques(deco: CliqueDecomposition, fp: IO[str]) -> None:
    """Write one JSON object per clique: id, vertices, parent."""
    for k, cl in enumerate(deco.cliques):
        fp.write(json.dumps({"clique": k, "vertices": list(cl), "parent": deco.parent[k]}) + "\n")
