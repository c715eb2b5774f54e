"""Routing topology: logical links, paths and their incidence structure."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np


class TopologyError(ValueError):
    """Raised for malformed or inconsistent topology descriptions."""


@dataclass(frozen=True)
class Topology:
    """Fixed routing structure.

    Links are ``0..n_links-1`` and paths ``0..n_paths-1``.  ``path_links[p]``
    is the ordered link list of path ``p``; ``link_paths[l]`` lists the
    paths crossing link ``l``.
    """

    n_links: int
    path_links: tuple[tuple[int, ...], ...]
    link_paths: tuple[tuple[int, ...], ...] = field(init=False)
    link_names: tuple[str, ...] = ()
    path_names: tuple[str, ...] = ()
    path_endpoints: tuple[tuple[str, str], ...] = ()
    nodes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.path_links:
            raise TopologyError("topology has no paths")
        link_paths: list[list[int]] = [[] for _ in range(self.n_links)]
        for p, links in enumerate(self.path_links):
            if not links:
                raise TopologyError(f"path {p} has no links")
            if len(set(links)) != len(links):
                raise TopologyError(f"path {p} repeats a link")
            for l in links:
                if not 0 <= l < self.n_links:
                    raise TopologyError(f"path {p} references unknown link {l}")
                link_paths[l].append(p)
        unused = [l for l, ps in enumerate(link_paths) if not ps]
        if unused:
            raise TopologyError(f"links {unused} are not on any path")
        object.__setattr__(self, "link_paths", tuple(tuple(ps) for ps in link_paths))
        if not self.link_names:
            object.__setattr__(self, "link_names", tuple(str(i) for i in range(self.n_links)))
        if not self.path_names:
            object.__setattr__(self, "path_names", tuple(str(i) for i in range(self.n_paths)))

    @property
    def n_paths(self) -> int:
        return len(self.path_links)

    @property
    def links(self) -> range:
        return range(self.n_links)

    @property
    def paths(self) -> range:
        return range(self.n_paths)

    def incidence(self) -> tuple[dict[int, tuple[int, ...]], dict[int, tuple[int, ...]]]:
        """Return ``(L_p, P_l)`` as dicts keyed by path and link id."""
        return dict(enumerate(self.path_links)), dict(enumerate(self.link_paths))

    def incidence_matrix(self) -> np.ndarray:
        """Boolean ``n_paths x n_links`` routing matrix."""
        mat = np.zeros((self.n_paths, self.n_links), dtype=bool)
        for p, links in enumerate(self.path_links):
            mat[p, list(links)] = True
        return mat

    def to_dict(self) -> dict:
        node_names = sorted({n for e in self.path_endpoints for n in e} | set(self.nodes))
        nodes = [{"id": n, **({"address": self.nodes[n]} if n in self.nodes else {})} for n in node_names]
        return {
            "nodes": nodes,
            "links": [{"id": name, "from": None, "to": None} for name in self.link_names],
            "paths": [
                {
                    "id": self.path_names[p],
                    "src": self.path_endpoints[p][0] if self.path_endpoints else None,
                    "dst": self.path_endpoints[p][1] if self.path_endpoints else None,
                    "links": [self.link_names[l] for l in links],
                }
                for p, links in enumerate(self.path_links)
            ],
        }


def topology_from_dict(data: dict) -> Topology:
    try:
        raw_links = data["links"]
        raw_paths = data["paths"]
    except (KeyError, TypeError) as exc:
        raise TopologyError(f"topology needs 'links' and 'paths': {exc}") from None

    link_index: dict[str, int] = {}
    for entry in raw_links:
        key = str(entry["id"] if isinstance(entry, dict) else entry)
        if key in link_index:
            raise TopologyError(f"duplicate link id {key!r}")
        link_index[key] = len(link_index)

    path_links, path_names, endpoints = [], [], []
    for i, entry in enumerate(raw_paths):
        refs = entry.get("links") if isinstance(entry, dict) else None
        if not refs:
            raise TopologyError(f"path #{i} is empty")
        try:
            path_links.append(tuple(link_index[str(r)] for r in refs))
        except KeyError as exc:
            raise TopologyError(f"path #{i} references unknown link {exc.args[0]!r}") from None
        path_names.append(str(entry.get("id", i)))
        endpoints.append((str(entry.get("src", "")), str(entry.get("dst", ""))))

    nodes = {}
    for node in data.get("nodes", []):
        if isinstance(node, dict) and "address" in node:
            nodes[str(node["id"])] = node["address"]

    return Topology(
        n_links=len(link_index),
        path_links=tuple(path_links),
        link_names=tuple(link_index),
        path_names=tuple(path_names),
        path_endpoints=tuple(endpoints),
        nodes=nodes,
    )


def load_topology(path: str | Path) -> Topology:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"cannot parse topology file {path}: {exc}") from None
    return topology_from_dict(data)


def save_topology(topology: Topology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=2))


def generate_random_topology(
    n_end_nodes: int,
    seed: int = 0,
    n_routers: int | None = None,
    n_shortcuts: int | None = None,
) -> Topology:
    """All-pairs paths between end hosts over a random router graph.

    Routers form a random recursive tree plus ``n_shortcuts`` extra edges;
    each end host hangs off its own router.  Every directed hop gets an
    independent random weight in [1, 10] and paths follow weighted shortest
    routes, so forward and reverse paths generally differ.  Directed hops
    crossed by exactly the same set of paths are merged into one logical
    link.

    The defaults (``25 n`` routers, ``25 n`` shortcut edges) give around
    110 logical links and ~5 links per path for 9 end hosts.
    """
    if n_end_nodes < 2:
        raise ValueError("need at least two end nodes")
    rng = np.random.default_rng(seed)
    n_routers = 25 * n_end_nodes if n_routers is None else n_routers
    n_shortcuts = 25 * n_end_nodes if n_shortcuts is None else n_shortcuts
    n_routers = max(n_routers, n_end_nodes)

    edges: set[tuple[int, int]] = set()
    for r in range(1, n_routers):
        edges.add((int(rng.integers(0, r)), r))
    for _ in range(n_shortcuts):
        a, b = (int(x) for x in rng.choice(n_routers, size=2, replace=False))
        edges.add((min(a, b), max(a, b)))
    hosts = list(range(n_routers, n_routers + n_end_nodes))
    for h, r in zip(hosts, rng.choice(n_routers, size=n_end_nodes, replace=False)):
        edges.add((int(r), h))

    graph = nx.DiGraph()
    for a, b in sorted(edges):
        graph.add_edge(a, b, weight=float(rng.uniform(1, 10)))
        graph.add_edge(b, a, weight=float(rng.uniform(1, 10)))

    hop_paths: dict[tuple[int, int], list[int]] = {}
    pairs = []
    for si, s in enumerate(hosts):
        routes = nx.single_source_dijkstra_path(graph, s)
        for di, d in enumerate(hosts):
            if si == di:
                continue
            route = routes[d]
            hops = list(zip(route, route[1:]))
            for hop in hops:
                hop_paths.setdefault(hop, []).append(len(pairs))
            pairs.append((si, di, hops))

    # logical link ids in first-use order
    logical: dict[tuple[int, ...], int] = {}
    path_links = []
    for _, _, hops in pairs:
        links = []
        for hop in hops:
            lid = logical.setdefault(tuple(hop_paths[hop]), len(logical))
            if lid not in links:
                links.append(lid)
        path_links.append(tuple(links))

    names = [f"h{i}" for i in range(n_end_nodes)]
    return Topology(
        n_links=len(logical),
        path_links=tuple(path_links),
        path_names=tuple(f"{names[s]}->{names[d]}" for s, d, _ in pairs),
        path_endpoints=tuple((names[s], names[d]) for s, d, _ in pairs),
    )
