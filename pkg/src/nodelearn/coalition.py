"""Ephemeral clustering, trust bookkeeping, and peer selection.

Clusters are the connected components of the tick's mutual-contact graph;
they need no global knowledge and dissolve as soon as the ttl runs out or
the members stop being mutually reachable. The coordinator role is recomputed
from scratch every time (highest capacity score, lowest id on ties) and never
persists across dissolution.

Trust is a per-node row of EWMA scores driven by the observed utility of each
merge, measured as the accuracy change on the node's own held-out slice and
squashed through a logistic so a couple of accuracy points span most of the
[0, 1] range. Strangers start at the neutral 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

TRUST_DECAY = 0.9
TRUST_DEFAULT = 0.5
UTILITY_SCALE = 0.02  # accuracy points; +/- 2 points covers most of [0, 1]


@dataclass
class Cluster:
    cluster_id: int
    members: frozenset
    coordinator: int
    formed_at: int
    ttl: int


@dataclass
class TrustGraph:
    decay: float = TRUST_DECAY
    default: float = TRUST_DEFAULT
    rows: dict = field(default_factory=dict)  # node -> {peer: score}

    def get(self, i: int, j: int) -> float:
        return self.rows.get(i, {}).get(j, self.default)

    def row(self, i: int) -> dict:
        return self.rows.setdefault(i, {})


def squash_utility(accuracy_delta: float, scale: float = UTILITY_SCALE) -> float:
    """Logistic squash of an accuracy delta into [0, 1]; 0 maps to 0.5."""
    return 1.0 / (1.0 + math.exp(-accuracy_delta / scale))


def update_trust(graph: TrustGraph, i: int, j: int, observed_utility: float) -> None:
    observed_utility = min(1.0, max(0.0, observed_utility))
    row = graph.row(i)
    old = row.get(j, graph.default)
    row[j] = graph.decay * old + (1.0 - graph.decay) * observed_utility


def _components(node_ids, adjacency):
    seen = set()
    comps = []
    for start in sorted(node_ids):
        if start in seen:
            continue
        comp = {start}
        frontier = [start]
        while frontier:
            cur = frontier.pop()
            for nxt in sorted(adjacency.get(cur, ())):
                if nxt not in comp:
                    comp.add(nxt)
                    frontier.append(nxt)
        seen |= comp
        comps.append(comp)
    return comps


def mutual_adjacency(contacts) -> dict:
    """Undirected adjacency of pairs with contacts in both directions."""
    directed = {(c.src, c.dst) for c in contacts}
    adj: dict[int, set] = {}
    for a, b in directed:
        if (b, a) in directed:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
    return adj


def form_clusters(contacts, capacities: dict, tick: int, ttl: int,
                  node_ids=None, next_id: int = 0) -> list[Cluster]:
    """Connected components of the mutual-contact graph become clusters.

    Isolated nodes become singleton clusters coordinating themselves. The
    coordinator is the member with the highest capacity score, lowest id on
    ties."""
    adj = mutual_adjacency(contacts)
    ids = set(node_ids) if node_ids is not None else set(capacities)
    clusters = []
    for comp in _components(ids, adj):
        coordinator = max(sorted(comp), key=lambda m: (capacities.get(m, 0.0), -m))
        clusters.append(Cluster(cluster_id=next_id, members=frozenset(comp),
                                coordinator=coordinator, formed_at=tick, ttl=ttl))
        next_id += 1
    return clusters


def dissolve_expired(clusters, contacts, tick: int) -> list[Cluster]:
    """Drop clusters past their ttl or whose members are no longer mutually
    reachable through the current contacts."""
    adj = mutual_adjacency(contacts)
    survivors = []
    for cl in clusters:
        if tick - cl.formed_at >= cl.ttl:
            continue
        if len(cl.members) > 1:
            sub = {m: (adj.get(m, set()) & cl.members) for m in cl.members}
            comp = _components(cl.members, sub)
            if len(comp) != 1:
                continue
        survivors.append(cl)
    return survivors


def select_peers(node_id: int, contacts, graph: TrustGraph, packet_bytes: int,
                 budget_bytes: int) -> list:
    """Outgoing contacts ranked by trust x link quality, greedily admitted
    while the cumulative packet bytes fit the budget. Deterministic order."""
    mine = [c for c in contacts if c.src == node_id]
    mine.sort(key=lambda c: (-graph.get(node_id, c.dst) * (1.0 - c.loss_prob), c.dst))
    chosen = []
    spent = 0
    for c in mine:
        if spent + packet_bytes > budget_bytes:
            break
        chosen.append(c)
        spent += packet_bytes
    return chosen
