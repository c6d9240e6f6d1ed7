"""Resource sharing at simulation fidelity: memory pooling, replay offload,
relay forwarding, and energy-aware role rotation.

Offloaded replay entries live on the host under a lease tied to the cluster
ttl; durable remote storage is deliberately out of scope. Compute offload is
simplified to relay/coordinator duty, and sensing fusion happens implicitly
through masked nodes exchanging prototypes, not as an explicit operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigurationError

SLEEP_THRESHOLD = 0.1  # energy fraction below which a member duty-cycles off

HARDWARE_CLASSES = ("mcu", "npu", "edge-server")


@dataclass
class CapacityProfile:
    memory_bytes: int = 2_000_000
    compute_steps_per_tick: int = 1
    battery_joules: float = 50.0
    harvest_rate: float = 0.0           # joules per tick
    hardware_class: str = "mcu"

    def validate(self) -> None:
        if self.memory_bytes < 0 or self.compute_steps_per_tick < 0:
            raise ConfigurationError("capacity fields must be nonnegative")
        if self.battery_joules < 0 or self.harvest_rate < 0:
            raise ConfigurationError("battery and harvest rate must be nonnegative")
        if self.hardware_class not in HARDWARE_CLASSES:
            raise ConfigurationError(f"unknown hardware class {self.hardware_class!r}")


@dataclass
class HostedEntries:
    """Replay entries parked on a peer, dropped when the lease runs out."""

    owner: int
    entries: list
    bytes_used: int
    expires: int


def effective_capacity(node, neighbours) -> int:
    """Pooled accessible bytes: own memory plus every neighbour's free bytes."""
    return node.capacity.memory_bytes + sum(n.free_bytes() for n in neighbours)


def effective_capacity_discounted(node, neighbours, loss_probs) -> float:
    """Pooling variant that discounts each peer's free bytes by link quality."""
    total = float(node.capacity.memory_bytes)
    for peer, p_loss in zip(neighbours, loss_probs):
        total += peer.free_bytes() * (1.0 - p_loss)
    return total


def offload_replay(owner, host, entries, tick: int, lease_ticks: int,
                   entry_bytes: int, events=None):
    """Park replay entries on a contacted host; partial acceptance by order.

    Returns the list of entries actually accepted.
    """
    free = host.free_bytes()
    accepted = entries[: max(0, free // entry_bytes)]
    if accepted:
        host.hosted.append(HostedEntries(
            owner=owner.node_id,
            entries=list(accepted),
            bytes_used=len(accepted) * entry_bytes,
            expires=tick + lease_ticks,
        ))
    if events is not None and len(accepted) < len(entries):
        events.append({"tick": tick, "node": host.node_id, "kind": "offload-partial",
                       "owner": owner.node_id, "accepted": len(accepted),
                       "offered": len(entries)})
    return accepted


def retrieve_offloaded(owner, host, tick: int, events=None):
    """Fetch the owner's entries back from the host; empty after lease expiry."""
    out = []
    kept = []
    stale = False
    for h in host.hosted:
        if h.owner != owner.node_id:
            kept.append(h)
        elif tick <= h.expires:
            out.extend(h.entries)
        else:
            stale = True
    host.hosted = kept
    if stale and events is not None:
        events.append({"tick": tick, "node": owner.node_id, "kind": "stale-data",
                       "host": host.node_id})
    return out


def expire_leases(host, tick: int) -> None:
    host.hosted = [h for h in host.hosted if tick <= h.expires]


def relay_forward(packet, src, relay, dst, leg_in, leg_out, gen, tick: int, events=None) -> str:
    """Two-hop delivery src -> relay -> dst; the relay pays rx then tx.

    Both legs run the normal transmission machinery, so either can drop the
    packet. Source metadata on the packet is untouched.
    """
    from .network import transmit

    first = transmit(packet, leg_in, src, relay, gen, tick, events)
    if first != "delivered":
        if events is not None:
            events.append({"tick": tick, "node": src.node_id, "kind": "relay-lost",
                           "leg": "in", "relay": relay.node_id, "dst": dst.node_id})
        return "lost"
    second = transmit(packet, leg_out, relay, dst, gen, tick, events)
    if second != "delivered":
        if events is not None:
            events.append({"tick": tick, "node": src.node_id, "kind": "relay-lost",
                           "leg": "out", "relay": relay.node_id, "dst": dst.node_id})
        return "lost"
    return "delivered"


def rotate_roles(cluster, nodes, tick: int, threshold: float = SLEEP_THRESHOLD,
                 events=None):
    """Per-tick duty assignment inside a cluster.

    The member with the highest energy fraction (lowest id on ties) takes the
    relay/coordinator duty; members below the threshold sleep. Returns
    (coordinator id or None, set of sleeping member ids).
    """
    fractions = {m: nodes[m].context.energy_fraction for m in cluster.members}
    sleepers = {m for m, f in fractions.items() if f < threshold}
    awake = [m for m in sorted(cluster.members) if m not in sleepers]
    if not awake:
        if events is not None:
            events.append({"tick": tick, "node": cluster.coordinator,
                           "kind": "cluster-idle", "cluster": cluster.cluster_id})
        return None, sleepers
    coordinator = max(awake, key=lambda m: (fractions[m], -m))
    return coordinator, sleepers
