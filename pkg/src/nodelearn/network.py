"""Mobility, contacts, link transmission, and energy accounting.

Radios are abstracted to rate / energy-per-byte / range / loss profiles; the
default numbers are plausible orders of magnitude, not measurements, and no
test depends on their absolute values. A directed contact i->j exists when
the pair distance is within both ranges (boundary inclusive); its loss
probability and byte window come from the sender's profile, so links between
unequal radios are asymmetric in quality even though existence is mutual.

Packets are lost whole (Bernoulli draw) or truncated by the contact window;
truncation counts as failure because partial parameter payloads cannot be
merged. Every joule spent or harvested is double-booked on the node, and
`audit_energy` checks the books after a run.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import AuditError, ConfigurationError, IngestionError

TICK_SECONDS = 1.0  # one tick is one second of contact window


@dataclass(frozen=True)
class RadioProfile:
    name: str = "wifi"
    data_rate: float = 100_000.0      # bytes per second
    tx_j_per_byte: float = 0.05e-6
    rx_j_per_byte: float = 0.05e-6
    range_m: float = 80.0
    loss_base: float = 0.0            # packet-loss probability at zero distance
    loss_exponent: float = 2.0

    def validate(self) -> None:
        if min(self.data_rate, self.tx_j_per_byte, self.rx_j_per_byte, self.range_m) <= 0:
            raise ConfigurationError("radio rate, energies and range must be positive")
        if not (0.0 <= self.loss_base <= 1.0):
            raise ConfigurationError("loss_base must be in [0, 1]")

    def loss_prob(self, distance: float) -> float:
        if self.range_m <= 0:
            return 1.0
        return min(1.0, self.loss_base * (distance / self.range_m) ** self.loss_exponent)


DEFAULT_PROFILES = {
    "ble": RadioProfile(name="ble", data_rate=1_000.0, tx_j_per_byte=0.15e-6,
                        rx_j_per_byte=0.10e-6, range_m=30.0, loss_base=0.1),
    "lora": RadioProfile(name="lora", data_rate=50.0, tx_j_per_byte=2e-6,
                         rx_j_per_byte=1e-6, range_m=2000.0, loss_base=0.1),
    "wifi": RadioProfile(name="wifi", data_rate=100_000.0, tx_j_per_byte=0.05e-6,
                         rx_j_per_byte=0.05e-6, range_m=80.0, loss_base=0.05),
}


@dataclass(frozen=True)
class ContactEvent:
    tick: int
    src: int
    dst: int
    distance: float
    loss_prob: float
    max_bytes: int


MOBILITY_STATIC = "static-grid"
MOBILITY_WAYPOINT = "random-waypoint"
MOBILITY_TRACE = "trace"


@dataclass
class MobilityState:
    model: str
    positions: np.ndarray                       # (n, 2)
    arena: tuple[float, float] = (100.0, 100.0)
    waypoints: Optional[np.ndarray] = None      # (n, 2), waypoint model only
    speeds: Optional[np.ndarray] = None         # (n,), metres per tick
    speed_range: tuple[float, float] = (0.5, 1.5)
    trace: Optional[dict] = None                # tick -> [(src, dst, distance)]
    trace_end: int = 0

    def copy(self) -> "MobilityState":
        return replace(
            self,
            positions=self.positions.copy(),
            waypoints=None if self.waypoints is None else self.waypoints.copy(),
            speeds=None if self.speeds is None else self.speeds.copy(),
        )


def grid_positions(n: int, spacing: float = 10.0) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    pos = np.zeros((n, 2))
    for i in range(n):
        pos[i] = (spacing * (i % side), spacing * (i // side))
    return pos


def ring_positions(n: int, radius: float) -> np.ndarray:
    """Nodes on a circle; with range between the adjacent and the next-nearest
    chord lengths the geometric contacts form exactly a ring."""
    angles = 2.0 * math.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])


def init_waypoint_state(m: MobilityState, streams) -> None:
    n = m.positions.shape[0]
    m.waypoints = np.zeros((n, 2))
    m.speeds = np.zeros(n)
    lo, hi = m.speed_range
    for i in range(n):
        gen = streams[i]
        m.waypoints[i] = (gen.uniform(0, m.arena[0]), gen.uniform(0, m.arena[1]))
        m.speeds[i] = gen.uniform(lo, hi)


def step_mobility(m: MobilityState, dt: float, streams=None, tick: int = 0) -> bool:
    """Advance positions by one step; returns False when a trace has ended."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    if m.model == MOBILITY_STATIC:
        return True
    if m.model == MOBILITY_TRACE:
        return tick <= m.trace_end
    lo, hi = m.speed_range
    for i in range(m.positions.shape[0]):
        target = m.waypoints[i]
        delta = target - m.positions[i]
        dist = float(np.hypot(delta[0], delta[1]))
        step = m.speeds[i] * dt
        if dist <= step:
            m.positions[i] = target.copy()
            gen = streams[i]
            m.waypoints[i] = (gen.uniform(0, m.arena[0]), gen.uniform(0, m.arena[1]))
            m.speeds[i] = gen.uniform(lo, hi)
        else:
            m.positions[i] = m.positions[i] + delta * (step / dist)
    return True


def compute_contacts(m: MobilityState, radios, tick: int, active=None) -> list[ContactEvent]:
    """Directed contacts for this tick, sorted by (src, dst).

    A contact i->j requires distance <= min(range_i, range_j), boundary
    inclusive; its loss probability and byte window come from i's profile.
    Trace-driven scenarios read contacts straight from the trace file.
    """
    n = len(radios)
    if active is None:
        active = [True] * n
    out: list[ContactEvent] = []
    if m.model == MOBILITY_TRACE:
        for src, dst, distance in m.trace.get(tick, []):
            if not (active[src] and active[dst]):
                continue
            prof = radios[src]
            out.append(ContactEvent(tick=tick, src=src, dst=dst, distance=distance,
                                    loss_prob=prof.loss_prob(distance),
                                    max_bytes=int(prof.data_rate * TICK_SECONDS)))
        out.sort(key=lambda e: (e.src, e.dst))
        return out
    for i in range(n):
        if not active[i]:
            continue
        for j in range(n):
            if i == j or not active[j]:
                continue
            d = float(np.hypot(*(m.positions[i] - m.positions[j])))
            if d <= min(radios[i].range_m, radios[j].range_m):
                prof = radios[i]
                out.append(ContactEvent(tick=tick, src=i, dst=j, distance=d,
                                        loss_prob=prof.loss_prob(d),
                                        max_bytes=int(prof.data_rate * TICK_SECONDS)))
    return out


def load_contact_trace(path) -> tuple[dict, int]:
    """Parse a contact-trace CSV with columns t, from, to, distance."""
    trace: dict[int, list] = {}
    last = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"t", "from", "to", "distance"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestionError("contact trace needs columns t, from, to, distance")
        for i, row in enumerate(reader, start=2):
            try:
                t = int(row["t"])
                entry = (int(row["from"]), int(row["to"]), float(row["distance"]))
            except (TypeError, ValueError):
                raise IngestionError(f"bad trace row {i}") from None
            trace.setdefault(t, []).append(entry)
            last = max(last, t)
    return trace, last


def transmit(packet, ev: ContactEvent, sender, receiver, gen: np.random.Generator,
             tick: int, events=None) -> str:
    """Attempt one packet over one contact.

    Outcomes: "delivered", "dropped" (Bernoulli loss or receiver out of
    energy), "truncated" (packet larger than the contact window; the sender
    still burns the window's worth of bytes), or "blocked" (sender cannot pay
    for the attempt, nothing is sent)."""
    attempted = min(packet.byte_size, ev.max_bytes)
    tx_cost = sender.radio.tx_j_per_byte * attempted
    if sender.energy_j < tx_cost:
        if events is not None:
            events.append({"tick": tick, "node": sender.node_id, "kind": "tx-blocked",
                           "dst": receiver.node_id, "bytes": attempted})
        return "blocked"
    if packet.byte_size > ev.max_bytes:
        sender.spend(tick, "tx", tx_cost)
        sender.bytes_tx += attempted
        if events is not None:
            events.append({"tick": tick, "node": sender.node_id, "kind": "tx-truncated",
                           "dst": receiver.node_id, "bytes": attempted,
                           "packet_bytes": packet.byte_size})
        return "truncated"
    sender.spend(tick, "tx", tx_cost)
    sender.bytes_tx += attempted
    if gen.random() < ev.loss_prob:
        if events is not None:
            events.append({"tick": tick, "node": sender.node_id, "kind": "tx-dropped",
                           "dst": receiver.node_id, "bytes": attempted, "reason": "loss"})
        return "dropped"
    rx_cost = receiver.radio.rx_j_per_byte * attempted
    if receiver.energy_j < rx_cost:
        if events is not None:
            events.append({"tick": tick, "node": sender.node_id, "kind": "tx-dropped",
                           "dst": receiver.node_id, "bytes": attempted,
                           "reason": "rx-energy"})
        return "dropped"
    receiver.spend(tick, "rx", rx_cost)
    receiver.bytes_rx += attempted
    return "delivered"


def audit_energy(nodes, initial_energy: dict, rel_tol: float = 1e-9) -> bool:
    """Check initial - final == spends - harvests for every node.

    Raises AuditError naming the first offending node (and the tick of its
    last booking) on mismatch."""
    for node in nodes:
        booked = sum(j for _, _, j in node.energy_log)
        actual = initial_energy[node.node_id] - node.energy_j
        scale = max(1.0, abs(initial_energy[node.node_id]))
        if abs(booked - actual) > rel_tol * scale:
            last_tick = node.energy_log[-1][0] if node.energy_log else 0
            raise AuditError(
                f"energy ledger mismatch for node {node.node_id} "
                f"(booked {booked!r}, store delta {actual!r}, last booking tick {last_tick})"
            )
    return True
