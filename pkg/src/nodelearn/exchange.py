"""Knowledge packets and the merge operators that consume them.

Five packet kinds cover the exchange menu: full parameters, trunk weights
only, per-class prototypes, logits on the shared probe set, and per-class
confidence signals. Sizes follow the canonical model of 8 bytes per real plus
a 32-byte header; `packet_bytes` is the only place that rule lives.

Merges are deliberately forgiving: a packet that does not fit (wrong shape,
wrong probe) is rejected and logged, and the merge proceeds with the rest,
with the rejected weight folded back into the node's own. Probe-logit packets
carry a digest of the probe set so distillation never mixes mismatched
references.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import (Batch, ModelParams, ProbeSet, TrainingConfig, apply_gradient, grad,
                    probe_logits)

HEADER_BYTES = 32
BYTES_PER_REAL = 8

KIND_FULL = "full-params"
KIND_TRUNK = "trunk-only"
KIND_PROTO = "prototypes"
KIND_LOGITS = "probe-logits"
KIND_CONF = "confidence"
PACKET_KINDS = (KIND_FULL, KIND_TRUNK, KIND_PROTO, KIND_LOGITS, KIND_CONF)

POLICY_AVERAGE = "average"
POLICY_DISTILL = "distill"
POLICY_TRUNK = "trunk"
POLICY_PROTO = "prototype"
POLICY_NONE = "none"
POLICY_KINDS = (POLICY_AVERAGE, POLICY_DISTILL, POLICY_TRUNK, POLICY_PROTO, POLICY_NONE)

WEIGHTS_UNIFORM = "uniform"
WEIGHTS_METROPOLIS = "metropolis"
WEIGHTS_TRUST = "trust-context"
WEIGHT_RULES = (WEIGHTS_UNIFORM, WEIGHTS_METROPOLIS, WEIGHTS_TRUST)

PACKET_FOR_POLICY = {
    POLICY_AVERAGE: KIND_FULL,
    POLICY_DISTILL: KIND_LOGITS,
    POLICY_TRUNK: KIND_TRUNK,
    POLICY_PROTO: KIND_PROTO,
}


@dataclass
class MergePolicy:
    kind: str = POLICY_AVERAGE
    weight_rule: str = WEIGHTS_UNIFORM
    distill_steps: int = 5
    distill_rate: float = 0.5

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown merge policy {self.kind!r}")
        if self.weight_rule not in WEIGHT_RULES:
            raise ConfigurationError(f"unknown weight rule {self.weight_rule!r}")
        if self.distill_steps < 0:
            raise ConfigurationError("distill_steps must be >= 0")
        if self.distill_rate <= 0:
            raise ConfigurationError("distill_rate must be > 0")


@dataclass
class KnowledgePacket:
    kind: str
    payload: dict                    # arrays keyed by role
    source_node: int
    source_version: int
    byte_size: int = 0
    context_summary: tuple = (1.0, 0.5, 1.0)   # (energy, connectivity, salience)
    source_degree: int = 0
    probe_digest: str = ""

    def __post_init__(self):
        if self.byte_size == 0:
            self.byte_size = packet_bytes(self.payload)


def packet_bytes(payload: dict) -> int:
    reals = sum(int(np.asarray(a).size) for a in payload.values())
    return BYTES_PER_REAL * reals + HEADER_BYTES


def encode_packet(node, kind: str, probe: Optional[ProbeSet] = None) -> KnowledgePacket:
    """Build a packet of the given kind from the node's current state."""
    params = node.params
    ctx = node.context
    summary = (ctx.energy_fraction, ctx.connectivity_quality, ctx.salience)
    common = dict(source_node=node.node_id, source_version=params.version,
                  context_summary=summary, source_degree=node.degree())
    if kind == KIND_FULL:
        payload = {"head": params.head.copy(), "bias": params.bias.copy()}
        if params.trunk is not None:
            payload["trunk"] = params.trunk.copy()
        return KnowledgePacket(kind=kind, payload=payload, **common)
    if kind == KIND_TRUNK:
        if params.trunk is None:
            raise ConfigurationError("trunk-only packets require the one-hidden-layer mode")
        return KnowledgePacket(kind=kind, payload={"trunk": params.trunk.copy()}, **common)
    if kind == KIND_PROTO:
        stats = node.replay.class_means() if node.replay is not None else None
        if stats is None:
            raise ConfigurationError("prototypes unavailable: replay buffer is empty")
        means, counts = stats
        return KnowledgePacket(kind=kind, payload={"means": means, "counts": counts}, **common)
    if kind == KIND_LOGITS:
        if probe is None:
            raise ConfigurationError("probe-logits packets require the shared probe set")
        logits = probe_logits(params, probe)
        return KnowledgePacket(kind=kind, payload={"logits": logits},
                               probe_digest=probe.digest, **common)
    if kind == KIND_CONF:
        if probe is None:
            raise ConfigurationError("confidence packets require the shared probe set")
        from .model import forward

        probs, _ = forward(params, probe.x)
        top = probs.max(axis=1)
        conf = np.zeros(params.class_count)
        for c in range(params.class_count):
            mask = probe.y == c
            if mask.any():
                conf[c] = float(top[mask].mean())
        return KnowledgePacket(kind=kind, payload={"confidence": conf}, **common)
    raise ConfigurationError(f"unknown packet kind {kind!r}")


def compute_weights(node, packets, policy: MergePolicy, trust_row=None,
                    default_trust: float = 0.5, events=None, tick: int = 0) -> np.ndarray:
    """Weight vector [self, packet_1, ...] summing to 1 under the policy's rule.

    uniform: everyone (self included) gets 1/(n+1). metropolis: pairwise
    1/(1 + max(deg_i, deg_j)) with the remainder on self. trust-context:
    peers proportional to trust times reported connectivity, self at least
    half the raw mass, renormalised. All-zero trust falls back to self-only.
    """
    n = len(packets)
    if policy.weight_rule == WEIGHTS_UNIFORM:
        return np.full(n + 1, 1.0 / (n + 1))
    if policy.weight_rule == WEIGHTS_METROPOLIS:
        # degree can undercount when extra packets arrive (relays); keep the
        # row substochastic either way
        deg_i = max(node.degree(), n)
        w = np.zeros(n + 1)
        for i, p in enumerate(packets):
            w[i + 1] = 1.0 / (1.0 + max(deg_i, p.source_degree))
        w[0] = 1.0 - w[1:].sum()
        return w
    trust_row = trust_row or {}
    raw = np.zeros(n)
    for i, p in enumerate(packets):
        trust = trust_row.get(p.source_node, default_trust)
        raw[i] = trust * p.context_summary[1]
    if n > 0 and raw.sum() == 0.0:
        if events is not None:
            events.append({"tick": tick, "node": node.node_id, "kind": "trust-fallback"})
        w = np.zeros(n + 1)
        w[0] = 1.0
        return w
    self_raw = max(0.5, 1.0 - raw.sum())
    w = np.concatenate([[self_raw], raw])
    return w / w.sum()


def _reject(events, tick, node_id, packet, reason):
    if events is not None:
        events.append({"tick": tick, "node": node_id, "kind": "packet-rejected",
                       "source": packet.source_node, "reason": reason})


def merge_average(node, packets, weights, tick: int = 0, events=None):
    """Weighted parameter average.

    Rejected packets (wrong kind or shape) contribute their weight back to
    the node itself so the total stays 1. Returns (bytes consumed, accepted
    source ids)."""
    params = node.params
    new_head = weights[0] * params.head
    new_bias = weights[0] * params.bias
    new_trunk = None if params.trunk is None else weights[0] * params.trunk
    self_extra = 0.0
    consumed = 0
    accepted = []
    for w, p in zip(weights[1:], packets):
        ok = (p.kind == KIND_FULL
              and p.payload["head"].shape == params.head.shape
              and (("trunk" in p.payload) == (params.trunk is not None))
              and (params.trunk is None or p.payload["trunk"].shape == params.trunk.shape))
        if not ok:
            _reject(events, tick, node.node_id, p, "shape")
            self_extra += w
            continue
        new_head = new_head + w * p.payload["head"]
        new_bias = new_bias + w * p.payload["bias"]
        if new_trunk is not None:
            new_trunk = new_trunk + w * p.payload["trunk"]
        consumed += p.byte_size
        accepted.append(p.source_node)
    if self_extra:
        new_head = new_head + self_extra * params.head
        new_bias = new_bias + self_extra * params.bias
        if new_trunk is not None:
            new_trunk = new_trunk + self_extra * params.trunk
    params.head = new_head
    params.bias = new_bias
    params.trunk = new_trunk
    params.version += 1
    return consumed, accepted


def merge_distill(node, packets, policy: MergePolicy, probe: ProbeSet,
                  weights=None, tick: int = 0, events=None):
    """Distill the weighted-mean peer predictions on the probe set into the node.

    Teacher targets are the weight-averaged peer softmax over accepted
    probe-logit packets; the student then takes `distill_steps` gradient steps
    on the soft-target cross-entropy at `distill_rate`."""
    accepted = []
    acc_w = []
    peer_w = weights[1:] if weights is not None else np.full(len(packets), 1.0)
    consumed = 0
    for w, p in zip(peer_w, packets):
        if p.kind != KIND_LOGITS or p.probe_digest != probe.digest \
                or p.payload["logits"].shape != (probe.size, node.params.class_count):
            _reject(events, tick, node.node_id, p, "probe-mismatch")
            continue
        accepted.append(p)
        acc_w.append(max(w, 0.0))
        consumed += p.byte_size
    node.params.version += 1
    accepted_ids = [p.source_node for p in accepted]
    if not accepted or policy.distill_steps == 0:
        return consumed, accepted_ids
    aw = np.asarray(acc_w)
    aw = np.full(len(accepted), 1.0 / len(accepted)) if aw.sum() == 0 else aw / aw.sum()
    teacher = np.zeros((probe.size, node.params.class_count))
    for w, p in zip(aw, accepted):
        z = p.payload["logits"]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        teacher += w * (e / e.sum(axis=1, keepdims=True))
    soft = Batch(x=probe.x, y=probe.y)
    soft.y = teacher  # soft targets ride through the gradient path
    for _ in range(policy.distill_steps):
        g = grad(node.params, soft, 0.0)
        apply_gradient(node.params, g, policy.distill_rate)
        node.params.version -= 1  # one version bump per merge, not per inner step
    return consumed, accepted_ids


def merge_trunk(node, packets, weights, tick: int = 0, events=None):
    """Average trunks only; the head stays private. One-hidden-layer mode only."""
    params = node.params
    if params.trunk is None:
        raise ConfigurationError("trunk merge requires the one-hidden-layer mode")
    new_trunk = weights[0] * params.trunk
    self_extra = 0.0
    consumed = 0
    accepted = []
    for w, p in zip(weights[1:], packets):
        if p.kind != KIND_TRUNK or p.payload["trunk"].shape != params.trunk.shape:
            _reject(events, tick, node.node_id, p, "shape")
            self_extra += w
            continue
        new_trunk = new_trunk + w * p.payload["trunk"]
        consumed += p.byte_size
        accepted.append(p.source_node)
    if self_extra:
        new_trunk = new_trunk + self_extra * params.trunk
    params.trunk = new_trunk
    params.version += 1
    return consumed, accepted


def merge_prototype(node, packets, weights, tick: int = 0, events=None,
                    replication: int = 4):
    """Append received class prototypes to the replay buffer as synthetic samples.

    Each prototype is replicated in proportion to its packet's weight (at
    least once), so later local steps see the received classes. Parameters
    are not touched."""
    consumed = 0
    accepted = []
    for w, p in zip(weights[1:], packets):
        if p.kind != KIND_PROTO or p.payload["means"].shape[1] != node.params.feature_dim:
            _reject(events, tick, node.node_id, p, "shape")
            continue
        means, counts = p.payload["means"], p.payload["counts"]
        copies = max(1, int(round(w * replication)))
        for c in range(means.shape[0]):
            if counts[c] > 0:
                for _ in range(copies):
                    node.replay.add(means[c], c, synthetic=True)
        consumed += p.byte_size
        accepted.append(p.source_node)
    return consumed, accepted


def cluster_summary(members, probe: ProbeSet, coordinator_id: int) -> KnowledgePacket:
    """Probe-logits packet for a whole cluster: the uniform mean of member
    logits, so its size never grows with the member count."""
    if not members:
        raise ConfigurationError("cluster summary needs at least one member")
    logits = np.zeros((probe.size, members[0].params.class_count))
    for m in members:
        logits += probe_logits(m.params, probe)
    logits /= len(members)
    return KnowledgePacket(kind=KIND_LOGITS, payload={"logits": logits},
                           source_node=coordinator_id,
                           source_version=max(m.params.version for m in members),
                           probe_digest=probe.digest)


def packet_to_json(packet: KnowledgePacket, include_payload: bool = False) -> str:
    """One JSONL line for trace export; the payload is elided unless asked for."""
    import json

    record = {
        "kind": packet.kind,
        "source": packet.source_node,
        "version": packet.source_version,
        "byte_size": packet.byte_size,
    }
    if include_payload:
        record["payload"] = {k: np.asarray(v).tolist() for k, v in packet.payload.items()}
    return json.dumps(record, sort_keys=True)


def apply_merge(node, packets, policy: MergePolicy, probe, weights,
                tick: int = 0, events=None):
    """Dispatch to the policy's merge operator.

    Returns (bytes consumed, accepted source ids)."""
    if policy.kind == POLICY_AVERAGE:
        return merge_average(node, packets, weights, tick, events)
    if policy.kind == POLICY_DISTILL:
        return merge_distill(node, packets, policy, probe, weights, tick, events)
    if policy.kind == POLICY_TRUNK:
        return merge_trunk(node, packets, weights, tick, events)
    if policy.kind == POLICY_PROTO:
        return merge_prototype(node, packets, weights, tick, events)
    return 0, []
