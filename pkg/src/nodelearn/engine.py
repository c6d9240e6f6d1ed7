"""Deterministic tick-based event loop composing every subsystem.

Phase order within one tick is fixed and total:

  0. scheduled dropout
  1. mobility step
  2. contact computation (federated rounds synthesize a lossless star
     around the server-proxy node at round boundaries)
  3. cluster formation/dissolution and role rotation
  4. per node: harvest, data sampling, context update, gated local steps
  5. peer selection, packet encoding, transmission and relaying
  6. merges, applied per receiver in source-id order
  7. trust updates from observed merge utility
  8. metric emission at the configured cadence
  9. drift application

Everything random flows through named per-(subsystem, node) streams, so a
(config, seed) pair fixes the whole trajectory; checkpointing pickles the
simulation state mid-run and resuming continues bit-identically.

The four regimes are configurations of this one loop: isolated turns phases
5-7 into no-ops, federated runs synchronous weighted rounds through the
server-proxy star, gossip does a local step plus metropolis neighbour
averaging over a static topology, and node-learning enables the full
opportunistic machinery (budgets, clusters, trust, relays).
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import coalition, context as ctxmod, datagen, exchange, model, network, resources, rng
from .config import ScenarioConfig, build_stream_spec, node_capacity, node_radio
from .errors import CheckpointError
from .node import NodeState, ReplayBuffer

CHECKPOINT_FORMAT = 1
VIRTUAL_WINDOW = 1 << 40  # effectively unbounded byte window for the federated star


@dataclass
class MetricRecord:
    tick: int
    node: object            # int node id or "pop"
    accuracy: float
    energy_j: float         # cumulative joules consumed
    bytes_tx: int
    bytes_rx: int
    updates: int
    events: str = ""


@dataclass
class SimState:
    cfg: ScenarioConfig
    tick: int
    nodes: list
    mobility: network.MobilityState
    spec: datagen.DataStreamSpec
    probe: model.ProbeSet
    trust: coalition.TrustGraph
    clusters: list = field(default_factory=list)
    next_cluster_id: int = 0
    epoch: int = 0
    streams: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    initial_energy: dict = field(default_factory=dict)
    last_contact_stats: list = field(default_factory=list)   # per node (attempts, successes)
    round_update_marks: list = field(default_factory=list)   # federated: updates at last round
    val_batches: list = field(default_factory=list)
    test_batch: Optional[model.Batch] = None
    duty: dict = field(default_factory=dict)                 # cluster id -> duty coordinator
    sleeping_now: set = field(default_factory=set)
    ended: bool = False


def _node_stream(state: SimState, subsystem: str, node_id: int) -> np.random.Generator:
    key = (subsystem, node_id)
    if key not in state.streams:
        state.streams[key] = rng.stream(state.cfg.seed, subsystem, node_id)
    return state.streams[key]


def _refresh_eval_sets(state: SimState) -> None:
    cfg = state.cfg
    state.test_batch = datagen.sample_test_batch(state.spec, cfg.eval.test_size,
                                                 (state.epoch,), "test")
    state.val_batches = []
    for i in range(cfg.nodes):
        gen = rng.stream(cfg.seed, "validation", i + 1, state.epoch)
        state.val_batches.append(
            datagen.sample_batch(state.spec, i, 0, cfg.eval.validation_size, gen))


def init_state(cfg: ScenarioConfig) -> SimState:
    spec = build_stream_spec(cfg)
    probe = _build_probe(cfg, spec)
    nodes = []
    for i in range(cfg.nodes):
        tcfg = cfg.model
        params = model.init_params(rng.derive_seed(cfg.seed, "init", i), tcfg,
                                   spec.feature_dim, spec.class_count)
        cap = node_capacity(cfg, i)
        entry_bytes = 8 * spec.feature_dim + 8
        node = NodeState(
            node_id=i, params=params,
            context=ctxmod.ContextVector(),
            capacity=cap, radio=node_radio(cfg, i),
            energy_j=cap.battery_joules, step_cost_j=cfg.step_cost,
            replay=ReplayBuffer(cfg.replay.capacity, entry_bytes),
            gating=cfg.gating_mode(),
            adversary=cfg.adversaries.get(i),
        )
        if node.adversary == "garbage":
            gen = rng.stream(cfg.seed, "adversary", i)
            node.params.head = gen.normal(0.0, 10.0, size=node.params.head.shape)
            if node.params.trunk is not None:
                node.params.trunk = gen.normal(0.0, 10.0, size=node.params.trunk.shape)
        nodes.append(node)

    mobility = _build_mobility(cfg)
    state = SimState(
        cfg=cfg, tick=0, nodes=nodes, mobility=mobility, spec=spec, probe=probe,
        trust=coalition.TrustGraph(decay=cfg.trust.decay, default=cfg.trust.default),
        initial_energy={n.node_id: n.energy_j for n in nodes},
        last_contact_stats=[(0, 0)] * cfg.nodes,
        round_update_marks=[0] * cfg.nodes,
    )
    if mobility.model == network.MOBILITY_WAYPOINT:
        network.init_waypoint_state(mobility,
                                    [_node_stream(state, "mobility", i) for i in range(cfg.nodes)])
    _refresh_eval_sets(state)
    if cfg.regime == "gossip" and cfg.nodes > 1:
        contacts = network.compute_contacts(mobility, [n.radio for n in nodes], 0)
        adj = coalition.mutual_adjacency(contacts)
        comps = coalition._components(range(cfg.nodes), adj)
        if len(comps) > 1:
            state.events.append({"tick": 0, "node": -1, "kind": "gossip-disconnected",
                                 "components": len(comps)})
    return state


def _build_probe(cfg: ScenarioConfig, spec: datagen.DataStreamSpec) -> model.ProbeSet:
    batch = datagen.sample_test_batch(spec, cfg.exchange.probe_size, (0,), "probe")
    return model.ProbeSet(x=batch.x, y=batch.y)


def _build_mobility(cfg: ScenarioConfig) -> network.MobilityState:
    mob = cfg.mobility
    if mob.model == network.MOBILITY_TRACE:
        trace, last = network.load_contact_trace(mob.trace_path)
        return network.MobilityState(model=mob.model, positions=np.zeros((cfg.nodes, 2)),
                                     trace=trace, trace_end=last)
    if mob.layout == "ring":
        positions = network.ring_positions(cfg.nodes, mob.ring_radius)
    elif mob.layout == "explicit":
        positions = np.asarray(mob.positions, dtype=float)
    else:
        positions = network.grid_positions(cfg.nodes, mob.spacing)
    return network.MobilityState(model=mob.model, positions=positions,
                                 arena=tuple(mob.arena), speed_range=tuple(mob.speed))


def _round_boundary(cfg: ScenarioConfig, tick: int) -> bool:
    return cfg.regime == "federated" and (tick + 1) % cfg.federated.round_ticks == 0


def _star_contacts(cfg: ScenarioConfig, state: SimState, tick: int) -> list:
    hub = cfg.federated.server_node
    out = []
    for n in state.nodes:
        if not n.alive or n.node_id == hub:
            continue
        out.append(network.ContactEvent(tick=tick, src=n.node_id, dst=hub, distance=0.0,
                                        loss_prob=0.0, max_bytes=VIRTUAL_WINDOW))
        out.append(network.ContactEvent(tick=tick, src=hub, dst=n.node_id, distance=0.0,
                                        loss_prob=0.0, max_bytes=VIRTUAL_WINDOW))
    return out


def _apply_dropout(state: SimState) -> None:
    for tick, ids in state.cfg.dropout:
        if tick == state.tick:
            for i in ids:
                if state.nodes[i].alive:
                    state.nodes[i].alive = False
                    state.events.append({"tick": state.tick, "node": i, "kind": "dropout"})


def _masked(batch: model.Batch, mask) -> model.Batch:
    if mask is None:
        return batch
    return model.Batch(x=batch.x * mask, y=batch.y)


def _node_mask(state: SimState, i: int):
    return None if state.spec.masks is None else state.spec.masks[i]


def _local_phase(state: SimState, t: int) -> None:
    cfg = state.cfg
    steps = cfg.local_steps_per_tick
    for node in state.nodes:
        if not node.alive:
            continue
        if node.capacity.harvest_rate > 0:
            node.harvest(t, node.capacity.harvest_rate)
        i = node.node_id
        last_loss = None
        batches = []
        if steps > 0 and node.adversary is None:
            raw = datagen.sample_batch(state.spec, i, t, cfg.model.batch_size * steps)
            mix = 0
            if cfg.replay.mix > 0 and node.replay is not None and len(node.replay) > 0:
                mix = int(cfg.replay.mix * cfg.model.batch_size)
            for s in range(steps):
                part = model.Batch(x=raw.x[s * cfg.model.batch_size:(s + 1) * cfg.model.batch_size],
                                   y=raw.y[s * cfg.model.batch_size:(s + 1) * cfg.model.batch_size])
                if mix:
                    drawn = node.replay.draw(mix, _node_stream(state, "replay", i))
                    if drawn:
                        part = model.Batch(x=np.vstack([part.x] + [e.x[None, :] for e in drawn]),
                                           y=np.concatenate([part.y, [e.y for e in drawn]]))
                batches.append(part)
            last_loss = model.loss(node.params, batches[0], cfg.model.l2_penalty)
        attempts, successes = state.last_contact_stats[i]
        node.context = ctxmod.update_context(
            node.context, energy_fraction=node.energy_fraction,
            contact_attempts=attempts, contact_successes=successes,
            last_loss=last_loss, decay=cfg.context.decay)
        for part in batches:
            model.local_step(node, part, cfg.model, t, state.events)


def _exchange_phase(state: SimState, t: int, contacts: list) -> dict:
    """Phase 5: returns inboxes, a dict node id -> list of delivered packets."""
    cfg = state.cfg
    inboxes: dict[int, list] = {}
    stats = [[0, 0] for _ in range(cfg.nodes)]

    def deliver(packet, ev, sender, receiver):
        gen = _node_stream(state, "transmit", sender.node_id)
        outcome = network.transmit(packet, ev, sender, receiver, gen, t, state.events)
        stats[sender.node_id][0] += 1
        if outcome == "delivered":
            stats[sender.node_id][1] += 1
            inboxes.setdefault(receiver.node_id, []).append(packet)
        return outcome

    if cfg.regime == "federated":
        _federated_round(state, t, contacts, inboxes, stats)
    elif cfg.regime == "gossip":
        for node in state.nodes:
            if not node.alive:
                continue
            packet = exchange.encode_packet(node, exchange.KIND_FULL)
            for ev in contacts:
                if ev.src != node.node_id:
                    continue
                deliver(packet, ev, node, state.nodes[ev.dst])
    else:  # node-learning
        kind = exchange.PACKET_FOR_POLICY.get(cfg.policy.kind)
        if kind is not None:
            usable = [ev for ev in contacts
                      if state.nodes[ev.src].alive and state.nodes[ev.dst].alive
                      and ev.src not in state.sleeping_now and ev.dst not in state.sleeping_now]
            member_of = {}
            for cl in state.clusters:
                for m in cl.members:
                    member_of[m] = cl
            for node in state.nodes:
                if not node.alive or node.node_id in state.sleeping_now:
                    continue
                try:
                    packet = exchange.encode_packet(node, kind, state.probe)
                except Exception as exc:
                    state.events.append({"tick": t, "node": node.node_id,
                                         "kind": "packet-unavailable", "detail": str(exc)})
                    continue
                chosen = coalition.select_peers(node.node_id, usable, state.trust,
                                                packet.byte_size, cfg.exchange.budget_bytes)
                cluster = member_of.get(node.node_id)
                is_duty = (cluster is not None
                           and state.duty.get(cluster.cluster_id) == node.node_id)
                for ev in chosen:
                    outgoing = packet
                    if (is_duty and cfg.policy.kind == exchange.POLICY_DISTILL
                            and ev.dst not in cluster.members):
                        members = [state.nodes[m] for m in sorted(cluster.members)
                                   if state.nodes[m].alive]
                        outgoing = exchange.cluster_summary(members, state.probe, node.node_id)
                    deliver(outgoing, ev, node, state.nodes[ev.dst])
                if cfg.exchange.relay:
                    _try_relay(state, t, node, packet, usable, inboxes, stats)
    state.last_contact_stats = [tuple(s) for s in stats]
    return inboxes


def _try_relay(state, t, node, packet, contacts, inboxes, stats) -> None:
    """Forward to the first two-hop peer reachable via a shared contact."""
    i = node.node_id
    direct = {ev.dst for ev in contacts if ev.src == i}
    out_by_src: dict[int, list] = {}
    for ev in contacts:
        out_by_src.setdefault(ev.src, []).append(ev)
    for leg_in in out_by_src.get(i, []):
        r = leg_in.dst
        for leg_out in out_by_src.get(r, []):
            j = leg_out.dst
            if j == i or j in direct:
                continue
            gen = _node_stream(state, "transmit", i)
            outcome = resources.relay_forward(packet, node, state.nodes[r], state.nodes[j],
                                              leg_in, leg_out, gen, t, state.events)
            stats[i][0] += 1
            if outcome == "delivered":
                stats[i][1] += 1
                inboxes.setdefault(j, []).append(packet)
            return


def _federated_round(state: SimState, t: int, contacts, inboxes, stats) -> None:
    """Synchronous round: collect at the server-proxy, average, broadcast."""
    cfg = state.cfg
    hub_id = cfg.federated.server_node
    hub = state.nodes[hub_id]
    if not _round_boundary(cfg, t):
        return
    if not hub.alive:
        state.events.append({"tick": t, "node": hub_id, "kind": "round-skipped",
                             "reason": "server-proxy-dead"})
        return
    collected = [(hub_id, hub.params, max(0, hub.update_count - state.round_update_marks[hub_id]))]
    for ev in contacts:
        if ev.dst != hub_id:
            continue
        sender = state.nodes[ev.src]
        packet = exchange.encode_packet(sender, exchange.KIND_FULL)
        gen = _node_stream(state, "transmit", sender.node_id)
        outcome = network.transmit(packet, ev, sender, hub, gen, t, state.events)
        stats[sender.node_id][0] += 1
        if outcome == "delivered":
            stats[sender.node_id][1] += 1
            counted = max(0, sender.update_count - state.round_update_marks[sender.node_id])
            collected.append((sender.node_id, packet, counted))
    total = sum(c for _, _, c in collected)
    weights = [(c / total if total > 0 else 1.0 / len(collected)) for _, _, c in collected]
    avg_head = sum(w * (p.head if isinstance(p, model.ModelParams) else p.payload["head"])
                   for w, (_, p, _) in zip(weights, collected))
    avg_bias = sum(w * (p.bias if isinstance(p, model.ModelParams) else p.payload["bias"])
                   for w, (_, p, _) in zip(weights, collected))
    avg_trunk = None
    if state.nodes[0].params.trunk is not None:
        avg_trunk = sum(w * (p.trunk if isinstance(p, model.ModelParams) else p.payload["trunk"])
                        for w, (_, p, _) in zip(weights, collected))
    payload = {"head": avg_head, "bias": avg_bias}
    if avg_trunk is not None:
        payload["trunk"] = avg_trunk
    broadcast = exchange.KnowledgePacket(kind=exchange.KIND_FULL, payload=payload,
                                         source_node=hub_id,
                                         source_version=hub.params.version)
    inboxes.setdefault(hub_id, []).append(broadcast)
    for ev in contacts:
        if ev.src != hub_id:
            continue
        receiver = state.nodes[ev.dst]
        gen = _node_stream(state, "transmit", hub_id)
        outcome = network.transmit(broadcast, ev, hub, receiver, gen, t, state.events)
        stats[hub_id][0] += 1
        if outcome == "delivered":
            stats[hub_id][1] += 1
            inboxes.setdefault(receiver.node_id, []).append(broadcast)
    for n in state.nodes:
        state.round_update_marks[n.node_id] = n.update_count


def _merge_phase(state: SimState, t: int, inboxes: dict) -> list:
    """Phases 6: apply merges; returns (node, accepted peers, delta) for trust."""
    cfg = state.cfg
    outcomes = []
    for j in sorted(inboxes):
        node = state.nodes[j]
        if not node.alive or node.adversary is not None:
            continue
        packets = sorted(inboxes[j], key=lambda p: (p.source_node, p.kind))
        track_trust = cfg.regime == "node-learning"
        pre_acc = None
        if track_trust:
            pre_acc = model.evaluate_accuracy(
                node.params, _masked(state.val_batches[j], _node_mask(state, j)))
        if cfg.regime == "federated":
            weights = np.array([0.0] + [1.0 / len(packets)] * len(packets))
        elif cfg.regime == "gossip":
            policy = exchange.MergePolicy(kind=exchange.POLICY_AVERAGE,
                                          weight_rule=exchange.WEIGHTS_METROPOLIS)
            weights = exchange.compute_weights(node, packets, policy)
        else:
            weights = exchange.compute_weights(node, packets, cfg.policy,
                                               state.trust.row(j), cfg.trust.default,
                                               state.events, t)
        policy = cfg.policy if cfg.regime == "node-learning" else \
            exchange.MergePolicy(kind=exchange.POLICY_AVERAGE)
        consumed, accepted = exchange.apply_merge(node, packets, policy, state.probe,
                                                  weights, t, state.events)
        state.events.append({"tick": t, "node": j, "kind": "merge",
                             "peers": accepted, "bytes": consumed})
        if track_trust and accepted:
            post_acc = model.evaluate_accuracy(
                node.params, _masked(state.val_batches[j], _node_mask(state, j)))
            outcomes.append((j, accepted, post_acc - pre_acc))
    return outcomes


def _trust_phase(state: SimState, outcomes: list) -> None:
    cfg = state.cfg
    if cfg.regime != "node-learning":
        return
    for j, accepted, delta in outcomes:
        utility = coalition.squash_utility(delta, cfg.trust.squash_scale)
        for src in accepted:
            coalition.update_trust(state.trust, j, src, utility)


def _emit_metrics(state: SimState, t: int) -> None:
    cfg = state.cfg
    accs = []
    for node in state.nodes:
        acc = float("nan")
        if node.alive:
            acc = model.evaluate_accuracy(
                node.params, _masked(state.test_batch, _node_mask(state, node.node_id)))
            accs.append(acc)
        state.rows.append(MetricRecord(
            tick=t, node=node.node_id, accuracy=acc,
            energy_j=node.total_spent_j, bytes_tx=node.bytes_tx, bytes_rx=node.bytes_rx,
            updates=node.update_count, events="" if node.alive else "dead"))
    state.rows.append(MetricRecord(
        tick=t, node="pop",
        accuracy=float(np.mean(accs)) if accs else float("nan"),
        energy_j=sum(n.total_spent_j for n in state.nodes),
        bytes_tx=sum(n.bytes_tx for n in state.nodes),
        bytes_rx=sum(n.bytes_rx for n in state.nodes),
        updates=sum(n.update_count for n in state.nodes)))


def tick(state: SimState) -> SimState:
    """Advance the simulation by one tick through the fixed phase order."""
    cfg = state.cfg
    t = state.tick
    if cfg.nodes == 0:
        state.tick += 1
        return state

    _apply_dropout(state)

    alive = [n.alive for n in state.nodes]
    mob_streams = None
    if state.mobility.model == network.MOBILITY_WAYPOINT:
        mob_streams = [_node_stream(state, "mobility", i) for i in range(cfg.nodes)]
    if not network.step_mobility(state.mobility, 1.0, mob_streams, t):
        state.events.append({"tick": t, "node": -1, "kind": "trace-ended"})
        state.ended = True
        return state

    if cfg.regime == "federated":
        contacts = _star_contacts(cfg, state, t) if _round_boundary(cfg, t) else []
    else:
        contacts = network.compute_contacts(state.mobility, [n.radio for n in state.nodes],
                                            t, alive)
    adj = coalition.mutual_adjacency(contacts)
    for n in state.nodes:
        n._degree = len(adj.get(n.node_id, ()))

    state.sleeping_now = set()
    if cfg.regime == "node-learning":
        state.clusters = coalition.dissolve_expired(state.clusters, contacts, t)
        clustered = set()
        for cl in state.clusters:
            clustered |= cl.members
        free = [i for i in range(cfg.nodes) if state.nodes[i].alive and i not in clustered]
        if free:
            capacities = {i: float(state.nodes[i].capacity.compute_steps_per_tick)
                          for i in free}
            free_contacts = [ev for ev in contacts if ev.src in free and ev.dst in free]
            fresh = coalition.form_clusters(free_contacts, capacities, t, cfg.cluster.ttl,
                                            node_ids=free, next_id=state.next_cluster_id)
            state.next_cluster_id += len(fresh)
            state.clusters.extend(fresh)
        state.duty = {}
        for cl in state.clusters:
            if cfg.cluster.role_rotation:
                coordinator, sleepers = resources.rotate_roles(cl, state.nodes, t,
                                                               events=state.events)
                state.duty[cl.cluster_id] = coordinator
                state.sleeping_now |= sleepers
            else:
                state.duty[cl.cluster_id] = cl.coordinator
        for n in state.nodes:
            n.sleeping = n.node_id in state.sleeping_now
        for n in state.nodes:
            resources.expire_leases(n, t)

    _local_phase(state, t)

    if cfg.regime == "isolated" or (cfg.regime == "node-learning"
                                    and cfg.policy.kind == exchange.POLICY_NONE):
        inboxes = {}
        state.last_contact_stats = [(0, 0)] * cfg.nodes
    else:
        inboxes = _exchange_phase(state, t, contacts)

    outcomes = _merge_phase(state, t, inboxes) if inboxes else []
    _trust_phase(state, outcomes)

    if t % cfg.eval.cadence == 0 or t == cfg.ticks - 1:
        _emit_metrics(state, t)

    if any(e.tick == t for e in state.spec.drift):
        state.spec = datagen.inject_drift(state.spec, t)
        state.epoch += 1
        _refresh_eval_sets(state)
        state.events.append({"tick": t, "node": -1, "kind": "drift", "epoch": state.epoch})

    state.tick += 1
    return state


def run(cfg: ScenarioConfig) -> SimState:
    """Execute a whole scenario and audit the energy books."""
    state = init_state(cfg)
    return resume(state)


def resume(state: SimState) -> SimState:
    while state.tick < state.cfg.ticks and not state.ended:
        tick(state)
    network.audit_energy(state.nodes, state.initial_energy)
    return state


def checkpoint(state: SimState) -> bytes:
    """Serialize the full simulation state at a tick boundary."""
    return pickle.dumps({"format": CHECKPOINT_FORMAT,
                         "config": state.cfg.to_dict(),
                         "state": state})


def restore(blob: bytes, expected_cfg: Optional[ScenarioConfig] = None) -> SimState:
    """Rebuild a checkpointed state; refuses version or config mismatches."""
    data = pickle.loads(blob)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {data.get('format') if isinstance(data, dict) else '?'} "
            f"not supported (expected {CHECKPOINT_FORMAT})")
    if expected_cfg is not None and data["config"] != expected_cfg.to_dict():
        raise CheckpointError("checkpoint config does not match the requested scenario")
    return data["state"]
