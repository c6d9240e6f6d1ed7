import json
import math

import numpy as np
import pytest

from nodelearn.datagen import sample_batch, simplex_prototypes
from nodelearn.errors import ConfigurationError
from nodelearn.exchange import (KIND_FULL, KIND_LOGITS, KIND_PROTO, KIND_TRUNK,
                                KnowledgePacket, MergePolicy, cluster_summary,
                                compute_weights, encode_packet, merge_average,
                                merge_distill, merge_prototype, merge_trunk,
                                packet_to_json)
from nodelearn.model import (Batch, ProbeSet, TrainingConfig, evaluate_accuracy,
                             local_step, probe_logits)

from conftest import make_node
from test_datagen import make_spec


def make_probe(seed=0, k=3, d=4, size=12):
    gen = np.random.default_rng(seed)
    y = np.tile(np.arange(k), size // k + 1)[:size]
    x = simplex_prototypes(k, d, 4.0)[y] + gen.normal(0, 1.0, (size, d))
    return ProbeSet(x=x, y=y)


# ----------------------------------------------------------------- encode_packet

def test_full_params_byte_size_linear():
    node = make_node(feature_dim=3, class_count=2)
    packet = encode_packet(node, KIND_FULL)
    assert packet.byte_size == 8 * (3 * 2 + 2) + 32 == 96


def test_probe_logits_byte_size():
    node = make_node(feature_dim=4, class_count=2)
    probe = make_probe(k=2, size=10)
    packet = encode_packet(node, KIND_LOGITS, probe)
    assert packet.byte_size == 8 * 20 + 32 == 192
    assert packet.probe_digest == probe.digest


def test_prototypes_require_replay_entries():
    node = make_node()
    with pytest.raises(ConfigurationError, match="prototypes unavailable"):
        encode_packet(node, KIND_PROTO)


def test_trunk_requires_mlp_mode():
    node = make_node()
    with pytest.raises(ConfigurationError):
        encode_packet(node, KIND_TRUNK)


def test_packet_json_elides_payload():
    node = make_node(feature_dim=3, class_count=2)
    packet = encode_packet(node, KIND_FULL)
    bare = json.loads(packet_to_json(packet))
    assert bare == {"kind": "full-params", "source": 0, "version": 0, "byte_size": 96}
    full = json.loads(packet_to_json(packet, include_payload=True))
    assert "payload" in full and len(full["payload"]["head"]) == 3


# ----------------------------------------------------------------- merge_average

def full_packet(source, head, bias, trunk=None):
    payload = {"head": np.asarray(head, dtype=float), "bias": np.asarray(bias, dtype=float)}
    if trunk is not None:
        payload["trunk"] = np.asarray(trunk, dtype=float)
    return KnowledgePacket(kind=KIND_FULL, payload=payload, source_node=source,
                           source_version=0)


def test_average_arithmetic():
    node = make_node(feature_dim=1, class_count=2)
    node.params.head[:] = 0.0
    node.params.bias[:] = 0.0
    packet = full_packet(1, [[2.0, 2.0]], [2.0, 2.0])
    merge_average(node, [packet], np.array([0.5, 0.5]))
    assert np.allclose(node.params.head, [[1.0, 1.0]])
    assert np.allclose(node.params.bias, [1.0, 1.0])


def test_average_self_weight_one_is_identity():
    node = make_node()
    before_head = node.params.head.copy()
    packet = full_packet(1, np.ones_like(node.params.head), np.ones_like(node.params.bias))
    merge_average(node, [packet], np.array([1.0, 0.0]))
    assert np.array_equal(node.params.head, before_head)
    assert node.params.version == 1


def test_average_three_equal_peers_uniform_is_mean():
    node = make_node(feature_dim=2, class_count=2)
    node.params.head[:] = 0.0
    node.params.bias[:] = 0.0
    peers = [full_packet(i, np.full((2, 2), 4.0), np.full(2, 4.0)) for i in (1, 2, 3)]
    merge_average(node, peers, np.full(4, 0.25))
    assert np.allclose(node.params.head, 3.0)


def test_average_rejects_mismatched_shapes_and_proceeds():
    node = make_node(feature_dim=2, class_count=2)
    before = node.params.head.copy()
    good = full_packet(1, before, node.params.bias)
    bad = full_packet(2, np.zeros((5, 2)), np.zeros(2))
    events = []
    consumed, accepted = merge_average(node, [good, bad],
                                       np.array([0.4, 0.3, 0.3]), events=events)
    assert accepted == [1]
    assert consumed == good.byte_size
    assert any(e["kind"] == "packet-rejected" for e in events)
    # rejected weight folds back into self: result stays at the shared value
    assert np.allclose(node.params.head, before)


def test_average_bytes_equal_accepted_sizes():
    node = make_node(feature_dim=3, class_count=2)
    peers = [full_packet(i, node.params.head, node.params.bias) for i in (1, 2)]
    consumed, accepted = merge_average(node, peers, np.full(3, 1 / 3))
    assert consumed == sum(p.byte_size for p in peers)
    assert accepted == [1, 2]


def test_average_doubly_stochastic_preserves_population_mean():
    # conservation law for the gossip regime, checked at merge level
    gen = np.random.default_rng(5)
    nodes = [make_node(node_id=i, seed=i) for i in range(4)]
    for n in nodes:
        n.params.head = gen.normal(0, 1, n.params.head.shape)
    mean_before = np.mean([n.params.head for n in nodes], axis=0)
    # symmetric pairwise weights: ring with metropolis 1/3
    packets = {i: full_packet(i, nodes[i].params.head, nodes[i].params.bias)
               for i in range(4)}
    ring = {0: (1, 3), 1: (2, 0), 2: (3, 1), 3: (0, 2)}
    for i, (a, b) in ring.items():
        merge_average(nodes[i], [packets[a], packets[b]], np.array([1 / 3, 1 / 3, 1 / 3]))
    mean_after = np.mean([n.params.head for n in nodes], axis=0)
    assert np.allclose(mean_before, mean_after, atol=1e-12)


def test_gossip_decay_matches_matrix_power_oracle():
    # dense weight-matrix power iteration predicts the round where the max
    # pairwise distance falls below 1e-6 of its initial value
    n = 6
    nodes = [make_node(node_id=i, feature_dim=2, class_count=2, seed=100 + i)
             for i in range(n)]
    X = np.stack([node.params.flat() for node in nodes])
    W = np.zeros((n, n))
    for i in range(n):
        for j in ((i - 1) % n, (i + 1) % n):
            W[i, j] = 1.0 / 3.0
        W[i, i] = 1.0 / 3.0

    def spread(mat):
        return max(np.linalg.norm(mat[i] - mat[j])
                   for i in range(n) for j in range(i + 1, n))

    initial = spread(X)
    oracle_rounds = None
    Y = X.copy()
    for r in range(1, 500):
        Y = W @ Y
        if spread(Y) < 1e-6 * initial:
            oracle_rounds = r
            break
    assert oracle_rounds is not None

    prev = initial
    engine_rounds = None
    for r in range(1, 500):
        packets = {i: full_packet(i, nodes[i].params.head, nodes[i].params.bias)
                   for i in range(n)}
        for i in range(n):
            neigh = [(i - 1) % n, (i + 1) % n]
            merge_average(nodes[i], [packets[j] for j in neigh],
                          np.array([1 / 3, 1 / 3, 1 / 3]))
        cur = spread(np.stack([node.params.flat() for node in nodes]))
        assert cur <= prev + 1e-15  # monotone decay
        prev = cur
        if cur < 1e-6 * initial:
            engine_rounds = r
            break
    assert engine_rounds is not None
    assert abs(engine_rounds - oracle_rounds) <= 1


# ----------------------------------------------------------------- merge_distill

def test_distill_zero_steps_is_identity():
    node = make_node()
    probe = make_probe()
    peer = make_node(node_id=1, seed=9)
    packet = encode_packet(peer, KIND_LOGITS, probe)
    before = node.params.head.copy()
    policy = MergePolicy(kind="distill", distill_steps=0)
    merge_distill(node, [packet], policy, probe)
    assert np.array_equal(node.params.head, before)
    assert node.params.version == 1


def test_distill_self_teacher_changes_nothing():
    node = make_node()
    probe = make_probe()
    packet = encode_packet(node, KIND_LOGITS, probe)
    before = node.params.flat()
    policy = MergePolicy(kind="distill", distill_steps=10, distill_rate=0.5)
    merge_distill(node, [packet], policy, probe)
    assert np.linalg.norm(node.params.flat() - before) < 1e-8


def test_distill_probe_mismatch_rejected():
    node = make_node()
    probe = make_probe(seed=0)
    other = make_probe(seed=1)
    peer = make_node(node_id=1, seed=9)
    packet = encode_packet(peer, KIND_LOGITS, other)
    events = []
    before = node.params.head.copy()
    consumed, accepted = merge_distill(node, [packet],
                                       MergePolicy(kind="distill", distill_steps=5),
                                       probe, events=events)
    assert consumed == 0 and accepted == []
    assert np.array_equal(node.params.head, before)
    assert events[0]["reason"] == "probe-mismatch"


def test_distill_converges_to_teacher():
    # oracle: run distillation to convergence; the student's probe accuracy
    # lands within 2% of the teacher's on a separable task
    k, d = 3, 4
    spec = make_spec(nodes=1, k=k, d=d, sigma=0.6,
                     priors=np.full((1, k), 1 / k), seed=11)
    probe_batch = sample_batch(spec, 0, 99, 60)
    probe = ProbeSet(x=probe_batch.x, y=probe_batch.y)
    teacher = make_node(node_id=1, feature_dim=d, class_count=k, seed=1)
    cfg = TrainingConfig(learning_rate=0.2)
    for t in range(300):
        batch = sample_batch(spec, 0, t, 16)
        local_step(teacher, batch, cfg, tick=t)
    student = make_node(node_id=0, feature_dim=d, class_count=k, seed=2)
    packet = encode_packet(teacher, KIND_LOGITS, probe)
    policy = MergePolicy(kind="distill", distill_steps=500, distill_rate=1.0)
    merge_distill(student, [packet], policy, probe)
    teacher_acc = evaluate_accuracy(teacher.params, probe_batch)
    student_acc = evaluate_accuracy(student.params, probe_batch)
    assert abs(student_acc - teacher_acc) <= 0.02


# ------------------------------------------------------------------- merge_trunk

def test_trunk_merge_identity_and_private_head():
    node = make_node(mode="one-hidden-layer", hidden_dim=6)
    peer = make_node(node_id=1, mode="one-hidden-layer", hidden_dim=6, seed=3)
    packet = encode_packet(peer, KIND_TRUNK)
    head_before = node.params.head.copy()
    trunk_before = node.params.trunk.copy()
    merge_trunk(node, [packet], np.array([1.0, 0.0]))
    assert np.array_equal(node.params.trunk, trunk_before)
    merge_trunk(node, [packet], np.array([0.5, 0.5]))
    assert np.array_equal(node.params.head, head_before)  # head always untouched
    assert not np.array_equal(node.params.trunk, trunk_before)


def test_trunk_merge_rejected_in_linear_mode():
    node = make_node()
    with pytest.raises(ConfigurationError):
        merge_trunk(node, [], np.array([1.0]))


def test_trunk_exchange_helps_both_tasks():
    # two-task experiment: same cluster structure in a few dimensions of a
    # noisy input, labels permuted between the two nodes. Trunk averaging
    # against an isolated control must lift both nodes' own-task accuracy
    # (seed-averaged; the representation is the shared bottleneck).
    k, d, hidden = 3, 12, 8
    perm = np.array([1, 2, 0])
    cfg = TrainingConfig(mode="one-hidden-layer", hidden_dim=hidden, learning_rate=0.1)

    def train(spec, pair_exchange):
        a = make_node(node_id=0, feature_dim=d, class_count=k, seed=50,
                      mode="one-hidden-layer", hidden_dim=hidden)
        b = make_node(node_id=1, feature_dim=d, class_count=k, seed=50,
                      mode="one-hidden-layer", hidden_dim=hidden)
        train_a = sample_batch(spec, 0, 0, 12)
        train_b_raw = sample_batch(spec, 0, 1, 12)
        train_b = Batch(x=train_b_raw.x, y=perm[train_b_raw.y])
        for t in range(500):
            local_step(a, train_a, cfg, tick=t)
            local_step(b, train_b, cfg, tick=t)
            if pair_exchange:
                pa = encode_packet(a, KIND_TRUNK)
                pb = encode_packet(b, KIND_TRUNK)
                merge_trunk(a, [pb], np.array([0.5, 0.5]))
                merge_trunk(b, [pa], np.array([0.5, 0.5]))
        test_raw = sample_batch(spec, 0, 777, 2000)
        acc_a = evaluate_accuracy(a.params, test_raw)
        acc_b = evaluate_accuracy(b.params, Batch(x=test_raw.x, y=perm[test_raw.y]))
        return acc_a, acc_b

    iso = np.zeros(2)
    col = np.zeros(2)
    seeds = (21, 22, 23, 24, 25, 26)
    for seed in seeds:
        spec = make_spec(nodes=1, k=k, d=d, sigma=1.0,
                         priors=np.full((1, k), 1 / k), seed=seed)
        iso += train(spec, pair_exchange=False)
        col += train(spec, pair_exchange=True)
    assert col[0] / len(seeds) > iso[0] / len(seeds)
    assert col[1] / len(seeds) > iso[1] / len(seeds)


# --------------------------------------------------------------- merge_prototype

def proto_packet(source, means, counts):
    return KnowledgePacket(kind=KIND_PROTO,
                           payload={"means": np.asarray(means, dtype=float),
                                    "counts": np.asarray(counts, dtype=float)},
                           source_node=source, source_version=0)


def test_prototype_empty_packets_change_nothing():
    node = make_node()
    merge_prototype(node, [], np.array([1.0]))
    assert len(node.replay) == 0


def test_prototype_buffer_evicts_synthetic_first():
    node = make_node(replay_capacity=3)
    node.replay.add(np.zeros(4), 0, synthetic=False)
    node.replay.add(np.ones(4), 1, synthetic=True)
    node.replay.add(np.full(4, 2.0), 2, synthetic=False)
    node.replay.add(np.full(4, 3.0), 0, synthetic=False)  # evicts the synthetic one
    kinds = [(e.y, e.synthetic) for e in node.replay.entries]
    assert kinds == [(0, False), (2, False), (0, False)]


def test_prototype_dim_mismatch_rejected():
    node = make_node(feature_dim=4)
    events = []
    consumed, accepted = merge_prototype(node, [proto_packet(1, np.zeros((2, 7)), [1, 1])],
                                         np.array([0.5, 0.5]), events=events)
    assert consumed == 0 and accepted == []
    assert len(node.replay) == 0


def test_prototype_unseen_class_recall_improves():
    # rare-class experiment: a node whose stream never shows class 2 gains
    # recall on it after receiving that class's prototype
    k, d = 3, 4
    priors = np.array([[0.5, 0.5, 0.0]])
    spec = make_spec(nodes=1, k=k, d=d, sigma=0.8, priors=priors, seed=31)
    cfg = TrainingConfig(learning_rate=0.1)

    def recall_class2(with_prototypes):
        node = make_node(feature_dim=d, class_count=k, seed=60)
        if with_prototypes:
            means = spec.prototypes.copy()
            counts = np.array([0.0, 0.0, 5.0])  # only the unseen class arrives
            merge_prototype(node, [proto_packet(1, means, counts)],
                            np.array([0.3, 0.7]), replication=6)
        gen = np.random.default_rng(8)
        for t in range(200):
            batch = sample_batch(spec, 0, t, 8)
            if len(node.replay) > 0:
                drawn = node.replay.draw(4, gen)
                batch = Batch(x=np.vstack([batch.x] + [e.x[None, :] for e in drawn]),
                              y=np.concatenate([batch.y, [e.y for e in drawn]]))
            local_step(node, batch, cfg, tick=t)
        test = sample_batch(make_spec(nodes=1, k=k, d=d, sigma=0.8,
                                      priors=np.full((1, k), 1 / k), seed=32), 0, 0, 1500)
        mask = test.y == 2
        from nodelearn.model import forward
        probs, _ = forward(node.params, test.x[mask])
        return float(np.mean(np.argmax(probs, axis=1) == 2))

    baseline = recall_class2(False)
    boosted = recall_class2(True)
    assert boosted > baseline


# --------------------------------------------------------------- cluster_summary

def test_cluster_summary_single_member_is_own_packet():
    node = make_node()
    probe = make_probe()
    own = encode_packet(node, KIND_LOGITS, probe)
    summary = cluster_summary([node], probe, node.node_id)
    assert np.allclose(summary.payload["logits"], own.payload["logits"], atol=1e-15)


def test_cluster_summary_idempotent_for_identical_members():
    probe = make_probe()
    members = [make_node(node_id=i, seed=7) for i in range(3)]
    summary = cluster_summary(members, probe, 0)
    assert np.allclose(summary.payload["logits"],
                       probe_logits(members[0].params, probe), atol=1e-12)


def test_cluster_summary_size_independent_of_members():
    probe = make_probe()
    one = cluster_summary([make_node(node_id=0)], probe, 0)
    many = cluster_summary([make_node(node_id=i, seed=i) for i in range(5)], probe, 0)
    assert one.byte_size == many.byte_size


# ---------------------------------------------------------------- compute_weights

def test_weights_uniform_one_peer():
    node = make_node()
    packet = full_packet(1, node.params.head, node.params.bias)
    w = compute_weights(node, [packet], MergePolicy(weight_rule="uniform"))
    assert np.allclose(w, [0.5, 0.5])


def test_weights_metropolis_ring():
    node = make_node()
    node._degree = 2
    packets = []
    for i in (1, 2):
        p = full_packet(i, node.params.head, node.params.bias)
        p.source_degree = 2
        packets.append(p)
    w = compute_weights(node, packets, MergePolicy(weight_rule="metropolis"))
    assert np.allclose(w, [1 / 3, 1 / 3, 1 / 3])


def test_weights_zero_trust_falls_back_to_self():
    node = make_node()
    packets = [full_packet(i, node.params.head, node.params.bias) for i in (1, 2)]
    events = []
    w = compute_weights(node, packets, MergePolicy(weight_rule="trust-context"),
                        trust_row={1: 0.0, 2: 0.0}, events=events)
    assert np.array_equal(w, [1.0, 0.0, 0.0])
    assert events[0]["kind"] == "trust-fallback"


def test_weights_always_normalised():
    gen = np.random.default_rng(17)
    node = make_node()
    node._degree = 3
    for rule in ("uniform", "metropolis", "trust-context"):
        for n_peers in (0, 1, 2, 5):
            packets = []
            trust = {}
            for i in range(n_peers):
                p = full_packet(i + 1, node.params.head, node.params.bias)
                p.source_degree = int(gen.integers(1, 6))
                p.context_summary = (1.0, float(gen.uniform(0, 1)), 1.0)
                trust[i + 1] = float(gen.uniform(0, 1))
                packets.append(p)
            w = compute_weights(node, packets, MergePolicy(weight_rule=rule),
                                trust_row=trust)
            assert np.all(w >= 0)
            assert abs(w.sum() - 1.0) < 1e-12
