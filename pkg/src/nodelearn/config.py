"""Declarative scenario configuration: schema, validation, and resolution.

A scenario is a single JSON document. Everything has a default, so a minimal
config can be tiny, but every value that reaches the engine passes through
exactly one validation path here — the CLI's `validate` verb and `run` share
it, so they accept and reject the same inputs. Violations are reported with
JSON-path locations ("$.policy.kind: ..."). Unknown keys are errors in strict
mode and warnings in lax mode.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import datagen
from .errors import ConfigurationError
from .exchange import MergePolicy, PACKET_KINDS, POLICY_AVERAGE, POLICY_KINDS, WEIGHT_RULES
from .model import MODES, TrainingConfig
from .network import DEFAULT_PROFILES, MOBILITY_STATIC, MOBILITY_TRACE, MOBILITY_WAYPOINT, RadioProfile
from .resources import CapacityProfile, HARDWARE_CLASSES

REGIMES = ("isolated", "federated", "gossip", "node-learning")
LAYOUTS = ("grid", "ring", "explicit")
GATING_MODES = ("context", "off")
ADVERSARY_KINDS = ("garbage",)


class _Section:
    """Dict wrapper that tracks a JSON path, collects errors, and flags unknown keys."""

    def __init__(self, data: dict, path: str, errors: list, warnings: list, strict: bool):
        self.data = data if isinstance(data, dict) else {}
        self.path = path
        self.errors = errors
        self.warnings = warnings
        self.strict = strict
        self._known: set[str] = set()
        if not isinstance(data, dict) and data is not None:
            errors.append(f"{path}: expected an object")

    def sub(self, key: str) -> "_Section":
        self._known.add(key)
        return _Section(self.data.get(key, {}), f"{self.path}.{key}",
                        self.errors, self.warnings, self.strict)

    def err(self, key: str, message: str) -> None:
        self.errors.append(f"{self.path}.{key}: {message}")

    def get(self, key: str, default=None):
        self._known.add(key)
        return self.data.get(key, default)

    def number(self, key: str, default, lo=None, hi=None, integer=False):
        self._known.add(key)
        v = self.data.get(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.err(key, f"expected a number, got {v!r}")
            return default
        if integer and int(v) != v:
            self.err(key, f"expected an integer, got {v!r}")
            return default
        if lo is not None and v < lo:
            self.err(key, f"must be >= {lo}, got {v!r}")
            return default
        if hi is not None and v > hi:
            self.err(key, f"must be <= {hi}, got {v!r}")
            return default
        return int(v) if integer else float(v)

    def choice(self, key: str, default, options):
        self._known.add(key)
        v = self.data.get(key, default)
        if v is not None and v not in options:
            self.err(key, f"must be one of {sorted(options)}, got {v!r}")
            return default
        return v

    def boolean(self, key: str, default: bool) -> bool:
        self._known.add(key)
        v = self.data.get(key, default)
        if not isinstance(v, bool):
            self.err(key, f"expected true/false, got {v!r}")
            return default
        return v

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self._known)
        for key in unknown:
            msg = f"{self.path}.{key}: unknown key"
            if self.strict:
                self.errors.append(msg)
            else:
                self.warnings.append(msg)


@dataclass
class MobilityCfg:
    model: str = MOBILITY_STATIC
    layout: str = "grid"
    arena: tuple = (100.0, 100.0)
    spacing: float = 10.0
    ring_radius: float = 20.0
    speed: tuple = (0.5, 1.5)
    positions: Optional[list] = None
    trace_path: Optional[str] = None


@dataclass
class ExchangeCfg:
    budget_bytes: int = 8192
    probe_size: int = 32
    relay: bool = False


@dataclass
class ClusterCfg:
    ttl: int = 5
    role_rotation: bool = False


@dataclass
class TrustCfg:
    decay: float = 0.9
    default: float = 0.5
    squash_scale: float = 0.02


@dataclass
class ContextCfg:
    decay: float = 0.9
    gating: Optional[str] = None  # None -> regime default


@dataclass
class FederatedCfg:
    server_node: int = 0
    round_ticks: int = 2


@dataclass
class ReplayCfg:
    capacity: int = 64
    mix: float = 0.25


@dataclass
class EvalCfg:
    cadence: int = 10
    test_size: int = 300
    validation_size: int = 40


@dataclass
class DataCfg:
    classes: int = 5
    features: int = 10
    sigma: float = 1.0
    prototype_distance: Optional[float] = None
    bayes_target: Optional[float] = None
    alpha: Optional[float] = 1.0
    priors: Optional[list] = None
    drift: list = field(default_factory=list)


@dataclass
class GroupCfg:
    count: int
    radio: Optional[RadioProfile] = None
    capacity: Optional[CapacityProfile] = None
    mask: Optional[list] = None


@dataclass
class ScenarioConfig:
    name: str = "run"
    seed: int = 0
    nodes: int = 10
    ticks: int = 100
    regime: str = "node-learning"
    local_steps_per_tick: int = 1
    model: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataCfg = field(default_factory=DataCfg)
    radio: RadioProfile = field(default_factory=lambda: DEFAULT_PROFILES["wifi"])
    capacity: CapacityProfile = field(default_factory=CapacityProfile)
    step_cost: float = 0.001
    mobility: MobilityCfg = field(default_factory=MobilityCfg)
    policy: MergePolicy = field(default_factory=MergePolicy)
    exchange: ExchangeCfg = field(default_factory=ExchangeCfg)
    cluster: ClusterCfg = field(default_factory=ClusterCfg)
    trust: TrustCfg = field(default_factory=TrustCfg)
    context: ContextCfg = field(default_factory=ContextCfg)
    federated: FederatedCfg = field(default_factory=FederatedCfg)
    replay: ReplayCfg = field(default_factory=ReplayCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    dropout: list = field(default_factory=list)       # [(tick, [node ids])]
    adversaries: dict = field(default_factory=dict)   # node id -> kind
    groups: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def gating_mode(self) -> str:
        if self.context.gating is not None:
            return self.context.gating
        return "off" if self.regime in ("federated", "gossip") else "context"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("warnings", None)
        return d


def _parse_radio(sec: _Section) -> RadioProfile:
    base_name = sec.choice("profile", "wifi", tuple(DEFAULT_PROFILES) + ("custom",))
    base = DEFAULT_PROFILES.get(base_name, DEFAULT_PROFILES["wifi"])
    prof = RadioProfile(
        name=base_name,
        data_rate=sec.number("data_rate", base.data_rate, lo=1e-9),
        tx_j_per_byte=sec.number("tx_j_per_byte", base.tx_j_per_byte, lo=0.0),
        rx_j_per_byte=sec.number("rx_j_per_byte", base.rx_j_per_byte, lo=0.0),
        range_m=sec.number("range_m", base.range_m, lo=1e-9),
        loss_base=sec.number("loss_base", base.loss_base, lo=0.0, hi=1.0),
        loss_exponent=sec.number("loss_exponent", base.loss_exponent, lo=0.0),
    )
    sec.finish()
    return prof


def _parse_capacity(sec: _Section) -> CapacityProfile:
    prof = CapacityProfile(
        memory_bytes=sec.number("memory_bytes", 2_000_000, lo=0, integer=True),
        compute_steps_per_tick=sec.number("compute_steps_per_tick", 1, lo=0, integer=True),
        battery_joules=sec.number("battery_joules", 50.0, lo=0.0),
        harvest_rate=sec.number("harvest_rate", 0.0, lo=0.0),
        hardware_class=sec.choice("hardware_class", "mcu", HARDWARE_CLASSES),
    )
    sec.finish()
    return prof


def _parse_drift(entries, path: str, errors: list, ticks: int) -> list:
    out = []
    if entries is None:
        return out
    if not isinstance(entries, list):
        errors.append(f"{path}: expected a list")
        return out
    last = -1
    for i, e in enumerate(entries):
        p = f"{path}[{i}]"
        if not isinstance(e, dict):
            errors.append(f"{p}: expected an object")
            continue
        kind = e.get("kind")
        if kind not in datagen.DRIFT_KINDS:
            errors.append(f"{p}.kind: must be one of {sorted(datagen.DRIFT_KINDS)}, got {kind!r}")
            continue
        tick = e.get("tick")
        if not isinstance(tick, int) or isinstance(tick, bool) or not (0 <= tick < ticks):
            errors.append(f"{p}.tick: must be an integer in [0, {ticks}), got {tick!r}")
            continue
        if tick <= last:
            errors.append(f"{p}.tick: drift times must be strictly increasing")
        last = tick
        classes = e.get("classes", [0, 1])
        if (not isinstance(classes, list) or len(classes) != 2
                or not all(isinstance(c, int) for c in classes)):
            errors.append(f"{p}.classes: expected a pair of class indices")
            classes = [0, 1]
        magnitude = e.get("magnitude", 0.0)
        if isinstance(magnitude, bool) or not isinstance(magnitude, (int, float)):
            errors.append(f"{p}.magnitude: expected a number, got {magnitude!r}")
            magnitude = 0.0
        unknown = set(e) - {"kind", "tick", "magnitude", "classes"}
        for key in sorted(unknown):
            errors.append(f"{p}.{key}: unknown key")
        out.append(datagen.DriftEvent(tick=tick, kind=kind, magnitude=float(magnitude),
                                      classes=(classes[0], classes[1])))
    return out


def validate_config(raw: dict, strict: bool = True):
    """Parse and validate a raw config dict.

    Returns (ScenarioConfig or None, errors, warnings). The config is None
    exactly when errors is nonempty.
    """
    errors: list[str] = []
    warnings: list[str] = []
    root = _Section(raw, "$", errors, warnings, strict)

    name = root.get("name", "run")
    if not isinstance(name, str) or not name:
        root.err("name", f"expected a nonempty string, got {name!r}")
        name = "run"
    seed = root.number("seed", 0, integer=True)
    nodes = root.number("nodes", 10, lo=1, integer=True)
    ticks = root.number("ticks", 100, lo=1, integer=True)
    regime = root.choice("regime", "node-learning", REGIMES)
    local_steps = root.number("local_steps_per_tick", 1, lo=0, integer=True)

    msec = root.sub("model")
    model = TrainingConfig(
        learning_rate=msec.number("learning_rate", 0.05, lo=1e-12),
        batch_size=msec.number("batch_size", 8, lo=1, integer=True),
        mode=msec.choice("mode", "linear-softmax", MODES),
        hidden_dim=msec.number("hidden_dim", 16, lo=1, integer=True),
        l2_penalty=msec.number("l2_penalty", 0.0, lo=0.0),
    )
    msec.finish()

    dsec = root.sub("data")
    data = DataCfg(
        classes=dsec.number("classes", 5, lo=2, integer=True),
        features=dsec.number("features", 10, lo=1, integer=True),
        sigma=dsec.number("sigma", 1.0, lo=0.0),
        prototype_distance=dsec.number("prototype_distance", None, lo=0.0),
        bayes_target=dsec.number("bayes_target", None, lo=0.0, hi=1.0),
        alpha=dsec.number("alpha", 1.0, lo=1e-12),
        priors=dsec.get("priors"),
        drift=_parse_drift(dsec.get("drift"), "$.data.drift", errors, ticks or 1),
    )
    dsec.finish()
    if data.priors is not None:
        arr = np.asarray(data.priors, dtype=float) if isinstance(data.priors, list) else None
        if arr is None or arr.ndim != 2 or arr.shape != (nodes, data.classes):
            errors.append(f"$.data.priors: expected a {nodes}x{data.classes} matrix")
        elif not np.allclose(arr.sum(axis=1), 1.0, atol=1e-9):
            errors.append("$.data.priors: each row must sum to 1 within 1e-9")
    if data.features < data.classes:
        errors.append("$.data.features: must be >= $.data.classes for simplex prototypes")

    radio = _parse_radio(root.sub("radio"))
    capacity = _parse_capacity(root.sub("capacity"))

    esec = root.sub("energy")
    step_cost = esec.number("step_cost", 0.001, lo=0.0)
    esec.finish()

    mobsec = root.sub("mobility")
    mobility = MobilityCfg(
        model=mobsec.choice("model", MOBILITY_STATIC,
                            (MOBILITY_STATIC, MOBILITY_WAYPOINT, MOBILITY_TRACE)),
        layout=mobsec.choice("layout", "grid", LAYOUTS),
        arena=tuple(mobsec.get("arena", [100.0, 100.0])),
        spacing=mobsec.number("spacing", 10.0, lo=1e-9),
        ring_radius=mobsec.number("ring_radius", 20.0, lo=1e-9),
        speed=tuple(mobsec.get("speed", [0.5, 1.5])),
        positions=mobsec.get("positions"),
        trace_path=mobsec.get("trace_path"),
    )
    mobsec.finish()
    if len(mobility.arena) != 2:
        errors.append("$.mobility.arena: expected [width, height]")
    if len(mobility.speed) != 2 or mobility.speed[0] > mobility.speed[1]:
        errors.append("$.mobility.speed: expected [min, max] with min <= max")
    if mobility.model == MOBILITY_TRACE and not mobility.trace_path:
        errors.append("$.mobility.trace_path: required when $.mobility.model is 'trace'")
    if mobility.layout == "explicit":
        pos = mobility.positions
        if not isinstance(pos, list) or len(pos) != nodes \
                or not all(isinstance(p, list) and len(p) == 2 for p in pos):
            errors.append(f"$.mobility.positions: expected {nodes} [x, y] pairs")

    psec = root.sub("policy")
    policy = MergePolicy(
        kind=psec.choice("kind", POLICY_AVERAGE, POLICY_KINDS),
        weight_rule=psec.choice("weights", "uniform", WEIGHT_RULES),
        distill_steps=psec.number("distill_steps", 5, lo=0, integer=True),
        distill_rate=psec.number("distill_rate", 0.5, lo=1e-12),
    )
    psec.finish()

    xsec = root.sub("exchange")
    exchange = ExchangeCfg(
        budget_bytes=xsec.number("budget_bytes", 8192, lo=0, integer=True),
        probe_size=xsec.number("probe_size", 32, lo=1, integer=True),
        relay=xsec.boolean("relay", False),
    )
    xsec.finish()

    csec = root.sub("cluster")
    cluster = ClusterCfg(
        ttl=csec.number("ttl", 5, lo=0, integer=True),
        role_rotation=csec.boolean("role_rotation", False),
    )
    csec.finish()

    tsec = root.sub("trust")
    trust = TrustCfg(
        decay=tsec.number("decay", 0.9, lo=0.0, hi=1.0),
        default=tsec.number("default", 0.5, lo=0.0, hi=1.0),
        squash_scale=tsec.number("squash_scale", 0.02, lo=1e-12),
    )
    tsec.finish()

    ctxsec = root.sub("context")
    context = ContextCfg(
        decay=ctxsec.number("decay", 0.9, lo=0.0, hi=1.0),
        gating=ctxsec.choice("gating", None, GATING_MODES),
    )
    ctxsec.finish()

    fsec = root.sub("federated")
    federated = FederatedCfg(
        server_node=fsec.number("server_node", 0, lo=0, integer=True),
        round_ticks=fsec.number("round_ticks", 2, lo=1, integer=True),
    )
    fsec.finish()

    rsec = root.sub("replay")
    replay = ReplayCfg(
        capacity=rsec.number("capacity", 64, lo=0, integer=True),
        mix=rsec.number("mix", 0.25, lo=0.0, hi=1.0),
    )
    rsec.finish()

    evsec = root.sub("eval")
    eval_cfg = EvalCfg(
        cadence=evsec.number("cadence", 10, lo=1, integer=True),
        test_size=evsec.number("test_size", 300, lo=1, integer=True),
        validation_size=evsec.number("validation_size", 40, lo=1, integer=True),
    )
    evsec.finish()

    dropout = []
    raw_dropout = root.get("dropout", [])
    if not isinstance(raw_dropout, list):
        errors.append("$.dropout: expected a list")
        raw_dropout = []
    for i, d in enumerate(raw_dropout):
        p = f"$.dropout[{i}]"
        if not isinstance(d, dict) or "tick" not in d or "nodes" not in d:
            errors.append(f"{p}: expected an object with tick and nodes")
            continue
        t, ns = d.get("tick"), d.get("nodes")
        if not isinstance(t, int) or not (0 <= t < (ticks or 1)):
            errors.append(f"{p}.tick: must be an integer in [0, {ticks})")
            continue
        if not isinstance(ns, list) or not all(isinstance(x, int) and 0 <= x < nodes for x in ns):
            errors.append(f"{p}.nodes: expected node ids in [0, {nodes})")
            continue
        for key in sorted(set(d) - {"tick", "nodes"}):
            errors.append(f"{p}.{key}: unknown key")
        dropout.append((t, sorted(ns)))
    dropout.sort()

    adversaries = {}
    raw_adv = root.get("adversaries", {})
    if not isinstance(raw_adv, dict):
        errors.append("$.adversaries: expected an object of node id -> kind")
        raw_adv = {}
    for key, kind in raw_adv.items():
        try:
            nid = int(key)
        except (TypeError, ValueError):
            errors.append(f"$.adversaries.{key}: node id must be an integer")
            continue
        if not (0 <= nid < nodes):
            errors.append(f"$.adversaries.{key}: node id out of range [0, {nodes})")
            continue
        if kind not in ADVERSARY_KINDS:
            errors.append(f"$.adversaries.{key}: must be one of {sorted(ADVERSARY_KINDS)}")
            continue
        adversaries[nid] = kind

    groups = []
    raw_groups = root.get("groups", [])
    if not isinstance(raw_groups, list):
        errors.append("$.groups: expected a list")
        raw_groups = []
    for i, g in enumerate(raw_groups):
        gsec = _Section(g, f"$.groups[{i}]", errors, warnings, strict)
        count = gsec.number("count", 0, lo=1, integer=True)
        g_radio = _parse_radio(gsec.sub("radio")) if "radio" in gsec.data else None
        gsec._known.add("radio")
        g_cap = _parse_capacity(gsec.sub("capacity")) if "capacity" in gsec.data else None
        gsec._known.add("capacity")
        mask = gsec.get("mask")
        if mask is not None and (not isinstance(mask, list)
                                 or not all(isinstance(m, int) and 0 <= m < data.features
                                            for m in mask)):
            gsec.err("mask", f"expected feature indices in [0, {data.features})")
            mask = None
        gsec.finish()
        groups.append(GroupCfg(count=count or 1, radio=g_radio, capacity=g_cap, mask=mask))
    if groups and sum(g.count for g in groups) != nodes:
        errors.append(f"$.groups: group counts must sum to $.nodes ({nodes})")

    # Cross-field compatibility.
    if regime == "federated":
        if policy.kind != POLICY_AVERAGE:
            errors.append(f"$.regime: 'federated' requires $.policy.kind == 'average', "
                          f"got {policy.kind!r}")
        if federated.server_node >= (nodes or 1):
            errors.append(f"$.federated.server_node: must be < $.nodes ({nodes})")
    if regime == "gossip" and mobility.model != MOBILITY_STATIC:
        errors.append("$.regime: 'gossip' requires a static topology "
                      f"($.mobility.model == '{MOBILITY_STATIC}')")
    if policy.kind == "trunk" and model.mode != "one-hidden-layer":
        errors.append("$.policy.kind: 'trunk' requires $.model.mode == 'one-hidden-layer'")

    root.finish()
    if errors:
        return None, errors, warnings

    cfg = ScenarioConfig(
        name=name, seed=seed, nodes=nodes, ticks=ticks, regime=regime,
        local_steps_per_tick=local_steps, model=model, data=data, radio=radio,
        capacity=capacity, step_cost=step_cost, mobility=mobility, policy=policy,
        exchange=exchange, cluster=cluster, trust=trust, context=context,
        federated=federated, replay=replay, eval=eval_cfg, dropout=dropout,
        adversaries=adversaries, groups=groups, warnings=warnings,
    )
    return cfg, [], warnings


def load_config(source, strict: bool = True) -> ScenarioConfig:
    """Load and validate a config from a path or a dict; raises on any error."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        raw = source
    cfg, errors, _ = validate_config(raw, strict=strict)
    if errors:
        raise ConfigurationError("invalid config:\n" + "\n".join(errors))
    return cfg


def build_stream_spec(cfg: ScenarioConfig) -> datagen.DataStreamSpec:
    """Materialise the data stream spec (priors, prototypes, masks) for a run."""
    d = cfg.data
    if d.priors is not None:
        priors = np.asarray(d.priors, dtype=float)
    elif d.alpha is not None:
        priors = datagen.dirichlet_partition(d.alpha, cfg.nodes, d.classes, cfg.seed)
    else:
        priors = np.full((cfg.nodes, d.classes), 1.0 / d.classes)
    if d.prototype_distance is not None:
        distance = d.prototype_distance
    elif d.bayes_target is not None:
        distance = datagen.distance_for_bayes(d.classes, d.sigma, d.bayes_target)
    else:
        distance = 4.0 * d.sigma if d.sigma > 0 else 4.0
    prototypes = datagen.simplex_prototypes(d.classes, d.features, distance)
    masks = None
    if any(g.mask is not None for g in cfg.groups):
        masks = np.ones((cfg.nodes, d.features))
        start = 0
        for g in cfg.groups:
            if g.mask is not None:
                row = np.zeros(d.features)
                row[list(g.mask)] = 1.0
                masks[start:start + g.count] = row
            start += g.count
    spec = datagen.DataStreamSpec(
        class_count=d.classes, feature_dim=d.features, prototypes=prototypes,
        sigma=d.sigma, priors=priors, drift=[e for e in d.drift], seed=cfg.seed,
        masks=masks,
    )
    spec.validate()
    return spec


def node_radio(cfg: ScenarioConfig, node_id: int) -> RadioProfile:
    start = 0
    for g in cfg.groups:
        if start <= node_id < start + g.count and g.radio is not None:
            return g.radio
        start += g.count
    return cfg.radio


def node_capacity(cfg: ScenarioConfig, node_id: int) -> CapacityProfile:
    start = 0
    for g in cfg.groups:
        if start <= node_id < start + g.count and g.capacity is not None:
            return g.capacity
        start += g.count
    return cfg.capacity
