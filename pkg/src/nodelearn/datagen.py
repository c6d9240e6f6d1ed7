"""Synthetic non-IID, non-stationary per-node data streams plus CSV ingestion.

Each node draws labels from its own prior (Dirichlet-skewed across nodes) and
features from a Gaussian around the label's class prototype. Prototypes sit at
the vertices of a regular simplex so the Bayes-optimal accuracy of the task is
computable in closed form, which the acceptance tests rely on. Drift is a
scheduled, piecewise-constant change to the stream spec: prototype rotation in
the plane of the first two feature dimensions, swapping two classes' prior
mass, or scaling the feature noise.

Batches are pure functions of (spec, node id, tick, size): the generator is
derived from those values, so the same request always yields the same batch.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, IngestionError
from .model import Batch

DRIFT_ROTATION = "prototype-rotation"
DRIFT_PRIOR_SHIFT = "prior-shift"
DRIFT_COVARIATE_SCALE = "covariate-scale"
DRIFT_KINDS = (DRIFT_ROTATION, DRIFT_PRIOR_SHIFT, DRIFT_COVARIATE_SCALE)


@dataclass
class DriftEvent:
    tick: int
    kind: str
    magnitude: float = 0.0
    classes: tuple[int, int] = (0, 1)  # used by prior-shift

    def validate(self, class_count: int) -> None:
        if self.kind not in DRIFT_KINDS:
            raise ConfigurationError(f"unknown drift kind {self.kind!r}")
        if self.kind == DRIFT_PRIOR_SHIFT:
            a, b = self.classes
            if not (0 <= a < class_count and 0 <= b < class_count):
                raise ConfigurationError(f"prior-shift classes {self.classes} out of range")


@dataclass
class Sample:
    x: np.ndarray
    y: int


@dataclass
class DataStreamSpec:
    class_count: int
    feature_dim: int
    prototypes: np.ndarray            # (k, d) class mean vectors
    sigma: float                      # shared Gaussian scale
    priors: np.ndarray                # (nodes, k) per-node label priors
    drift: list[DriftEvent] = field(default_factory=list)
    seed: int = 0
    masks: Optional[np.ndarray] = None  # (nodes, d) 0/1 modality masks

    def validate(self) -> None:
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.prototypes.shape != (self.class_count, self.feature_dim):
            raise ConfigurationError("prototypes shape inconsistent with class/feature counts")
        sums = self.priors.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ConfigurationError("each node prior must sum to 1 within 1e-9")
        ticks = [e.tick for e in self.drift]
        if sorted(ticks) != ticks or len(set(ticks)) != len(ticks):
            raise ConfigurationError("drift times must be strictly increasing")
        for e in self.drift:
            e.validate(self.class_count)

    def copy(self) -> "DataStreamSpec":
        return replace(
            self,
            prototypes=self.prototypes.copy(),
            priors=self.priors.copy(),
            drift=[replace(e) for e in self.drift],
            masks=None if self.masks is None else self.masks.copy(),
        )


def dirichlet_partition(alpha: float, node_count: int, class_count: int, seed: int) -> np.ndarray:
    """(node_count, class_count) label priors drawn Dirichlet(alpha * 1)."""
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be > 0, got {alpha}")
    gen = rngmod.stream(seed, "data", 0, 0)
    priors = gen.dirichlet(np.full(class_count, alpha), size=node_count)
    return priors / priors.sum(axis=1, keepdims=True)


def simplex_prototypes(class_count: int, feature_dim: int, distance: float) -> np.ndarray:
    """Class means on a regular simplex with the given pairwise distance.

    Uses scaled coordinate axes (requires feature_dim >= class_count), so all
    pairs of prototypes are exactly `distance` apart.
    """
    if feature_dim < class_count:
        raise ConfigurationError("simplex prototypes need feature_dim >= class_count")
    protos = np.zeros((class_count, feature_dim))
    scale = distance / math.sqrt(2.0)
    for c in range(class_count):
        protos[c, c] = scale
    return protos


def bayes_accuracy(class_count: int, distance: float, sigma: float, grid: int = 20001) -> float:
    """Bayes-optimal accuracy for equal priors and simplex prototypes.

    With mutually equidistant class means and spherical noise, the pairwise
    discriminants are equicorrelated (correlation 1/2), which reduces the
    probability of a correct decision to a one-dimensional integral:
    E_u[ Phi(a - u)^(k-1) ] with a = distance / (sigma * sqrt(2)).
    """
    if sigma == 0:
        return 1.0
    a = distance / (sigma * math.sqrt(2.0))
    u = np.linspace(-10.0, 10.0, grid)
    phi = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    z = (a - u) / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + np.array([math.erf(v) for v in z]))
    integrand = phi * cdf ** (class_count - 1)
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(integrand, u))


def distance_for_bayes(class_count: int, sigma: float, target: float) -> float:
    """Prototype spacing that yields the target Bayes accuracy (bisection)."""
    lo, hi = 1e-6, 50.0 * sigma + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bayes_accuracy(class_count, mid, sigma, grid=4001) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_batch(spec: DataStreamSpec, node_id: int, tick: int, n: int,
                 gen: Optional[np.random.Generator] = None) -> Batch:
    """Batch of n samples from the node's stream at this tick.

    Labels follow the node's current prior; features are Gaussian around the
    label's prototype, then filtered through the node's modality mask.
    """
    if n < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {n}")
    if gen is None:
        gen = rngmod.stream(spec.seed, "data", node_id + 1, tick)
    prior = spec.priors[node_id]
    labels = gen.choice(spec.class_count, size=n, p=prior)
    noise = gen.standard_normal((n, spec.feature_dim)) * spec.sigma
    x = spec.prototypes[labels] + noise
    if spec.masks is not None:
        x = x * spec.masks[node_id]
    return Batch(x=x, y=labels)


def sample_test_batch(spec: DataStreamSpec, n: int, seed_key: tuple[int, ...],
                      subsystem: str = "test") -> Batch:
    """Balanced (uniform-prior, unmasked) batch for evaluation; node-independent."""
    gen = rngmod.stream(spec.seed, subsystem, *seed_key)
    labels = gen.choice(spec.class_count, size=n,
                        p=np.full(spec.class_count, 1.0 / spec.class_count))
    x = spec.prototypes[labels] + gen.standard_normal((n, spec.feature_dim)) * spec.sigma
    return Batch(x=x, y=labels)


def _rotate_plane(protos: np.ndarray, angle: float) -> np.ndarray:
    out = protos.copy()
    c, s = math.cos(angle), math.sin(angle)
    x0, x1 = protos[:, 0].copy(), protos[:, 1].copy()
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    return out


def inject_drift(spec: DataStreamSpec, tick: int) -> DataStreamSpec:
    """Spec with every drift event scheduled at `tick` applied and consumed."""
    due = [e for e in spec.drift if e.tick == tick]
    if not due:
        return spec
    out = spec.copy()
    out.drift = [replace(e) for e in spec.drift if e.tick != tick]
    for event in due:
        if event.kind == DRIFT_ROTATION:
            if out.feature_dim < 2:
                raise ConfigurationError("prototype rotation needs feature_dim >= 2")
            out.prototypes = _rotate_plane(out.prototypes, event.magnitude)
        elif event.kind == DRIFT_PRIOR_SHIFT:
            a, b = event.classes
            out.priors[:, [a, b]] = out.priors[:, [b, a]]
        elif event.kind == DRIFT_COVARIATE_SCALE:
            out.sigma = out.sigma * event.magnitude
        else:
            raise ConfigurationError(f"unknown drift kind {event.kind!r}")
    return out


def load_csv_dataset(path, feature_columns: Sequence[str], label_column: str):
    """Load a pre-featurized dataset from CSV.

    Returns (samples, feature_dim, class_count). Row order is preserved and
    labels are re-indexed densely from 0: integer labels in numeric order (so
    exports round-trip exactly), string labels in order of first appearance.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError("empty file: no header row")
        missing = [c for c in list(feature_columns) + [label_column]
                   if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"missing columns: {', '.join(missing)}")
        rows: list[tuple[np.ndarray, str]] = []
        for i, row in enumerate(reader, start=2):  # row 1 is the header
            try:
                x = np.array([float(row[c]) for c in feature_columns])
            except (TypeError, ValueError):
                raise IngestionError(f"non-numeric feature at row {i}") from None
            raw = row[label_column]
            if raw is None:
                raise IngestionError(f"missing label at row {i}")
            rows.append((x, raw))
    if not rows:
        raise IngestionError("no data rows")
    raw_labels = [raw for _, raw in rows]
    try:
        ordered = sorted(set(raw_labels), key=int)
    except ValueError:
        ordered = list(dict.fromkeys(raw_labels))
    label_ids = {raw: i for i, raw in enumerate(ordered)}
    samples = [Sample(x=x, y=label_ids[raw]) for x, raw in rows]
    return samples, len(feature_columns), len(label_ids)


def export_csv_dataset(samples: Sequence[Sample], path, feature_columns: Sequence[str],
                       label_column: str = "label") -> None:
    """Write samples to CSV with round-trip-exact float formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(feature_columns) + [label_column])
        for s in samples:
            writer.writerow([repr(float(v)) for v in s.x] + [int(s.y)])
