"""Per-node context vector and the gate that modulates learning.

The gate is the product of the energy fraction and the salience signal capped
at 1, so learning halts exactly when the battery is empty or nothing salient
is happening, and runs at full rate on a charged node whose recent loss is at
or above its running baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

DEFAULT_DECAY = 0.9
# Slower decay for the loss baseline so salience reacts to spikes, not trends.
BASELINE_DECAY = 0.99


@dataclass
class ContextVector:
    energy_fraction: float = 1.0        # in [0, 1]
    connectivity_quality: float = 0.5   # EWMA of recent contact success, neutral prior
    salience: float = 1.0               # EWMA of loss relative to running baseline
    mobility_speed: float = 0.0
    modality_mask_id: int = 0
    loss_baseline: Optional[float] = None  # running reference for salience


def update_context(
    c: ContextVector,
    *,
    energy_fraction: float,
    contact_attempts: int = 0,
    contact_successes: int = 0,
    last_loss: Optional[float] = None,
    mobility_speed: Optional[float] = None,
    decay: float = DEFAULT_DECAY,
) -> ContextVector:
    """New context after one tick of observations.

    With no observations the EWMAs decay toward their neutral baselines
    (salience toward 1, connectivity toward its 0.5 prior); the energy
    fraction is always refreshed from the store and clamped to [0, 1].
    """
    energy = min(1.0, max(0.0, energy_fraction))

    if contact_attempts > 0:
        conn_obs = contact_successes / contact_attempts
    else:
        conn_obs = 0.5
    connectivity = decay * c.connectivity_quality + (1.0 - decay) * conn_obs
    connectivity = min(1.0, max(0.0, connectivity))

    baseline = c.loss_baseline
    if last_loss is None:
        ratio = 1.0
    else:
        if baseline is None:
            baseline = last_loss
        ratio = last_loss / max(baseline, 1e-12)
        baseline = BASELINE_DECAY * baseline + (1.0 - BASELINE_DECAY) * last_loss
    salience = decay * c.salience + (1.0 - decay) * ratio
    salience = max(0.0, salience)

    return replace(
        c,
        energy_fraction=energy,
        connectivity_quality=connectivity,
        salience=salience,
        mobility_speed=c.mobility_speed if mobility_speed is None else mobility_speed,
        loss_baseline=baseline,
    )


def gate(c: ContextVector) -> float:
    """Learning gate in [0, 1]: energy fraction times salience capped at 1."""
    return c.energy_fraction * min(1.0, c.salience)
