import numpy as np

from nodelearn.context import ContextVector, gate, update_context


def test_no_observations_decays_toward_baselines():
    c = ContextVector(energy_fraction=0.8, connectivity_quality=0.9, salience=3.0,
                      loss_baseline=1.0)
    out = update_context(c, energy_fraction=0.8)
    assert out.energy_fraction == 0.8
    assert out.salience < c.salience            # toward 1
    assert out.connectivity_quality < c.connectivity_quality  # toward 0.5
    again = update_context(out, energy_fraction=0.8)
    assert abs(again.salience - 1.0) < abs(out.salience - 1.0)


def test_loss_spike_raises_salience():
    c = ContextVector(salience=1.0, loss_baseline=0.5)
    out = update_context(c, energy_fraction=1.0, last_loss=5.0)  # 10x baseline
    assert out.salience > c.salience


def test_energy_clamped():
    c = ContextVector()
    out = update_context(c, energy_fraction=-1.0)
    assert out.energy_fraction == 0.0
    out = update_context(c, energy_fraction=2.0)
    assert out.energy_fraction == 1.0


def test_contact_outcomes_move_connectivity():
    c = ContextVector(connectivity_quality=0.5)
    up = update_context(c, energy_fraction=1.0, contact_attempts=4, contact_successes=4)
    down = update_context(c, energy_fraction=1.0, contact_attempts=4, contact_successes=0)
    assert up.connectivity_quality > 0.5 > down.connectivity_quality


def test_update_deterministic():
    c = ContextVector()
    a = update_context(c, energy_fraction=0.7, contact_attempts=2, contact_successes=1,
                       last_loss=0.9)
    b = update_context(c, energy_fraction=0.7, contact_attempts=2, contact_successes=1,
                       last_loss=0.9)
    assert a == b


def test_gate_zero_energy():
    assert gate(ContextVector(energy_fraction=0.0, salience=5.0)) == 0.0


def test_gate_saturates():
    assert gate(ContextVector(energy_fraction=1.0, salience=1.0)) == 1.0
    assert gate(ContextVector(energy_fraction=1.0, salience=7.3)) == 1.0


def test_gate_product_form():
    assert abs(gate(ContextVector(energy_fraction=0.5, salience=0.6)) - 0.3) < 1e-15


def test_gate_bounds_and_monotonicity():
    gen = np.random.default_rng(3)
    for _ in range(200):
        e, s = gen.uniform(0, 1), gen.uniform(0, 3)
        g = gate(ContextVector(energy_fraction=e, salience=s))
        assert 0.0 <= g <= 1.0
        # monotone nondecreasing in each input (below saturation for salience)
        assert gate(ContextVector(energy_fraction=min(1.0, e + 0.1), salience=s)) >= g
        assert gate(ContextVector(energy_fraction=e, salience=s + 0.1)) >= g
    assert gate(ContextVector(energy_fraction=1.0, salience=0.0)) == 0.0
