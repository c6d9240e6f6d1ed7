import numpy as np
import pytest

from nodelearn.context import ContextVector
from nodelearn.model import TrainingConfig, init_params
from nodelearn.network import RadioProfile
from nodelearn.node import NodeState, ReplayBuffer
from nodelearn.resources import CapacityProfile


def make_node(node_id=0, feature_dim=4, class_count=3, seed=0, mode="linear-softmax",
              battery=50.0, step_cost=0.001, replay_capacity=32, gating="context",
              hidden_dim=8):
    cfg = TrainingConfig(mode=mode, hidden_dim=hidden_dim)
    params = init_params(seed, cfg, feature_dim, class_count)
    cap = CapacityProfile(battery_joules=battery)
    return NodeState(
        node_id=node_id, params=params, context=ContextVector(), capacity=cap,
        radio=RadioProfile(), energy_j=battery, step_cost_j=step_cost,
        replay=ReplayBuffer(replay_capacity, 8 * feature_dim + 8), gating=gating)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
