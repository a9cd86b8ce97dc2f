import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest  # noqa: E402

from sparsevid.grpo import GrpoConfig, train_toy  # noqa: E402
from sparsevid.reward import RewardWeights  # noqa: E402

DEFAULT_WEIGHTS = RewardWeights(lambda1=1.0, lambda2=1.0, lambda3=0.5, beta=1.0, t_stop=2)


@pytest.fixture(scope="session")
def trained_default():
    """Seed-0 training run with the default reward weights (shared across modules)."""
    return train_toy(config=GrpoConfig(), weights=DEFAULT_WEIGHTS, seed=0)


@pytest.fixture(scope="session")
def trained_without_stop_reward():
    from dataclasses import replace
    return train_toy(config=GrpoConfig(), weights=replace(DEFAULT_WEIGHTS, lambda3=0.0), seed=0)
