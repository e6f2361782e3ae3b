import os

import pytest
from hypothesis import HealthCheck, settings

from afmrl.corpus import UniverseConfig
from afmrl.gradcache import TrainConfig
from afmrl.rar import GrpoConfig, RewardConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_stack():
    """A trained encoder and SFT policy on a 360-product universe."""
    from afmrl.pipeline import Experiment, ExperimentConfig

    cfg = ExperimentConfig(
        universe=UniverseConfig(n_categories=3, families_per_category=3, groups_per_family=4, products_per_group=10),
        train=TrainConfig(steps=100),
        reward=RewardConfig(k=12, pool_size=48),
        grpo=GrpoConfig(steps=40),
    ).with_seed(2)
    ex = Experiment(cfg)
    enc, _ = ex.train_encoder("agcl", probe=False)
    sft, _ = ex.train_sft()
    return ex, enc, sft


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, title, passed, detail)."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, title, passed, detail=""):
        lines[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        print(lines[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
