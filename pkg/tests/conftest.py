import os
import sys

import hypothesis
import pytest

sys.path.insert(0, os.path.dirname(__file__))

hypothesis.settings.register_profile(
    "kwslab", deadline=None, max_examples=50, derandomize=True
)
hypothesis.settings.load_profile("kwslab")

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

# smallest stream that still exercises pretrain + two incremental tasks
MICRO_FLAT = {
    "stream.pretrain_keywords": 3,
    "stream.tasks": 2,
    "stream.keywords_per_task": 2,
    "synth.keywords": 7,
    "synth.clips": 6,
    "sgd.pretrain_epochs": 2,
    "sgd.epochs": 2,
    "sgd.batch_size": 8,
    "ewc.lambda": 5.0,
}


def micro_config(**overrides):
    from kwslab.config import config_from_mapping

    flat = dict(MICRO_FLAT)
    flat.update(overrides)
    return config_from_mapping(flat)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """Run (and cache) one micro training run per distinct config."""
    from kwslab import trainer

    cache = {}

    def get(strategy, **overrides):
        key = (strategy, tuple(sorted(overrides.items())))
        if key not in cache:
            out = tmp_path_factory.mktemp(f"micro_{strategy}")
            cfg = micro_config(strategy=strategy, out_dir=str(out), **overrides)
            cache[key] = (trainer.run(cfg), str(out))
        return cache[key]

    return get
