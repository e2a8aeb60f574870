import numpy as np
import pytest

from weighted_normals import data, training

DESK_SEED = 0

# pass/fail lines written by test_acceptance, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


class DeskRun:
    """One full desk-preset pipeline (pre-training then fine-tuning), shared per session."""

    def __init__(self, seed: int = DESK_SEED):
        import time

        self.seed = seed
        self.entries = data.desk_dataset(seed=seed)
        self.clouds = [e.build() for e in self.entries]
        self.pre = training.TrainConfig.preset("pretrain", seed=seed)
        self.fine = training.TrainConfig.preset("finetune", seed=seed)
        self.hp = training.hyperparams_for(self.pre)
        self.dataset = training.PatchDataset(self.clouds, self.hp.patch_size)
        t0 = time.perf_counter()
        self.pretrained = training.pretrain(self.dataset, self.pre, self.hp, deterministic=True)
        self.model = training.finetune(self.dataset, self.pretrained, self.fine, self.hp, deterministic=True)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_run():
    return DeskRun()


@pytest.fixture
def tiny_clouds():
    return [data.generate(data.ShapeSpec(kind, 120, seed=i)) for i, kind in enumerate(("sphere", "cube", "plane"))]


def tiny_config(stage, **kw):
    base = dict(epochs=1, batch_size=4, patch_size=24, k_graph=6, patches_per_epoch=8)
    base.update(kw)
    return training.TrainConfig.preset(stage, **base)


def tiny_hp(config):
    return training.hyperparams_for(config, feature_dim=16, proj_dim=8, edge_widths=(8, 8),
                                    weight_widths=(8, 4), normal_widths=(8, 8), head_hidden=8,
                                    regressor_widths=(8, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
