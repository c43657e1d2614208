import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def stage1_checkpoint(tmp_path_factory):
    from umt.pipeline.config import build_config
    from umt.pipeline.train import Trainer

    path = tmp_path_factory.mktemp("stage1") / "stage1.umtk"
    trainer = Trainer(build_config("desk-tiny", overrides={"optim.total_steps": 10, "optim.warmup_steps": 2}))
    trainer.fit(10)
    trainer.save(path)
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
