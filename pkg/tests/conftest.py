import pytest
import torch
from hypothesis import settings

from conceptfuse.data import FACE_BOX
from conceptfuse.plugins import ToyFaceEmbedder
from conceptfuse.toy import ToyBackend
from conceptfuse.trainer import TrainConfig, Trainer

from .helpers import TOY_TRAIN, toy_concepts

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# Bit-exact comparisons across runs assume a fixed intra-op thread count.
torch.set_num_threads(1)


@pytest.fixture
def backend():
    return ToyBackend()


@pytest.fixture
def concepts():
    return toy_concepts()


@pytest.fixture
def embedder():
    return ToyFaceEmbedder(FACE_BOX)


def run_toy(config=None, trace=None):
    backend = ToyBackend()
    trainer = Trainer(config or TrainConfig(**TOY_TRAIN), toy_concepts(), backend,
                      embedder=ToyFaceEmbedder(FACE_BOX), trace=trace)
    ck1 = trainer.run_phase1()
    ck2 = trainer.run_phase2()
    return {"trainer": trainer, "backend": backend, "ck1": ck1, "ck2": ck2}


@pytest.fixture(scope="session")
def trained_run():
    """One calibrated toy run shared by the slow end-to-end tests."""
    return run_toy()


@pytest.fixture(scope="session")
def cli_projects(tmp_path_factory):
    """Two identical toy projects: one trained with --phase all, one phase by phase."""
    from conceptfuse.cli import main

    root = tmp_path_factory.mktemp("cli")
    whole, split = root / "whole", root / "split"
    codes = [main(["init-toy", str(whole)]), main(["init-toy", str(split)])]
    codes.append(main(["train", "--config", str(whole), "--phase", "all"]))
    codes.append(main(["train", "--config", str(split), "--phase", "1"]))
    codes.append(main(["train", "--config", str(split), "--phase", "2", "--resume"]))
    return {"whole": whole, "split": split, "codes": codes}


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
