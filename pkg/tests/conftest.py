import numpy as np
import pytest
import torch

from avanim.embedder import EmbedderTrainConfig, train_embedder
from avanim.synth import synth_corpus
from avanim.syncnet import SyncTrainConfig, train_sync

torch.set_num_threads(1)

# acceptance tests record one line per criterion; printed in the summary
ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion():
    return record_criterion


@pytest.fixture(scope="session")
def train_root(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def train_corpus(train_root):
    """Synchronized-only corpus all models train on."""
    return synth_corpus(40, 101, train_root / "train")


@pytest.fixture(scope="session")
def test_corpus(train_root):
    """Held-out synchronized corpus for accuracy / generation metrics."""
    return synth_corpus(10, 202, train_root / "test")


@pytest.fixture(scope="session")
def syncnet_trained(train_corpus, train_root):
    path = train_root / "syncnet.pt"
    model, curve = train_sync(train_corpus, SyncTrainConfig(steps=2500, seed=7), out=path)
    model._curve = curve
    model._path = path
    return model


@pytest.fixture(scope="session")
def embedder_trained(train_corpus, train_root):
    path = train_root / "embedder.pt"
    model, curve = train_embedder(train_corpus, EmbedderTrainConfig(steps=400, seed=7), out=path)
    model._curve = curve
    model._path = path
    return model


@pytest.fixture(scope="session")
def avsyncd(train_corpus, embedder_trained, train_root):
    from avanim.diffusion import VideoTrainConfig, train_video

    path = train_root / "avsyncd.pt"
    cfg = VideoTrainConfig(steps=2400, backbone_steps=4000, seed=7)
    model, curve = train_video(train_corpus, embedder_trained, cfg, out=path,
                               embedder_path=embedder_trained._path)
    model._curve = curve
    model._path = path
    return model


@pytest.fixture(scope="session")
def i2vd(train_corpus, embedder_trained, train_root):
    from avanim.diffusion import VideoTrainConfig, train_video

    path = train_root / "i2vd.pt"
    cfg = VideoTrainConfig(steps=60, backbone_steps=300, seed=7, use_audio=False)
    model, _ = train_video(train_corpus, embedder_trained, cfg, out=path,
                           embedder_path=embedder_trained._path)
    model._path = path
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
