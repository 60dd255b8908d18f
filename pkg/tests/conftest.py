import numpy as np
import pytest
import torch

from semipaired.synthdata import SceneSpec, generate_corpus, split_dataset, write_dataset, write_split


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return SceneSpec(image_size=16, num_classes=4)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_corpus(12, seed=3, spec=small_spec)


def one_hot_batch(idx: np.ndarray, C: int, dtype=torch.float64) -> torch.Tensor:
    """(B, H, W) integer array -> (B, C, H, W) one-hot tensor."""
    return torch.nn.functional.one_hot(torch.as_tensor(idx), C).permute(0, 3, 1, 2).to(dtype)


TINY_TRAIN = dict(batch_size=2, noise_dim=8, g_channels=8, d_channels=4, checkpoint_interval=1000)


@pytest.fixture(scope="session")
def tiny_split(tmp_path_factory, small_spec):
    """12-scene corpus split into N^p = 4 paired and N^up = 8 unpaired samples."""
    root = tmp_path_factory.mktemp("tiny")
    samples = generate_corpus(12, seed=5, spec=small_spec)
    write_dataset(samples, small_spec, 5, root / "data")
    write_split(split_dataset(samples, 1 / 3, seed=0), root / "data", 0, root / "split")
    return root / "split"


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
