import numpy as np
import pytest
import torch

from ctxshift.lt_data import ClassProfile, LongTailDataset, assign_shot_groups
from ctxshift.sources import SourceMissingError, load_source

torch.set_num_threads(1)


def make_synthetic(counts, size=4, channels=1, seed=0, name="synthetic"):
    """Separable toy images: class k lights up a k-dependent pixel block."""
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(counts)]).astype(np.int64)
    images = rng.uniform(0, 0.2, size=(len(labels), size, size, channels)).astype(np.float32)
    for i, k in enumerate(labels):
        r, c = divmod(int(k), size // 2)
        images[i, 2 * r % size : 2 * r % size + 2, 2 * c : 2 * c + 2, :] = 1.0
    profile = ClassProfile.from_counts(counts)
    return LongTailDataset(images, labels, profile, assign_shot_groups(profile), seed, name)


@pytest.fixture
def tiny_lt():
    return make_synthetic([60, 30, 15, 8])


@pytest.fixture(scope="session")
def mnist_train():
    try:
        return load_source("mnist", "train")
    except SourceMissingError as exc:
        pytest.skip(str(exc))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line(capsys):
    def emit(criterion: str, passed: bool | None, detail: str):
        tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"[{tag}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
