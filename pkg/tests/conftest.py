"""Shared helpers: a tiny architecture and small separable subject datasets."""

import numpy as np
import pytest

from metadapt.episodes import SubjectDataset, stratified_split
from metadapt.network import ArchConfig

# one line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

TINY = ArchConfig(channels=4, samples=32, n_classes=4, f1=2, d=2, f2=4,
                  k_t=8, k_s=4, hidden=8, dropout=0.25)


def make_tiny_subject(sid, n=48, seed=0, signal=2.0, arch=TINY):
    """Trials where class c raises channel (c mod C); separable, same for
    every subject."""
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % arch.n_classes).astype(np.int64)
    x = rng.normal(scale=0.5, size=(n, 1, arch.channels, arch.samples))
    for i, c in enumerate(labels):
        x[i, 0, c % arch.channels, :] += signal
    train_idx, eval_idx = stratified_split(labels, 0.25, rng)
    return SubjectDataset(sid, x, labels, arch.n_classes, train_idx, eval_idx)


@pytest.fixture
def tiny_sources():
    return [make_tiny_subject(f"s{i:02d}", seed=100 + i) for i in range(5)]
