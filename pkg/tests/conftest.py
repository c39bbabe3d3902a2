import numpy as np
import pytest

from featgroup.grouping import Partition, partition_to_phi


def random_partition(rng, p, k=None):
    """Uniformly random labels with every cluster nonempty (no graph constraint)."""
    if k is None:
        k = int(rng.integers(1, p + 1))
    assign = np.concatenate([np.arange(k), rng.integers(0, k, size=p - k)])
    return Partition(k, rng.permutation(assign))


def dense_phi(part):
    """Independent construction of the grouping matrix from its definition."""
    d = np.zeros((part.k, part.p))
    for q, members in enumerate(part.clusters()):
        d[q, members] = 1.0 / np.sqrt(len(members))
    return d


@pytest.fixture
def split5_partitions():
    # five features split 3+2 and 2+3
    return (
        Partition.from_clusters([[0, 1, 2], [3, 4]]),
        Partition.from_clusters([[0, 1], [2, 3, 4]]),
    )


@pytest.fixture
def split5_phis(split5_partitions):
    return tuple(partition_to_phi(p) for p in split5_partitions)


def random_bank(rng, p, k, b):
    from featgroup.bank import ProjectionBank

    parts = [random_partition(rng, p, k) for _ in range(b)]
    return ProjectionBank(tuple(partition_to_phi(q) for q in parts), k=k, partitions=tuple(parts))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
