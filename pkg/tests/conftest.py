import math

import numpy as np
import pytest

from alphagfn.envs import BitSeqSpec, SetGenSpec, build_bitseq, build_setgen
from alphagfn.graph import DagGraph


@pytest.fixture(scope="session")
def tiny_setgen():
    """vocab 3, capacity 2, energies (0, ln 2, ln 4)."""
    return build_setgen(SetGenSpec(vocab_size=3, set_capacity=2,
                                   element_energies=(0.0, math.log(2), math.log(4))), seed=0)


@pytest.fixture(scope="session")
def mini_setgen():
    return build_setgen(SetGenSpec(), seed=0)


@pytest.fixture(scope="session")
def small_setgen():
    return build_setgen(SetGenSpec(vocab_size=5, set_capacity=3), seed=1)


@pytest.fixture(scope="session")
def tiny_bitseq():
    return build_bitseq(BitSeqSpec(total_bits=4, word_bits=2, modes=(0b0000, 0b1111)), seed=0)


@pytest.fixture
def diamond():
    # source 0 -> {1, 2} -> 3 -> sink 4
    return DagGraph.from_edges([(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)], source=0, sink=4)


def random_policy(g, rng, floor=0.05):
    """Strictly positive per-edge forward policy, normalised per state."""
    pf = rng.random(g.num_edges) + floor
    sizes = np.diff(g.child_ptr)
    starts = g.child_ptr[:-1][sizes > 0]
    pf /= np.repeat(np.add.reduceat(pf, starts), sizes[sizes > 0])
    return pf


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record a criterion outcome, echo it immediately and again in the summary."""
    def record(name, passed, detail, elapsed):
        line = f"{'PASS' if passed else 'FAIL'}  {name:<28} {elapsed:7.2f}s  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
