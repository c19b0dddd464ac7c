import pytest

from pivotlab.env import ExplicitTree, build_planted_tree, load_fixture


@pytest.fixture
def appendix():
    return load_fixture("appendix-a")


@pytest.fixture
def binary1():
    """Depth-1 binary tree, both leaves correct."""
    return build_planted_tree(1, 2, 1.0, 0)


@pytest.fixture
def binary2_one_correct():
    """Depth-2 binary tree whose only correct leaf is the first."""
    return ExplicitTree([[1, 2], [3, 4], [5, 6], [], [], [], []], correct=[3])


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(n, passed, detail)``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n: int, passed: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(lines[n])
        return passed

    return record


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
