import pytest

from multisgraph.scenario import AgentSpec, Scenario, run_agents


def small_scenario(**kw):
    """Three rooms, two agents that meet in the middle room."""
    return Scenario(
        "small",
        {"generate": {"n_rooms": 3, "seed": 2, "clutter": 3}},
        [AgentSpec(1, [0, 1], start_yaw=0.3), AgentSpec(2, [2, 1], start_yaw=-1.1)],
        seed=0,
        **kw,
    )


@pytest.fixture(scope="session")
def small_run():
    return run_agents(small_scenario())


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Remember a criterion outcome for the end-of-run summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
