import textwrap

import pytest

TINY_CONFIG = textwrap.dedent("""\
    name: tiny
    problem: {kind: quadratic}
    dataset: {instances: 8}
    algorithms: [sms_dkl, gp, random]
    seeds: [0, 1]
    budget: {n_init: 3, n_iters: 5, checkpoints: [3, 5]}
    sms_dkl: {m_train: 5, candidate_pool: 64, hidden: 3, set_width: 4, head_width: 4, feature_dim: 4}
    gp: {restarts: 2, maxiter: 50, candidate_pool: 64}
    """)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory):
    from smsdkl.bench.runner import run_experiment

    root = tmp_path_factory.mktemp("bundle")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_CONFIG)
    out = root / "out"
    manifest = run_experiment(cfg, out)
    return out, manifest


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
