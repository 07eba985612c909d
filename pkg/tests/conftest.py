import os
import subprocess
import sys

import pytest

from helpers import ACCEPTANCE

RUN_ARGS = ["run", "--preset", "shear/zero", "--steps", "1", "--n", "32", "--seed", "0"]


def run_cli(args, cwd=None):
    env = {k: v for k, v in os.environ.items() if not k.startswith("CIFORGE_")}
    return subprocess.run([sys.executable, "-m", "ciforge", *args], capture_output=True, text=True, cwd=cwd, env=env)


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """Two independent processes running the same shear/zero configuration."""
    out = []
    for k in range(2):
        d = tmp_path_factory.mktemp(f"run{k}")
        proc = run_cli(RUN_ARGS + ["--out", str(d / "out")])
        out.append((d / "out", proc))
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def pytest_collection_modifyitems(items):
    # The CLI runs spawn large subprocesses; run them before the in-process desk step is cached.
    items.sort(key=lambda item: "cli_runs" not in getattr(item, "fixturenames", ()))
