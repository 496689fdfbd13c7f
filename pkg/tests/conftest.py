import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def verdict(request, capsys):
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}"
        request.config._acceptance.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance:
        terminalreporter.section("acceptance")
        for line in config._acceptance:
            terminalreporter.write_line(line)
