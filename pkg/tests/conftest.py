import pathlib

import pytest

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


def read_data(name):
    return (DATA / name).read_text()


# ------------------------------------------------------ acceptance reporting

class _Criterion:
    def __init__(self, number, title, log):
        self.number, self.title, self.log = number, title, log
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {verdict}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        if exc_type is not None:
            line += f" [{exc_type.__name__}: {' '.join(str(exc).split())[:120]}]"
        self.log.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion(request):
    log = request.config.__dict__.setdefault("_acceptance_lines", [])
    return lambda number, title: _Criterion(number, title, log)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
