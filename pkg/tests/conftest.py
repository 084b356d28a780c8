"""Shared pytest setup: persistent JAX compile cache and the acceptance summary."""

import os

import jax
import pytest

_CACHE = os.environ.get("FINSLAB_JAX_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "finslab-jax"))
jax.config.update("jax_compilation_cache_dir", _CACHE)
jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)


class AcceptanceLedger:
    """Collects per-criterion sub-results; a criterion passes if all its parts pass."""

    def __init__(self):
        self.parts = {}

    def record(self, number, title, passed, detail=""):
        entry = self.parts.setdefault(number, {"title": title, "results": []})
        entry["results"].append((bool(passed), detail))
        line = f"criterion {number:2d} [{title}] {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        return passed

    def lines(self):
        out = []
        for number in sorted(self.parts):
            entry = self.parts[number]
            ok = all(p for p, _ in entry["results"])
            detail = "; ".join(d for _, d in entry["results"])
            out.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'} [{entry['title']}] {detail}")
        return out


_LEDGER = AcceptanceLedger()


@pytest.fixture(scope="session")
def acceptance():
    return _LEDGER


def pytest_terminal_summary(terminalreporter):
    lines = _LEDGER.lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
