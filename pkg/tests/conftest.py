import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


def record(name: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def cache_dir(tmp_path_factory) -> Path:
    """Trained toy models go here; set SMALLFACE_CACHE to reuse them across sessions."""
    env = os.environ.get("SMALLFACE_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("toy_models")
