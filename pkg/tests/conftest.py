"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

from pathlib import Path

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}
SUMMARY_FILE = Path(__file__).resolve().parent.parent / "acceptance_summary.txt"


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, "PASS" if passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    lines = [f"criterion {n:2d} {status}  {title}: {detail}"
             for n, (title, status, detail) in sorted(ACCEPTANCE.items())]
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    SUMMARY_FILE.write_text("\n".join(lines) + "\n")
