"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

ACCEPTANCE_LINES = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
