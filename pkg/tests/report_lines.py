"""Collects one summary line per acceptance criterion for the terminal report."""

LINES: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(LINES[n])
    return ok
