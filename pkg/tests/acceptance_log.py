"""Collects one PASS/FAIL line per acceptance check for the pytest summary."""

import time
from contextlib import contextmanager

LINES: list[str] = []


def record(label: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    LINES.append(line)
    print(line)
    return ok


@contextmanager
def timed():
    """Yields a one-element list that holds the elapsed seconds on exit."""
    box = [0.0]
    t0 = time.perf_counter()
    try:
        yield box
    finally:
        box[0] = time.perf_counter() - t0
