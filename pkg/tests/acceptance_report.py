"""Collects one pass/fail line per acceptance criterion."""

LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES[number] = line
    print(line)
    return passed
