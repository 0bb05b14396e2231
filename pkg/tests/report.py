"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES = []


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    LINES.append(line)
    return line
