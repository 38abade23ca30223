"""Collects one verdict line per acceptance criterion for the terminal summary."""
import sys

LINES = []


def verdict(number, title, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    LINES.append(line)
    print(line, file=sys.stderr)
    return ok
