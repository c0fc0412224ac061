"""Collects one PASS/FAIL line per acceptance criterion."""
LINES = []


def report(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" -- {detail}"
    LINES.append(line)
    print(line)
    return passed
