"""Collects one verdict line per acceptance criterion for the session summary."""

LINES = {}


def verdict(n, ok, detail=""):
    line = "criterion %2d: %s  %s" % (n, "PASS" if ok else "FAIL", detail)
    LINES[n] = line
    print(line)
    return ok
