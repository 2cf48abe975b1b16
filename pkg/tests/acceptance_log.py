"""Collects one verdict line per acceptance criterion for the run summary."""

RESULTS: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line
