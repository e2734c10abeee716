"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS: dict = {}


def record(key: str, passed: bool, detail: str) -> None:
    RESULTS[key] = (bool(passed), detail)
    print(f"criterion {key}: {'PASS' if passed else 'FAIL'} ({detail})")
