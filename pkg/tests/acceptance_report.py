"""Collects one verdict line per acceptance criterion for the terminal summary."""

_RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    _RESULTS[n] = (bool(ok), detail)
    return bool(ok)


def lines() -> list[str]:
    return [f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {d}" for n, (ok, d) in sorted(_RESULTS.items())]
