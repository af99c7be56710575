import os


def worker_count(requested: int | None = None) -> int:
    """Worker threads to use: explicit request, else ``SPLATC_THREADS`` (0 or unset = auto)."""
    if requested is None:
        raw = os.environ.get("SPLATC_THREADS", "0").strip() or "0"
        try:
            requested = int(raw)
        except ValueError:
            raise ValueError(f"SPLATC_THREADS must be an integer, got {raw!r}") from None
    if requested < 0:
        raise ValueError("thread count must be >= 0")
    if requested == 0:
        return os.cpu_count() or 1
    return requested
