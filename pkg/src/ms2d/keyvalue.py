"""Reader/writer for the ``key = value`` text files used by headers and configs."""

from __future__ import annotations

from pathlib import Path


class KeyValueError(ValueError):
    pass


def parse_text(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KeyValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if not key:
            raise KeyValueError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), source=str(path))


def write_file(path, items: dict, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in items.items():
        lines.append(f"{key} = {format_value(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def as_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise KeyValueError(f"not a boolean: {text!r}")


def as_range(text: str) -> tuple[float, float]:
    """``lo:hi`` -> (lo, hi)."""
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise KeyValueError(f"not a range 'lo:hi': {text!r}") from None
