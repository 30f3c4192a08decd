"""Flat ``key = value`` configuration text."""

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def read_kv(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_kv(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dump_kv(kv: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in kv.items())
