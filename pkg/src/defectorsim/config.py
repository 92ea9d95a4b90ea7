"""Flat ``key = value`` configuration files."""
from typing import Dict

from .errors import ConfigurationError

# dotted keys whose last component alone would be ambiguous
ALIASES = {
    "popularity.label": "popularity",
    "popularity.n_sites": "popularity_sites",
    "ttl.mode": "ttl_mode",
    "ttl.min": "ttl_min",
    "ttl.max": "ttl_max",
    "window.length": "window",
}


def normalize_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return ALIASES.get(key, key.rsplit(".", 1)[-1])


def parse_config(path) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment.

    Keys may carry a section prefix (``attacker.pct``); apart from a few
    aliases only the last dotted component names the setting. Dashes and
    underscores are interchangeable.
    """
    out: Dict[str, str] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = normalize_key(key)
            if not sep or not key:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            if key in out:
                raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def format_config(values: Dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(values.items()))
