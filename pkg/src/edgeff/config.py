"""Plain-text key-value config files: ``key = value`` lines, ``#`` comments.

Dotted prefixes namespace the keys (``model.embed_dim``, ``train.total_steps``,
``potential.depth`` ...); :func:`split_prefixed` peels one namespace off.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv_text(fh.read())


def format_kv(kv: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in kv.items())


def write_kv_file(path, kv: dict) -> None:
    with open(path, "w") as fh:
        fh.write(format_kv(kv))


def split_prefixed(kv: dict[str, str], prefix: str) -> tuple[dict[str, str], dict[str, str]]:
    """Split into (keys under ``prefix.``, the rest); prefix is stripped."""
    mine, rest = {}, {}
    dot = prefix + "."
    for k, v in kv.items():
        if k.startswith(dot):
            mine[k[len(dot):]] = v
        else:
            rest[k] = v
    return mine, rest
