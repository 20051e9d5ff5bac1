"""Key-value run configuration: file parsing, flag merging, validation.

Config files are UTF-8 ``key = value`` lines.  ``#`` starts a comment (whole
line or trailing), blank lines are ignored.  Unknown keys are rejected so a
typo cannot silently fall back to a default.  Command-line flags override file
values; the fully-resolved configuration is echoed alongside every artifact.
"""

from __future__ import annotations

import os
from typing import Any, Callable

from .errors import ConfigError

__all__ = [
    "KNOWN_KEYS",
    "parse_config_text",
    "load_config_file",
    "resolve",
    "render_config",
]


def _as_int(lo: int | None = None, hi: int | None = None) -> Callable[[str], int]:
    def conv(s: str) -> int:
        try:
            v = int(s, 10)
        except ValueError:
            raise ConfigError(f"expected an integer, got {s!r}") from None
        if lo is not None and v < lo:
            raise ConfigError(f"value {v} below minimum {lo}")
        if hi is not None and v > hi:
            raise ConfigError(f"value {v} above maximum {hi}")
        return v

    return conv


def _as_float(lo: float | None = None) -> Callable[[str], float]:
    def conv(s: str) -> float:
        try:
            v = float(s)
        except ValueError:
            raise ConfigError(f"expected a number, got {s!r}") from None
        if lo is not None and v < lo:
            raise ConfigError(f"value {v} below minimum {lo}")
        return v

    return conv


def _as_choice(*options: str) -> Callable[[str], str]:
    def conv(s: str) -> str:
        if s not in options:
            raise ConfigError(f"expected one of {', '.join(options)}; got {s!r}")
        return s

    return conv


def _as_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _as_opt_int(lo: int = 1) -> Callable[[str], int | None]:
    inner = _as_int(lo=lo)

    def conv(s: str) -> int | None:
        if s.lower() in ("none", ""):
            return None
        return inner(s)

    return conv


# Every key a config file or flag may set, with its converter/validator.
# Keys absent from the resolved mapping fall back to downstream defaults.
KNOWN_KEYS: dict[str, Callable[[str], Any]] = {
    # model assembly
    "model": _as_choice("desk-T", "T", "S", "B", "L", "H", "G"),
    "norm": _as_choice("pre", "post", "sandwich", "res_post"),
    "attn": _as_choice("dot", "cosine"),
    "bias": _as_choice("table", "lin_cpb", "log_cpb"),
    "window": _as_int(lo=1),
    "depth": _as_int(lo=1),
    "img_size": _as_int(lo=4),
    "cpb_hidden": _as_int(lo=1),
    "cpb_normalize": _as_choice("none", "train_window"),
    "init": _as_choice("trunc02", "fan"),
    "init_gain": _as_float(lo=0.0),
    "tau_init": _as_float(lo=0.0),
    "tau_min": _as_float(lo=0.0),
    "extra_ln_period": _as_opt_int(lo=1),
    "extra_ln_scope": _as_choice("global", "stage"),
    # training
    "steps": _as_int(lo=1),
    "batch_size": _as_int(lo=1),
    "lr": _as_float(lo=0.0),
    "weight_decay": _as_float(lo=0.0),
    "warmup_frac": _as_float(lo=0.0),
    "clip_norm": _as_float(lo=0.0),
    "seed": _as_int(lo=0, hi=2**64 - 1),
    "train_n": _as_int(lo=1),
    "eval_n": _as_int(lo=0),
    "noise_std": _as_float(lo=0.0),
    "segment_size": _as_opt_int(lo=1),
    "sequential": _as_bool,
    # transfer
    "target_window": _as_int(lo=1),
    "finetune_steps": _as_int(lo=0),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a raw string mapping.

    Values keep their textual form here; type conversion happens in
    :func:`resolve` so flag overrides (also strings) go through one code path.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as e:
        raise ConfigError(f"config file {path} is not valid UTF-8: {e}") from None
    return parse_config_text(text, origin=path)


def resolve(file_cfg: dict[str, str], overrides: dict[str, Any]) -> dict[str, Any]:
    """Merge file values with flag overrides and convert to typed values.

    ``overrides`` may hold already-typed values (from argparse); strings are
    converted like file values.  Override entries that are ``None`` mean "flag
    not given" and are skipped.
    """
    resolved: dict[str, Any] = {}
    for key, raw in file_cfg.items():
        resolved[key] = KNOWN_KEYS[key](raw)
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = KNOWN_KEYS[key](val) if isinstance(val, str) else val
    return resolved


def render_config(resolved: dict[str, Any]) -> str:
    """Deterministic ``key = value`` text of a resolved configuration.

    The output parses back through :func:`parse_config_text`, so an echoed
    ``meta.cfg`` can seed a follow-up run.
    """
    lines = []
    for key in sorted(resolved):
        val = resolved[key]
        if val is None:
            val = "none"
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
