"""Pipeline configuration and the ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..consistency import ConsistencyConfig
from ..errors import ConfigError, FileMissing, ParseError
from ..matcher import MatchConfig
from ..phi import PhiConfig
from ..view_selection import SelectionConfig


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: Path | None = None
    output_dir: Path | None = None
    half_scale: bool = False
    phi_enabled: bool = True
    seed: int = 0
    workers: int = 1
    fusion_rel_tol: float = 0.01
    eval_tol: float = 0.01
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    phi: PhiConfig = field(default_factory=PhiConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not self.fusion_rel_tol > 0:
            raise ConfigError("fusion_rel_tol must be positive")
        if not self.eval_tol > 0:
            raise ConfigError("eval_tol must be positive")

    def with_options(self, **options) -> "PipelineConfig":
        """Copy with flat option names (see :data:`KEYS`) overridden."""
        top, nested = {}, {}
        for key, raw in options.items():
            if key not in KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            section, name, conv = KEYS[key]
            value = conv(raw) if isinstance(raw, str) else raw
            if section is None:
                top[name] = value
            else:
                nested.setdefault(section, {})[name] = value
        for section, values in nested.items():
            top[section] = dataclasses.replace(getattr(self, section), **values)
        return dataclasses.replace(self, **top)

    def items(self) -> list[tuple[str, object]]:
        """Flat ``(key, value)`` listing in :data:`KEYS` order."""
        out = []
        for key, (section, name, _) in KEYS.items():
            owner = self if section is None else getattr(self, section)
            out.append((key, getattr(owner, name)))
        return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _path(text: str) -> Path:
    return Path(text.strip())


# flat key -> (section attribute or None, field name, parser)
KEYS = {
    "input_dir": (None, "input_dir", _path),
    "output_dir": (None, "output_dir", _path),
    "half_scale": (None, "half_scale", _bool),
    "phi_enabled": (None, "phi_enabled", _bool),
    "seed": (None, "seed", int),
    "workers": (None, "workers", int),
    "fusion_rel_tol": (None, "fusion_rel_tol", float),
    "eval_tol": (None, "eval_tol", float),
    "eps": ("selection", "eps", float),
    "t_tau": ("selection", "t_tau", float),
    "max_neighbors": ("selection", "k", int),
    "baseline_cap": ("selection", "baseline_cap", float),
    "angle_cap": ("selection", "angle_cap", float),
    "r_now": ("match", "r_now", int),
    "r_orig": ("match", "r_orig", int),
    "z_min": ("match", "z_min", float),
    "omega": ("match", "omega", float),
    "iterations": ("match", "iterations", int),
    "rel_depth_tol": ("consistency", "rel_depth_tol", float),
    "angle_tol_deg": ("consistency", "angle_tol_deg", float),
    "reproj_tol_px": ("consistency", "reproj_tol_px", float),
    "min_support": ("consistency", "min_support", int),
    "relative_depth": ("consistency", "relative", _bool),
    "kappa1": ("phi", "kappa1", float),
    "kappa2": ("phi", "kappa2", float),
    "kappa3": ("phi", "kappa3", float),
    "fit_support": ("phi", "fit_support", int),
    "trw_iterations": ("phi", "trw_iterations", int),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Raises:
        ParseError: malformed line, unknown key or repeated key.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, lineno, "expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ParseError(source, lineno, f"unknown key {key!r}")
        if key in out:
            raise ParseError(source, lineno, f"duplicate key {key!r}")
        _, _, conv = KEYS[key]
        try:
            conv(value)
        except ValueError as exc:
            raise ParseError(source, lineno, f"bad value for {key}: {exc}") from None
        out[key] = value
    return out


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Defaults (or ``base``) overridden by the entries of a config file."""
    path = Path(path)
    if not path.is_file():
        raise FileMissing(f"config file not found: {path}")
    options = parse_config_text(path.read_text(), str(path))
    try:
        return (base or PipelineConfig()).with_options(**options)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in cfg.items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
