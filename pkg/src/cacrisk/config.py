"""Flat ``key = value`` run configuration.

Config files are plain text: one dotted key per line, ``#`` comments,
blank lines ignored.  Every key has a typed default; unknown keys and
malformed values are rejected with a ConfigError naming the offender.
The resolved configuration (defaults merged with file and command-line
overrides) can be emitted back out in canonical form, which is what run
directories store.
"""

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def _parse_str_list(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_optional_float(text: str):
    t = text.strip().lower()
    if t in ("", "auto", "none"):
        return None
    return float(text)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "float_list": _parse_float_list,
    "str_list": _parse_str_list,
    "optional_float": _parse_optional_float,
}

ALL_METHODS = (
    "agatston", "agatston_category", "volume", "sqrt_volume", "grade",
    "risknet", "hyrisknet_grade", "hyrisknet_agatston",
)

# key -> (type name, default)
SCHEMA = {
    "run.seed": ("int", 7),
    "run.jobs": ("int", 1),
    "phantom.n_subjects": ("int", 180),
    "phantom.balanced": ("bool", True),
    "phantom.rows": ("int", 200),
    "phantom.cols": ("int", 200),
    "phantom.slices": ("int", 9),
    "phantom.spacing_x": ("float", 0.7),
    "phantom.spacing_y": ("float", 0.7),
    "phantom.spacing_z": ("float", 3.0),
    "phantom.background_hu_mean": ("float", 40.0),
    "phantom.background_hu_std": ("float", 10.0),
    "phantom.noise_sigma": ("float", 15.0),
    "phantom.lesion_rate": ("float", 1.5),
    "phantom.lesion_radius_min_mm": ("float", 1.0),
    "phantom.lesion_radius_max_mm": ("float", 4.0),
    "phantom.lesion_hu_levels": ("float_list", (220.0, 320.0, 450.0)),
    "phantom.latent_amplitude": ("float", 0.1),
    "phantom.latent_period_mm": ("float", 40.0),
    "phantom.center_jitter_px": ("int", 5),
    "phantom.label_a": ("float", 2.0),
    "phantom.label_b": ("float", 2.0),
    "phantom.label_bias": ("float", 0.0),
    "phantom.agatston_ref": ("float", 300.0),
    "phantom.grade_cutpoints": ("float_list", (10.0, 100.0, 400.0)),
    "phantom.grade_noise": ("float", 0.1),
    "backbone.depth": ("str", "micro"),
    "backbone.feature_dim": ("int", 64),
    "backbone.input_size": ("int", 224),
    "train.strategy": ("str", "scratch"),
    "train.learning_rate": ("optional_float", None),
    "train.epochs": ("int", 30),
    "train.stage2_epochs": ("int", 10),
    "train.stage2_learning_rate": ("optional_float", None),
    "train.batch_size": ("int", 16),
    "train.decay_factor": ("float", 0.9),
    "train.decay_every": ("int", 5),
    "train.score_source": ("str", "grade"),
    "train.weights": ("str", ""),
    "eval.k": ("int", 10),
    "eval.stratified": ("bool", True),
    "eval.methods": ("str_list", ALL_METHODS),
}


@dataclass
class RunConfig:
    """Typed view over the resolved key/value map."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)


def _parse_value(key: str, text: str):
    type_name, _ = SCHEMA[key]
    try:
        return _PARSERS[type_name](text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse key = value lines into a typed dict (no defaults applied)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        out[key] = _parse_value(key, value.strip())
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then file values, then command-line overrides.

    overrides: iterable of "key=value" strings (from repeated --set).
    """
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from e
        values.update(parse_config_text(text, source=str(p)))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, value.strip())
    _validate(values)
    return RunConfig(values=values)


def _validate(values: dict):
    if values["phantom.n_subjects"] < 2:
        raise ConfigError("phantom.n_subjects must be >= 2")
    if values["eval.k"] < 2:
        raise ConfigError("eval.k must be >= 2")
    if values["run.jobs"] < 1:
        raise ConfigError("run.jobs must be >= 1")
    unknown = [m for m in values["eval.methods"] if m not in ALL_METHODS]
    if unknown:
        raise ConfigError(
            f"unknown eval methods {unknown}; choose from {list(ALL_METHODS)}"
        )


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(config: RunConfig) -> str:
    """Canonical emission of the full configuration, one key per line."""
    lines = [f"{key} = {format_value(config.values[key])}" for key in sorted(SCHEMA)]
    return "\n".join(lines) + "\n"


def write_resolved(config: RunConfig, path):
    Path(path).write_text(resolved_text(config))
