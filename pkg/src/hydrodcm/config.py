"""Flat dotted-key experiment configuration.

Config files are plain text, one `key = value` per line, `#` comments and
blank lines allowed.  An empty file (or no file) means all defaults, which
equal the production hyperparameters.  Command-line overrides use the same
`key=value` syntax and apply after the file.
"""

from __future__ import annotations

from .train import ExperimentConfig


class ConfigError(ValueError):
    pass


def _opt_str(raw: str):
    return raw if raw else None


# key -> (attribute path on ExperimentConfig, parser)
KEYS = {
    "train.mode": ("mode", str),
    "train.ablation": ("ablation", str),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.warmup_epochs": ("warmup_epochs", int),
    "train.learning_rate": ("learning_rate", float),
    "train.scheduler_factor": ("scheduler_factor", float),
    "train.scheduler_patience": ("scheduler_patience", int),
    "train.scheduler_metric": ("scheduler_metric", str),
    "train.clip_norm": ("clip_norm", float),
    "train.dropout": ("dropout", float),
    "train.grl_lambda": ("grl_lambda", float),
    "train.seed": ("seed", int),
    "train.num_runs": ("num_runs", int),
    "loss.lambda_con": ("loss.lambda_con", float),
    "loss.lambda_adv": ("loss.lambda_adv", float),
    "loss.lambda_sup": ("loss.lambda_sup", float),
    "loss.tau": ("loss.tau", float),
    "loss.m_neg": ("loss.m_neg", int),
    "world.num_reservoirs": ("world.num_reservoirs", int),
    "world.num_target": ("world.num_target", int),
    "world.days": ("world.days", int),
    "world.target_years": ("world.target_years", int),
    "world.shift_strength": ("world.shift_strength", float),
    "world.seed": ("world.seed", int),
    "data.series_csv": ("series_csv", _opt_str),
    "data.metadata_csv": ("metadata_csv", _opt_str),
    "eval.nse_aggregate": ("nse_aggregate", str),
}


def _assign(cfg: ExperimentConfig, key: str, raw: str, where: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    path, caster = KEYS[key]
    try:
        value = caster(raw)
    except ValueError:
        raise ConfigError(
            f"{where}: key {key!r} expects {caster.__name__}, got {raw!r}"
        ) from None
    target = cfg
    parts = path.split(".")
    for part in parts[:-1]:
        target = getattr(target, part)
    setattr(target, parts[-1], value)


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the config file, then `--set key=value` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(
                        f"{path}:{line_no}: expected 'key = value', got {line.rstrip()!r}")
                key, raw = stripped.split("=", 1)
                _assign(cfg, key.strip(), raw.strip(), f"{path}:{line_no}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        _assign(cfg, key.strip(), raw.strip(), f"--set {item!r}")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _value_str(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_effective_config(cfg: ExperimentConfig, path) -> None:
    """Echo the fully resolved configuration, one line per known key."""
    lines = []
    for key in sorted(KEYS):
        attr_path, _ = KEYS[key]
        target = cfg
        for part in attr_path.split("."):
            target = getattr(target, part)
        lines.append(f"{key} = {_value_str(target)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
