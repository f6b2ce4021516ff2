"""Run configuration: an INI-style file of ``key = value`` lines under ``[section]`` headers."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import CLASSES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    # dataset
    classes: tuple = CLASSES
    counts: tuple = (20, 20, 20)
    dims: tuple = (48, 48, 8)
    spacing: tuple = (1.0, 1.0, 1.0)
    noise: float = 0.02
    split: tuple = (0.7, 0.1, 0.2)
    # registration
    grid_dims: tuple = (6, 6, 4)
    reg_max_iters: int = 60
    reg_tol: float = 1e-5
    icp_threshold: float = 0.5
    atlas_rounds: int = 5
    atlas_tol: float = 1e-4
    atlas_max_iters: int = 30
    # regressor
    conv_channels: tuple = (8, 16)
    head_hidden: int = 64
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"
    aug_factor: int = 4
    # dec
    k: int = 10
    latent_dim: int = 8
    ae_hidden: tuple = (64,)
    ae_epochs: int = 500
    ae_lr: float = 1e-3
    ae_optimizer: str = "adam"
    dec_max_epochs: int = 100
    dec_lr: float = 1e-2
    dec_optimizer: str = "adam"
    dec_batch_size: int = 32
    stop_tol: float = 0.001
    update_interval: int = 1
    alpha: float = 1.0
    # evaluation
    eval_pairs: int = 10
    eval_max_disp: float = 2.0
    eval_max_iters: int = 500

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3 or min(self.split) < 0:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if len(self.counts) != len(self.classes):
            raise ConfigError("counts must list one entry per class")
        if min(self.counts) <= 0:
            raise ConfigError("class counts must be positive")
        if self.k < len(self.classes):
            raise ConfigError(f"k={self.k} is smaller than the number of classes")
        if unknown := set(self.classes) - set(CLASSES):
            raise ConfigError(f"unknown classes {sorted(unknown)}")
        for name in ("epochs", "aug_factor", "batch_size", "latent_dim", "eval_pairs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.dims) != 3 or len(self.grid_dims) != 3 or min(self.grid_dims) < 4:
            raise ConfigError("dims and grid_dims need three entries, grid at least 4 per axis")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @property
    def root(self) -> Path:
        return Path(self.workdir)


# config key -> (section, field, parser)
_INT = int
_FLOAT = float


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


def _floats(s):
    return tuple(float(t) for t in s.replace(",", " ").split())


def _words(s):
    return tuple(s.replace(",", " ").split())


_KEYS = {
    ("run", "seed"): ("seed", _INT),
    ("run", "workdir"): ("workdir", str),
    ("dataset", "classes"): ("classes", _words),
    ("dataset", "counts"): ("counts", _ints),
    ("dataset", "dims"): ("dims", _ints),
    ("dataset", "spacing"): ("spacing", _floats),
    ("dataset", "noise"): ("noise", _FLOAT),
    ("dataset", "split"): ("split", _floats),
    ("registration", "grid_dims"): ("grid_dims", _ints),
    ("registration", "max_iters"): ("reg_max_iters", _INT),
    ("registration", "tol"): ("reg_tol", _FLOAT),
    ("registration", "icp_threshold"): ("icp_threshold", _FLOAT),
    ("registration", "atlas_rounds"): ("atlas_rounds", _INT),
    ("registration", "atlas_tol"): ("atlas_tol", _FLOAT),
    ("registration", "atlas_max_iters"): ("atlas_max_iters", _INT),
    ("regressor", "conv_channels"): ("conv_channels", _ints),
    ("regressor", "hidden"): ("head_hidden", _INT),
    ("regressor", "epochs"): ("epochs", _INT),
    ("regressor", "lr"): ("lr", _FLOAT),
    ("regressor", "batch_size"): ("batch_size", _INT),
    ("regressor", "optimizer"): ("optimizer", str),
    ("regressor", "aug_factor"): ("aug_factor", _INT),
    ("dec", "k"): ("k", _INT),
    ("dec", "latent_dim"): ("latent_dim", _INT),
    ("dec", "ae_hidden"): ("ae_hidden", _ints),
    ("dec", "ae_epochs"): ("ae_epochs", _INT),
    ("dec", "ae_lr"): ("ae_lr", _FLOAT),
    ("dec", "ae_optimizer"): ("ae_optimizer", str),
    ("dec", "max_epochs"): ("dec_max_epochs", _INT),
    ("dec", "lr"): ("dec_lr", _FLOAT),
    ("dec", "optimizer"): ("dec_optimizer", str),
    ("dec", "batch_size"): ("dec_batch_size", _INT),
    ("dec", "stop_tol"): ("stop_tol", _FLOAT),
    ("dec", "update_interval"): ("update_interval", _INT),
    ("dec", "alpha"): ("alpha", _FLOAT),
    ("evaluate", "pairs"): ("eval_pairs", _INT),
    ("evaluate", "max_disp"): ("eval_max_disp", _FLOAT),
    ("evaluate", "max_iters"): ("eval_max_iters", _INT),
}


def load_config(path) -> RunConfig:
    """Read a config file; relative ``workdir`` paths resolve against the file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    kw = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) not in _KEYS:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            name, parse = _KEYS[(section, key)]
            try:
                kw[name] = parse(raw)
            except ValueError:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {raw!r}") from None
    if "workdir" in kw and not Path(kw["workdir"]).is_absolute():
        kw["workdir"] = str(path.parent / kw["workdir"])
    return RunConfig(**kw)


def dump_config(cfg: RunConfig) -> str:
    """Config file text that loads back to ``cfg``."""
    by_section = {}
    for (section, key), (name, _) in _KEYS.items():
        v = getattr(cfg, name)
        text = " ".join(str(t) for t in v) if isinstance(v, tuple) else str(v)
        by_section.setdefault(section, []).append(f"{key} = {text}")
    return "\n\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in by_section.items()) + "\n"


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))
