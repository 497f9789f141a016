"""Training configuration: defaults, config-file parsing, flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    """Knobs shared by both training stages and the evaluation harness.

    Defaults: 30 atoms with validity and reconstruction weights of 100,
    a 5% labeling ratio over 5-frame subsequences, Adam at 1e-3 with
    mini-batches of 64.
    """

    k: int = 30
    lambda_dict: float = 100.0
    lambda_r: float = 100.0
    ratio: float = 0.05
    lr: float = 1e-3
    batch_size: int = 64
    dict_epochs: int = 200
    est_epochs: int = 150
    unlabeled_batch: int = 0        # 0 -> same as batch_size
    subseq_len: int = 5
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    frame_gradient: str = "full"    # "full" or "stop": backprop through the
                                    # estimated object frame, or treat it as
                                    # a constant of the reconstruction loss
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lambda_dict < 0 or self.lambda_r < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must be in (0, 1]")
        if self.batch_size < 1 or self.dict_epochs < 0 or self.est_epochs < 0:
            raise ConfigError("batch size and epoch counts must be positive")
        if self.frame_gradient not in ("full", "stop"):
            raise ConfigError("frame_gradient must be 'full' or 'stop'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def echo(self) -> dict:
        """Flat mapping of every field, for output file headers."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(s) for s in v) if isinstance(v, tuple) else v
        return out

    def with_overrides(self, **kwargs) -> "TrainConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


def _coerce(name: str, text: str):
    for f in fields(TrainConfig):
        if f.name != name:
            continue
        if name == "seeds":
            return tuple(int(x) for x in text.split(",") if x.strip() != "")
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
        return text
    raise ConfigError(f"unknown config key: {name}")


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a key=value config file; explicit overrides win.

    Lines starting with '#' and blank lines are ignored.
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = _coerce(key.strip(), val.strip())
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
    return TrainConfig(**values)
