"""Flat ``section.key = value`` run configuration with typed defaults."""
from __future__ import annotations

from pathlib import Path

from .losses import LossWeights, SparsityConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "mesh.vertices": 1000,
    "gt.nodes": 100,
    "gt.identity": 8,
    "gt.appearance": 8,
    "gt.seed": 1234,
    "model.nodes": 100,
    "model.identity": 16,
    "model.appearance": 16,
    "model.k": 4,
    "model.seed": 7,
    "generate.subjects": 10,
    "generate.frames": 4,
    "generate.image_size": 128,
    "generate.identity_std": 1.0,
    "generate.appearance_std": 1.0,
    "generate.yaw_range": 45.0,
    "generate.light": 0.08,
    "generate.first_subject": 0,
    "weights.pho": LossWeights.pho,
    "weights.lan": LossWeights.lan,
    "weights.smo": LossWeights.smo,
    "weights.spa": LossWeights.spa,
    "weights.ble": LossWeights.ble,
    "weights.normalize": True,
    "sparsity.eta": SparsityConfig.eta,
    "sparsity.p": SparsityConfig.p,
    "learn.warmup": 200,
    "learn.joint": 1500,
    "learn.finetune": 300,
    "learn.batch": 8,
    "fit.iterations": 400,
    "fit.lr": 1e-2,
    "fit.final_lr_scale": 0.01,
    "gradcheck.vertices": 500,
    "gradcheck.nodes": 60,
    "gradcheck.frames": 2,
    "gradcheck.step": 1e-5,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.max_coords": 24,
}


def _cast(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {type(default).__name__}") from None


class RunConfig:
    """Typed values for every known key; unknown keys are rejected by name."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _cast(key, value) if isinstance(value, str) else type(DEFAULTS[key])(value)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def apply(self, assignments: list[str]) -> None:
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            self.set(key.strip(), value)

    def loss_weights(self) -> LossWeights:
        return LossWeights(pho=self["weights.pho"], lan=self["weights.lan"], smo=self["weights.smo"],
                           spa=self["weights.spa"], ble=self["weights.ble"],
                           normalize=self["weights.normalize"])

    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(eta=self["sparsity.eta"], p=self["sparsity.p"])

    def dump(self) -> str:
        return "".join(f"{k} = {self.values[k]!r}\n" for k in sorted(self.values))


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for key, value in parse_config(path.read_text(), str(path)).items():
            cfg.set(key, value)
    cfg.apply(overrides or [])
    return cfg
