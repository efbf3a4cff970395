"""Run configuration: one JSON document with sim / rules / model / train / eval sections.

Values come from three layers (embedded defaults, the config file, command-line
flags); each leaf remembers which layer set it so the effective configuration
can be echoed with provenance.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParseError
from .model import LossWeights, ModelConfig
from .rules import RuleParams
from .sim import ScenarioConfig
from .train import TrainConfig

CONFIG_VERSION = 1
SECTIONS = ("sim", "rules", "model", "train", "eval")
# Free-form leaves: validated by their consumer, not key-checked here.
OPAQUE = {("sim", "map")}


def _train_defaults() -> dict:
    t = TrainConfig()
    return {"task": t.task, "epochs": t.epochs, "batch_size": t.batch_size, "lr": t.lr,
            "seed": t.seed, "mask_k": t.mask_k, "test_fraction": t.test_fraction}


def default_document() -> dict:
    return {
        "version": CONFIG_VERSION,
        "sim": ScenarioConfig().to_dict(),
        "rules": RuleParams().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": _train_defaults(),
        "eval": {"ks": [5, 15, 25]},
    }


@dataclass
class RunConfig:
    doc: dict = field(default_factory=default_document)
    provenance: dict = field(default_factory=dict)

    # typed views ---------------------------------------------------------------
    @property
    def sim(self) -> ScenarioConfig:
        return ScenarioConfig.from_dict(copy.deepcopy(self.doc["sim"]))

    @property
    def rules(self) -> RuleParams:
        return RuleParams.from_dict(dict(self.doc["rules"]))

    @property
    def model(self) -> ModelConfig:
        d = dict(self.doc["model"])
        d["weights"] = LossWeights(**d["weights"])
        try:
            return ModelConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None

    @property
    def train(self) -> TrainConfig:
        d = dict(self.doc["train"])
        d["task"] = str(d["task"]).upper()
        for key in ("epochs", "batch_size", "seed", "mask_k"):
            if not isinstance(d[key], int) or isinstance(d[key], bool):
                raise ConfigError(f"train.{key} must be an integer")
        return TrainConfig(**d)

    @property
    def ks(self) -> tuple[int, ...]:
        ks = self.doc["eval"]["ks"]
        if not ks or any(not isinstance(k, int) or isinstance(k, bool) or k < 1 for k in ks):
            raise ConfigError("eval.ks must be a nonempty list of positive integers")
        return tuple(ks)

    def validate(self) -> "RunConfig":
        self.sim, self.rules, self.model, self.train, self.ks  # noqa: B018 - construction validates
        return self

    # layering ------------------------------------------------------------------
    def set(self, dotted: str, value, source: str = "flag") -> None:
        """Override one leaf, e.g. ``train.epochs``."""
        path = tuple(dotted.split("."))
        node = self.doc
        for i, key in enumerate(path[:-1]):
            if not isinstance(node, dict) or key not in node or path[: i + 1] in OPAQUE:
                raise ConfigError(f"unknown config key {dotted}")
            node = node[key]
        if not isinstance(node, dict) or path[-1] not in node:
            raise ConfigError(f"unknown config key {dotted}")
        node[path[-1]] = value
        self._mark(path, value, source)

    def _mark(self, path: tuple, value, source: str) -> None:
        if isinstance(value, dict) and path not in OPAQUE:
            for k, v in value.items():
                self._mark(path + (k,), v, source)
        else:
            self.provenance[".".join(path)] = source

    def leaves(self) -> list[tuple[str, object]]:
        out = []

        def walk(node, path):
            for k in sorted(node):
                p = path + (k,)
                if isinstance(node[k], dict) and p not in OPAQUE:
                    walk(node[k], p)
                else:
                    out.append((".".join(p), node[k]))

        walk(self.doc, ())
        return out

    def echo(self) -> str:
        """Effective configuration, one ``key = value  (source)`` line per leaf."""
        lines = []
        for key, value in self.leaves():
            src = self.provenance.get(key, "default")
            lines.append(f"{key} = {json.dumps(value, sort_keys=True)}  ({src})")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"


def _merge(base: dict, user: dict, path: tuple, cfg: RunConfig) -> None:
    if not isinstance(user, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object")
    for key, value in user.items():
        p = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(p)}")
        if isinstance(base[key], dict) and p not in OPAQUE:
            _merge(base[key], value, p, cfg)
        else:
            base[key] = value
            cfg._mark(p, value, "file")


def load_config(path=None) -> RunConfig:
    """Defaults overlaid with the JSON file at ``path`` (if given)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version {user.get('version')!r}, expected {CONFIG_VERSION}")
    user = {k: v for k, v in user.items() if k != "version"}
    _merge(cfg.doc, user, (), cfg)
    return cfg


__all__ = ["CONFIG_VERSION", "RunConfig", "default_document", "load_config", "ParseError"]
