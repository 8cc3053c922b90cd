"""Experiment configuration and the builders shared by the CLI and the desk-scale tests.

A config is flat ``key = value`` text with dotted keys (``fl.alpha = 0.5``).
Unknown keys are rejected; missing keys take the defaults in ``KEYS``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import nn
from .codegen import CodeStrategy, PREFERRED_PAIRS, keep_weight, DEFAULT_CWC_MAX_ITERS
from .data import ClientDataset, Dataset, PartitionSpec, Scheme, load_idx, partition, synthesize, train_test_split
from .dropout import maskable_layers
from .errors import ConfigError
from .fedcore import FederatedSession, Mode, RoundConfig, ServerOptimizerState
from .lradapt import AdaptationConfig, QuadraticStubSession

log = logging.getLogger(__name__)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fraction(text: str) -> float:
    return float(Fraction(str(text).strip()))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).replace(" ", "").split(",") if p)


def _str(text: str) -> str:
    return str(text).strip()


# key -> (parser, default, help)
KEYS: dict[str, tuple] = {
    "run.seed": (int, 0, "master seed for data, init, sampling and masks"),
    "run.out": (_str, "out", "output directory"),
    "run.eval_every": (int, 5, "test-set evaluation interval in rounds (0 disables)"),
    "fl.clients_per_round": (int, 35, "M, clients per round"),
    "fl.total_clients": (int, 3400, "T, total clients"),
    "fl.alpha": (_fraction, 0.5, "dropout rate; 0 disables dropout"),
    "fl.strategy": (_str, "gold", "random_same | random_distinct | gold | cwc"),
    "fl.epochs": (int, 1, "E, local epochs"),
    "fl.client_lr": (float, 0.035, "client learning rate"),
    "fl.batch_size": (int, 10, "local minibatch size"),
    "fl.rounds": (int, 500, "rounds for the train command"),
    "server.mode": (_str, "favg", "favg | fedadam"),
    "server.eta_log10": (float, 0.0, "log10 of the server learning rate for train"),
    "server.beta1": (float, 0.90, "FedAdam first-moment decay"),
    "server.beta2": (float, 0.99, "FedAdam second-moment decay"),
    "server.tau": (float, 0.001, "FedAdam adaptivity"),
    "adapt.gamma_target": (_fraction, 20 / 62, "target window-mean median accuracy"),
    "adapt.window": (int, 10, "q, rounds in the accuracy window"),
    "adapt.steps": (int, 3, "n_a, refinement steps after the first"),
    "adapt.eta0_log10": (_str, "auto", "first centre; auto = 0 for favg, -2 for fedadam"),
    "adapt.delta_eta0": (float, 1.0, "first log10 spacing"),
    "adapt.max_rounds": (int, 500, "round cap per session"),
    "adapt.stub": (_bool, False, "use deterministic stub sessions instead of FL"),
    "adapt.stub_center": (float, -1.75, "stub: log10 eta with the fewest rounds"),
    "adapt.stub_curvature": (float, 40.0, "stub: rounds added per squared log10 distance"),
    "adapt.stub_base": (int, 20, "stub: rounds at the optimum"),
    "codes.widths": (_ints, (), "layer widths for gen-codes; empty = the model's maskable widths"),
    "codes.cwc_max_iters": (int, DEFAULT_CWC_MAX_ITERS, "per-pass node budget of the CWC search"),
    "model.preset": (_str, "desk", "desk | emnist62"),
    "model.spec": (_str, "", "explicit model text, overrides the preset"),
    "model.filters": (_ints, (4, 32), "desk preset conv filters"),
    "model.hidden": (int, 128, "desk preset hidden dense units"),
    "model.dtype": (_str, "float32", "float32 | float64"),
    "data.source": (_str, "synthetic", "synthetic | idx"),
    "data.images": (_str, "", "IDX image file"),
    "data.labels": (_str, "", "IDX label file"),
    "data.test_images": (_str, "", "optional IDX test image file"),
    "data.test_labels": (_str, "", "optional IDX test label file"),
    "data.classes": (int, 10, "synthetic classes"),
    "data.samples_per_class": (int, 300, "synthetic samples per class"),
    "data.image_size": (int, 8, "synthetic image side"),
    "data.separation": (float, 1.0, "synthetic class separation"),
    "data.noise": (float, 0.25, "synthetic pixel noise"),
    "data.test_fraction": (_fraction, 0.2, "held-out fraction when no test files are given"),
    "data.scheme": (_str, "iid", "iid | label_skew"),
    "data.shards_per_client": (int, 2, "label_skew shards per client"),
}


def parse_config_text(text: str) -> dict[str, str]:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    return raw


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: spec[1] for k, spec in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        return cfg.updated(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_mapping(parse_config_text(text))

    def updated(self, raw: dict) -> "ExperimentConfig":
        values = dict(self.values)
        for k, v in raw.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            parser = KEYS[k][0]
            try:
                values[k] = parser(v) if isinstance(v, str) else v
            except (ValueError, ZeroDivisionError) as e:
                raise ConfigError(f"{k}: {e}") from None
        return ExperimentConfig(values)

    def to_text(self) -> str:
        lines = []
        for k in KEYS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    # ---- typed views ----------------------------------------------------

    @property
    def seed(self) -> int:
        return self["run.seed"]

    @property
    def mode(self) -> Mode:
        return Mode(self["server.mode"].lower())

    @property
    def strategy(self) -> CodeStrategy:
        return CodeStrategy.parse(self["fl.strategy"])

    def round_config(self) -> RoundConfig:
        return RoundConfig(self["fl.clients_per_round"], self["fl.total_clients"], self["fl.alpha"],
                           self.strategy, self["fl.epochs"], self["fl.client_lr"], self["fl.batch_size"],
                           self.seed, self["codes.cwc_max_iters"])

    def server_state(self, eta_log10: float | None = None) -> ServerOptimizerState:
        eta = self["server.eta_log10"] if eta_log10 is None else eta_log10
        return ServerOptimizerState(self.mode, 10.0**eta, self["server.beta1"], self["server.beta2"],
                                    self["server.tau"])

    def eta0_log10(self) -> float:
        v = self["adapt.eta0_log10"]
        if v.lower() == "auto":
            return 0.0 if self.mode is Mode.FAVG else -2.0
        return float(v)

    def adaptation_config(self) -> AdaptationConfig:
        return AdaptationConfig(self["adapt.gamma_target"], self["adapt.window"], self["adapt.steps"],
                                self.eta0_log10(), self["adapt.delta_eta0"], self["adapt.max_rounds"])

    def dtype(self):
        return np.dtype(self["model.dtype"])

    def model_spec(self, input_shape=None, classes=None) -> nn.ModelSpec:
        if self["model.spec"]:
            return nn.ModelSpec.from_text(self["model.spec"])
        preset = self["model.preset"].lower()
        if preset == "emnist62":
            return nn.emnist62_model()
        if preset == "desk":
            size = input_shape[-1] if input_shape else self["data.image_size"]
            return nn.desk_model(size, classes or self["data.classes"], self["model.filters"], self["model.hidden"])
        raise ConfigError(f"unknown model preset {preset!r}")

    # ---- validation ------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        """Check every cross-field constraint; raise ConfigError naming the first violation."""
        try:
            rc = self.round_config()
            self.adaptation_config()
            if self["server.mode"].lower() not in ("favg", "fedadam"):
                raise ValueError(f"unknown server mode {self['server.mode']!r}")
            self.server_state()
            self.dtype()
            self.eta0_log10()
            Scheme(self["data.scheme"].lower())
            if self["data.source"] not in ("synthetic", "idx"):
                raise ValueError(f"unknown data source {self['data.source']!r}")
            if self["data.source"] == "idx" and not (self["data.images"] and self["data.labels"]):
                raise ValueError("data.source = idx needs data.images and data.labels")
            if bool(self["data.test_images"]) != bool(self["data.test_labels"]):
                raise ValueError("give both data.test_images and data.test_labels or neither")
            if not 0.0 < self["data.test_fraction"] < 1.0:
                raise ValueError("data.test_fraction must lie in (0, 1)")
            if self["fl.rounds"] < 1 or self["fl.batch_size"] < 1 or self["run.eval_every"] < 0:
                raise ValueError("fl.rounds and fl.batch_size must be >= 1, run.eval_every >= 0")
            widths = self["codes.widths"]
            if self["data.source"] == "synthetic" or self["model.spec"] or self["model.preset"] != "desk":
                spec = self.model_spec()
                widths = widths or tuple(spec.layers[i].units for i in maskable_layers(spec))
            if rc.dropout:
                if rc.strategy is CodeStrategy.GOLD and rc.alpha != 0.5:
                    raise ValueError(f"gold codes need alpha = 0.5, got {rc.alpha}")
                for w in widths:
                    keep_weight(w, rc.alpha)
                    if rc.strategy is CodeStrategy.GOLD:
                        n = int(w).bit_length() - 1
                        if w != 2**n or n not in PREFERRED_PAIRS:
                            raise ValueError(f"gold codes need a layer width 2^n with n in "
                                             f"{sorted(PREFERRED_PAIRS)}, got {w}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


# ---- builders ---------------------------------------------------------------

@dataclass
class Experiment:
    config: ExperimentConfig
    spec: nn.ModelSpec
    clients: list[ClientDataset]
    test: Dataset

    def session(self, eta_log10: float | None = None, alpha: float | None = None,
                strategy=None) -> FederatedSession:
        cfg = self.config
        if alpha is not None or strategy is not None:
            cfg = cfg.updated({k: v for k, v in (("fl.alpha", alpha), ("fl.strategy", strategy)) if v is not None})
        return FederatedSession(self.spec, self.clients, cfg.round_config(), cfg.server_state(eta_log10),
                                test_set=(self.test.x, self.test.y), eval_every=cfg["run.eval_every"],
                                dtype=cfg.dtype(), init_seed=cfg.seed)

    def session_factory(self):
        """``factory(eta)`` for the learning-rate search (eta linear, as the search passes it)."""
        return lambda eta: self.session(float(np.log10(eta)))


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    seed = cfg.seed
    if cfg["data.source"] == "idx":
        full = load_idx(cfg["data.images"], cfg["data.labels"])
        if cfg["data.test_images"]:
            return full, load_idx(cfg["data.test_images"], cfg["data.test_labels"])
        return train_test_split(full, cfg["data.test_fraction"], seed)
    s = cfg["data.image_size"]
    full = synthesize(cfg["data.classes"], cfg["data.samples_per_class"], (1, s, s), cfg["data.separation"],
                      cfg["data.noise"], seed)
    return train_test_split(full, cfg["data.test_fraction"], seed)


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    train, test = load_datasets(cfg)
    spec = cfg.model_spec(train.x.shape[1:], max(train.classes, test.classes))
    clients = partition(train, PartitionSpec(Scheme(cfg["data.scheme"].lower()), cfg["fl.total_clients"],
                                             cfg["data.shards_per_client"], cfg.seed))
    return Experiment(cfg, spec, clients, test)


def stub_factory(cfg: ExperimentConfig):
    return lambda eta: QuadraticStubSession(eta, cfg["adapt.stub_center"], cfg["adapt.stub_curvature"],
                                            cfg["adapt.stub_base"])


def desk_config(**overrides) -> ExperimentConfig:
    """The desk-scale setup used by the convergence checks (T=40, M=8, 10 synthetic classes)."""
    base = {
        "fl.total_clients": 40, "fl.clients_per_round": 8, "fl.rounds": 150,
        "adapt.max_rounds": 150, "adapt.gamma_target": 0.6, "adapt.window": 5, "adapt.eta0_log10": 0.5,
        "model.hidden": 128, "codes.cwc_max_iters": 100_000, "run.eval_every": 0,
    }
    base.update(overrides)
    return ExperimentConfig().updated({k: (str(v) if not isinstance(v, str) else v) for k, v in base.items()})
