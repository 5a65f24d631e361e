"""Experiment configuration: nested YAML mapping onto dataclasses.

A config file only needs the keys it changes; everything else comes from the
per-experiment defaults below. ``to_dict`` gives the fully resolved mapping,
which loads back to an equal config.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datasets import FactorDatasetSpec, GaussianMixtureSpec
from .errors import ConfigError
from .flow import FlowConfig, FlowTrainConfig
from .ode import IntegratorConfig
from .vae import VaeConfig

EXPERIMENTS = ("gaussians2d", "factors")


@dataclass
class AnalysisConfig:
    n_eval: int = 2000  # held-out samples pushed through the flows
    n_train: int = 512
    n_repeats: int = 5
    probe_points: int = 11
    ridge_lambda: float = 1e-6
    n_generate_per_class: int = 1000
    roundtrip_samples: int = 256
    roundtrip_steps: list[int] = field(default_factory=lambda: [25, 50, 100, 200])
    n_transfer: int = 100
    n_isolation: int = 100
    isolation_reference_class: int = 0
    trajectory_csv_samples: int = 64


DEFAULTS: dict[str, dict] = {
    "gaussians2d": {
        "experiment": "gaussians2d",
        "seed": 0,
        "output_dir": "runs/gaussians2d",
        "dataset": {"n_samples": 8192, "cov_scale": 0.5, "test_fraction": 0.2},
        "vae": "none",
        "flow": {
            "model": dataclasses.asdict(FlowConfig()),
            "train": dataclasses.asdict(
                FlowTrainConfig(dropout_p=0.2, steps=6000, batch_size=256, lr=2e-3, lr_final=1e-4)
            ),
        },
        "integrator": dataclasses.asdict(IntegratorConfig()),
        "analysis": dataclasses.asdict(AnalysisConfig(n_eval=1600)),
    },
    "factors": {
        "experiment": "factors",
        "seed": 0,
        "output_dir": "runs/factors",
        "dataset": {
            "n_samples": 10000, "n_classes": 10, "rgb_low": 0.05, "rgb_high": 0.95,
            "observation_dim": 32, "mixing_seed": 1234, "sigma_obs": 0.05, "test_fraction": 0.2,
        },
        "vae": dataclasses.asdict(VaeConfig(latent_dim=12)),
        "flow": {
            "model": dataclasses.asdict(FlowConfig(
                latent_dim=12, scheme="film", hidden=128, n_hidden=4, activation="gelu",
                n_classes=10, cont_dim=2, emb_dim=16,
            )),
            "train": dataclasses.asdict(
                FlowTrainConfig(dropout_p=0.1, steps=4000, batch_size=256, lr=1e-3, lr_final=1e-5)
            ),
        },
        "integrator": dataclasses.asdict(IntegratorConfig()),
        "analysis": dataclasses.asdict(AnalysisConfig()),
    },
}

SMOKE: dict[str, dict] = {
    "gaussians2d": {
        "dataset": {"n_samples": 2000},
        "flow": {"train": {"steps": 150, "log_every": 50}},
        "integrator": {"n_steps": 20},
        "analysis": {"n_eval": 300, "n_train": 128, "n_repeats": 2, "n_generate_per_class": 50,
                     "roundtrip_samples": 32, "roundtrip_steps": [10, 20],
                     "trajectory_csv_samples": 8},
    },
    "factors": {
        "dataset": {"n_samples": 1500},
        "vae": {"epochs": 2, "hidden": 32},
        "flow": {"model": {"hidden": 32}, "train": {"steps": 100, "log_every": 50}},
        "integrator": {"n_steps": 10},
        "analysis": {"n_eval": 300, "n_train": 128, "n_repeats": 2, "roundtrip_samples": 16,
                     "roundtrip_steps": [10, 20], "n_transfer": 10, "n_isolation": 10,
                     "trajectory_csv_samples": 8},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    for f in dataclasses.fields(cls):
        if f.name in data and f.type in ("int", "float") and isinstance(data[f.name], bool):
            raise ConfigError(f"{path}.{f.name}: expected a number, got a boolean")
        if f.name in data and f.type == "int" and not isinstance(data[f.name], int):
            raise ConfigError(f"{path}.{f.name}: expected an integer, got {data[f.name]!r}")
        if f.name in data and f.type == "float" and not isinstance(data[f.name], (int, float)):
            raise ConfigError(f"{path}.{f.name}: expected a number, got {data[f.name]!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    output_dir: str
    dataset: GaussianMixtureSpec | FactorDatasetSpec
    test_fraction: float
    vae: VaeConfig | None
    flow_model: FlowConfig
    flow_train: FlowTrainConfig
    integrator: IntegratorConfig
    analysis: AnalysisConfig

    @classmethod
    def from_dict(cls, raw: dict, smoke: bool = False) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        exp = raw.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiment: must be one of {list(EXPERIMENTS)}, got {exp!r}")
        unknown = sorted(set(raw) - set(DEFAULTS[exp]))
        if unknown:
            raise ConfigError(f"config: unknown top-level key(s) {unknown}")
        merged = deep_merge(DEFAULTS[exp], SMOKE[exp]) if smoke else DEFAULTS[exp]
        merged = deep_merge(merged, raw)
        if not isinstance(merged["seed"], int) or isinstance(merged["seed"], bool):
            raise ConfigError(f"seed: expected an integer, got {merged['seed']!r}")
        ds = dict(merged["dataset"]) if isinstance(merged["dataset"], dict) else merged["dataset"]
        if not isinstance(ds, dict):
            raise ConfigError("dataset: expected a mapping")
        test_fraction = ds.pop("test_fraction", 0.2)
        if not 0.0 < float(test_fraction) < 1.0:
            raise ConfigError(f"dataset.test_fraction: must lie in (0, 1), got {test_fraction}")
        spec_cls = GaussianMixtureSpec if exp == "gaussians2d" else FactorDatasetSpec
        if exp == "gaussians2d" and "means" in ds:
            ds["means"] = tuple(tuple(m) for m in ds["means"])
        dataset = _build(spec_cls, ds, "dataset")
        vae_raw = merged["vae"]
        if exp == "gaussians2d":
            if vae_raw not in ("none", None):
                raise ConfigError("vae: the gaussians2d experiment trains the flow on data directly; set vae: none")
            vae = None
        else:
            if vae_raw in ("none", None):
                raise ConfigError("vae: the factors experiment needs a VAE section")
            vae = _build(VaeConfig, vae_raw, "vae")
        flow = merged["flow"]
        if not isinstance(flow, dict):
            raise ConfigError("flow: expected a mapping with 'model' and 'train'")
        extra = sorted(set(flow) - {"model", "train"})
        if extra:
            raise ConfigError(f"flow: unknown key(s) {extra}")
        flow_model = _build(FlowConfig, flow.get("model", {}), "flow.model")
        flow_train = _build(FlowTrainConfig, flow.get("train", {}), "flow.train")
        if not 0.0 <= flow_train.dropout_p <= 1.0:
            raise ConfigError(f"flow.train.dropout_p: must lie in [0, 1], got {flow_train.dropout_p}")
        integrator = _build(IntegratorConfig, merged["integrator"], "integrator")
        analysis = _build(AnalysisConfig, merged["analysis"], "analysis")
        cfg = cls(exp, merged["seed"], str(merged["output_dir"]), dataset, float(test_fraction),
                  vae, flow_model, flow_train, integrator, analysis)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        a = self.analysis
        n_test = int(round(self.dataset.n_samples * self.test_fraction))
        if a.n_eval > n_test:
            raise ConfigError(f"analysis.n_eval: {a.n_eval} exceeds the {n_test} held-out samples")
        if a.n_train >= a.n_eval:
            raise ConfigError(f"analysis.n_train: must be below analysis.n_eval ({a.n_eval})")
        if a.probe_points < 2 or (self.integrator.n_steps % (a.probe_points - 1)):
            raise ConfigError(
                f"integrator.n_steps: {self.integrator.n_steps} must be a multiple of "
                f"analysis.probe_points - 1 = {a.probe_points - 1} so probe times lie on the step grid"
            )
        latent = 2 if self.vae is None else self.vae.latent_dim
        if self.flow_model.latent_dim != latent:
            raise ConfigError(f"flow.model.latent_dim: must equal the data/latent dimension {latent}")
        n_classes = len(self.dataset.means) if self.experiment == "gaussians2d" else self.dataset.n_classes
        if self.flow_model.n_classes != n_classes:
            raise ConfigError(f"flow.model.n_classes: must equal the dataset's {n_classes} classes")
        want_cont = 0 if self.experiment == "gaussians2d" else 2
        if self.flow_model.cont_dim != want_cont:
            raise ConfigError(
                f"flow.model.cont_dim: must be {want_cont} "
                + ("(no side factors)" if want_cont == 0 else "(max red and green; blue is withheld)")
            )
        if self.experiment == "factors" and not 0 <= a.isolation_reference_class < n_classes:
            raise ConfigError("analysis.isolation_reference_class: not a valid class id")
        if any(s <= 0 for s in a.roundtrip_steps):
            raise ConfigError("analysis.roundtrip_steps: entries must be positive")

    def to_dict(self) -> dict:
        ds = dataclasses.asdict(self.dataset)
        if "means" in ds:
            ds["means"] = [list(m) for m in ds["means"]]
        ds["test_fraction"] = self.test_fraction
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": ds,
            "vae": "none" if self.vae is None else dataclasses.asdict(self.vae),
            "flow": {"model": dataclasses.asdict(self.flow_model),
                     "train": dataclasses.asdict(self.flow_train)},
            "integrator": dataclasses.asdict(self.integrator),
            "analysis": dataclasses.asdict(self.analysis),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def echo(self) -> dict:
        """Resolved config without ``output_dir``, so artifacts do not depend on where they live."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def digest(self) -> str:
        """sha256 of the resolved config, independent of ``output_dir``."""
        return hashlib.sha256(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()

    def provenance(self) -> str:
        return f"latentflow experiment={self.experiment} seed={self.seed} config_sha256={self.digest()}"


def load_config(path, seed: int | None = None, out: str | None = None,
                smoke: bool = False) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = dict(raw)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return ExperimentConfig.from_dict(raw, smoke=smoke)
