"""Experiment configuration: a YAML document with strictly validated sections.

Unknown keys, wrong types and out-of-range values raise :class:`ConfigError`
carrying the 1-based line of the offending node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .adapt import METHODS, AdaptationConfig
from .core import BiPromptError, InvalidInputError
from .evalbench import BiasSpec
from .objective import SIGNS, LossWeights

ENCODER_VARIANTS = ("planted_bias", "conv", "external")
SWEEP_KEYS = ("lambda1", "lambda2", "beta", "steps", "step_size", "orthogonality_sign")

# section -> key -> (accepted types, default)
_NUM = (int, float)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "dataset": {
        "synthetic": ((dict,), None),
        "directory": ((str,), None),
        "n": ((int,), 2000),
        "class_names": ((list,), ["landbird", "waterbird"]),
        "template": ((str,), "a photo of a {}."),
    },
    "dataset.synthetic": {
        "num_classes": ((int,), 2),
        "num_spurious": ((int,), 2),
        "rho": (_NUM, 0.95),
        "image_size": ((int,), 32),
        "foreground_size": ((int,), 16),
        "noise": (_NUM, 0.05),
        "contrast_jitter": (_NUM, 0.5),
        "seed": ((int,), 0),
        "pattern_seed": ((int,), 1234),
    },
    "encoder": {
        "variant": ((str,), "planted_bias"),
        "seed": ((int,), 0),
        "text_seed": ((int,), 0),
        "embed_dim": ((int,), 32),
        "object_gain": (_NUM, 1.0),
        "context_gain": (_NUM, 1.5),
        "objectness": (_NUM, 1.0),
        "checkpoint": ((str,), None),
    },
    "adaptation": {
        "methods": ((list,), ["vanilla", "seraser", "biprompt"]),
        "steps": ((int,), 1),
        "step_size": (_NUM, 0.1),
        "episodic": ((bool,), True),
        "seed": ((int,), 0),
        "tau": (_NUM, 100.0),
        "learn_scale": ((bool,), True),
        "alpha0": (_NUM, 0.9),
        "erase_grid": ((int,), 8),
        "erase_patches": ((int,), 4),
        "lambda1": (_NUM, 1.0),
        "lambda2": (_NUM, 0.1),
        "beta": (_NUM, 1.0),
        "orthogonality_sign": ((str,), "text_semantics"),
        "use_ce": ((bool,), True),
    },
    "report": {
        "out": ((str,), "runs/latest"),
        "workers": ((int,), 1),
        "failure_tolerance": (_NUM, 0.0),
        "save_states": ((bool,), False),
    },
    "sweep": {k: ((list,), None) for k in SWEEP_KEYS},
}
TOP_LEVEL = ("dataset", "encoder", "adaptation", "report", "sweep")


class ConfigError(BiPromptError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class DatasetConfig:
    spec: BiasSpec = field(default_factory=BiasSpec)
    directory: Optional[Path] = None
    n: int = 2000
    class_names: list[str] = field(default_factory=lambda: ["landbird", "waterbird"])
    template: str = "a photo of a {}."


@dataclass
class EncoderConfig:
    variant: str = "planted_bias"
    seed: int = 0
    text_seed: int = 0
    embed_dim: int = 32
    object_gain: float = 1.0
    context_gain: float = 1.5
    objectness: float = 1.0
    checkpoint: Optional[Path] = None


@dataclass
class ReportConfig:
    out: Path = Path("runs/latest")
    workers: int = 1
    failure_tolerance: float = 0.0
    save_states: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    alpha0: float = 0.9
    report: ReportConfig = field(default_factory=ReportConfig)
    sweep: dict[str, list] = field(default_factory=dict)

    def with_method(self, method: str) -> "ExperimentConfig":
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        return replace(self, methods=[method])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        ds = replace(self.dataset, spec=replace(self.dataset.spec, seed=seed))
        return replace(self, dataset=ds, adaptation=replace(self.adaptation, seed=seed))

    def with_out(self, out: str | Path) -> "ExperimentConfig":
        return replace(self, report=replace(self.report, out=Path(out)))

    def grid(self) -> list[dict[str, Any]]:
        """Cartesian product of the sweep lists, in key order of ``SWEEP_KEYS``."""
        keys = [k for k in SWEEP_KEYS if k in self.sweep]
        if not keys:
            raise InvalidInputError("sweep grid is empty")
        for k in keys:
            if not self.sweep[k]:
                raise InvalidInputError(f"sweep list {k!r} is empty")
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]

    def at_grid_point(self, point: dict[str, Any]) -> "ExperimentConfig":
        weight_keys = {"lambda1", "lambda2", "beta", "orthogonality_sign"}
        weights = replace(self.adaptation.weights, **{k: v for k, v in point.items() if k in weight_keys})
        adapt = replace(self.adaptation, weights=weights,
                        **{k: v for k, v in point.items() if k not in weight_keys})
        return replace(self, adaptation=adapt)


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _check_mapping(node: yaml.Node, section: str, source: str) -> dict[str, Any]:
    """Validate one mapping node against ``SCHEMA[section]``; return plain values."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"section '{section}' must be a mapping", _line(node), source)
    schema = SCHEMA[section]
    out: dict[str, Any] = {}
    for key_node, value_node in node.value:
        key = key_node.value
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in section '{section}'", _line(key_node), source)
        if key in out:
            raise ConfigError(f"duplicate key '{key}' in section '{section}'", _line(key_node), source)
        if section == "dataset" and key == "synthetic":
            out[key] = _check_mapping(value_node, "dataset.synthetic", source)
            continue
        value = yaml.SafeLoader("").construct_object(value_node, deep=True)
        types, _ = schema[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if value is None and schema[key][1] is None:
            ok = True
        if not ok:
            names = "/".join(t.__name__ for t in types)
            raise ConfigError(f"'{section}.{key}' must be {names}, got {value!r}", _line(value_node), source)
        out[key] = value
        out[f"__line__{key}"] = _line(value_node)
    return out


def _values(raw: dict[str, Any], section: str) -> dict[str, Any]:
    vals = {k: d for k, (_, d) in SCHEMA[section].items()}
    vals.update({k: v for k, v in raw.items() if not k.startswith("__line__")})
    return vals


def parse_config(text: str, source: str = "<config>", base_dir: Optional[Path] = None) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {exc}", mark.line + 1 if mark else None, source) from exc
    if root is None:
        root = yaml.MappingNode("tag:yaml.org,2002:map", [])
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("config must be a mapping of sections", _line(root), source)
    raw: dict[str, dict] = {}
    lines: dict[str, int] = {}
    for key_node, value_node in root.value:
        if key_node.value not in TOP_LEVEL:
            raise ConfigError(f"unknown section '{key_node.value}'", _line(key_node), source)
        raw[key_node.value] = _check_mapping(value_node, key_node.value, source)
        lines[key_node.value] = _line(key_node)
    base_dir = base_dir or Path.cwd()

    def err(section: str, key: str, msg: str) -> ConfigError:
        line = raw.get(section, {}).get(f"__line__{key}", lines.get(section))
        return ConfigError(msg, line, source)

    ds = _values(raw.get("dataset", {}), "dataset")
    syn_raw = raw.get("dataset", {}).get("synthetic") or {}
    syn = _values(syn_raw, "dataset.synthetic")
    try:
        spec = BiasSpec(**syn)
    except InvalidInputError as exc:
        raise ConfigError(f"invalid synthetic dataset: {exc}", lines.get("dataset"), source) from exc
    directory = None
    if ds["directory"] is not None:
        directory = (base_dir / ds["directory"]).resolve()
        if not directory.is_dir():
            raise err("dataset", "directory", f"dataset directory {directory} does not exist")
    if ds["n"] < spec.num_groups:
        raise err("dataset", "n", f"dataset.n must be >= {spec.num_groups}")
    names = [str(n) for n in ds["class_names"]]
    if len(names) != spec.num_classes and directory is None:
        raise err("dataset", "class_names", f"expected {spec.num_classes} class names, got {len(names)}")
    if ds["template"].count("{}") != 1:
        raise err("dataset", "template", "template must contain exactly one '{}'")
    dataset = DatasetConfig(spec, directory, ds["n"], names, ds["template"])

    en = _values(raw.get("encoder", {}), "encoder")
    if en["variant"] not in ENCODER_VARIANTS:
        raise err("encoder", "variant", f"encoder.variant must be one of {ENCODER_VARIANTS}")
    checkpoint = None
    if en["checkpoint"] is not None:
        checkpoint = (base_dir / en["checkpoint"]).resolve()
        if not checkpoint.is_file():
            raise err("encoder", "checkpoint", f"checkpoint {checkpoint} does not exist")
    if en["variant"] == "external" and checkpoint is None:
        raise err("encoder", "variant", "the external encoder needs encoder.checkpoint")
    if en["embed_dim"] < 2:
        raise err("encoder", "embed_dim", "encoder.embed_dim must be >= 2")
    encoder = EncoderConfig(en["variant"], en["seed"], en["text_seed"], en["embed_dim"],
                            float(en["object_gain"]), float(en["context_gain"]),
                            float(en["objectness"]), checkpoint)

    ad = _values(raw.get("adaptation", {}), "adaptation")
    methods = list(ad.pop("methods"))
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise err("adaptation", "methods", f"adaptation.methods must be a non-empty subset of {METHODS}")
    alpha0 = float(ad.pop("alpha0"))
    if not 0.0 < alpha0 < 1.0:
        raise err("adaptation", "alpha0", "adaptation.alpha0 must lie in (0, 1)")
    if ad["orthogonality_sign"] not in SIGNS:
        raise err("adaptation", "orthogonality_sign", f"orthogonality_sign must be one of {SIGNS}")
    wkeys = ("lambda1", "lambda2", "beta", "orthogonality_sign", "use_ce")
    try:
        weights = LossWeights(**{k: (float(ad[k]) if k in ("lambda1", "lambda2", "beta") else ad[k])
                                 for k in wkeys})
        adaptation = AdaptationConfig(
            steps=ad["steps"], step_size=float(ad["step_size"]), weights=weights,
            method=methods[-1], episodic=ad["episodic"], seed=ad["seed"], tau=float(ad["tau"]),
            learn_scale=ad["learn_scale"], erase_grid=ad["erase_grid"],
            erase_patches=ad["erase_patches"],
        )
    except InvalidInputError as exc:
        raise ConfigError(f"invalid adaptation settings: {exc}", lines.get("adaptation"), source) from exc
    if not 0 <= adaptation.erase_patches <= adaptation.erase_grid ** 2:
        raise err("adaptation", "erase_patches", "erase_patches must lie in [0, erase_grid^2]")

    rp = _values(raw.get("report", {}), "report")
    if rp["workers"] < 1:
        raise err("report", "workers", "report.workers must be >= 1")
    if not 0.0 <= rp["failure_tolerance"] <= 1.0:
        raise err("report", "failure_tolerance", "report.failure_tolerance must lie in [0, 1]")
    report = ReportConfig(Path(rp["out"]), rp["workers"], float(rp["failure_tolerance"]), rp["save_states"])

    sweep = {k: v for k, v in raw.get("sweep", {}).items() if not k.startswith("__line__") and v is not None}
    for k, values in sweep.items():
        for v in values:
            if k == "orthogonality_sign" and v not in SIGNS:
                raise err("sweep", k, f"sweep.{k} values must be in {SIGNS}")
            if k == "steps" and (not isinstance(v, int) or v < 0):
                raise err("sweep", k, "sweep.steps values must be integers >= 0")
            if k in ("lambda1", "lambda2", "beta", "step_size") and (
                not isinstance(v, _NUM) or isinstance(v, bool) or not math.isfinite(v) or v < 0
                or (k == "step_size" and v == 0)
            ):
                raise err("sweep", k, f"sweep.{k} values must be finite non-negative numbers")
    return ExperimentConfig(dataset, encoder, adaptation, methods, alpha0, report, sweep)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from exc
    return parse_config(text, source=str(path), base_dir=path.parent)
