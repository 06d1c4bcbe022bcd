"""Experiment configuration files.

One YAML file describes a whole experiment. Top-level sections and their keys::

    name: ideal-ms                 # used for the default output directory
    dataset:
      path: data/glyphs            # an image folder, or
      synthetic: {num_base_shapes: 6, samples_per_class: 200, stripe_sigma: 0.2, seed: 0}
      image_size: 64               # folder datasets only
      channels: 1                  # folder datasets only
      test_per_class: 100          # cap on test items per class (null keeps all)
    mechanism: {mode: IDEAL, domains: [0, 1, 2, 3], split_heads: true, seed: 0,
                multimodel_dim: full}   # MultiModel width per model: full (d) or split (d/k)
    model: {embedding_dim: 128, conv_stages: [[16, 3, 2], [32, 3, 2], [64, 3, 2]]}
    loss: {kind: multi-similarity, ...}       # any LossConfig field
    optimizer: {learning_rate: 1.0e-3, weight_decay: 5.0e-4}
    sampler: {P: 8, K: 4}
    train: {epochs: 20, data_aug: {pad: 4, crop_size: 64, flip_prob: 0.5}}
    eval: {domains: [0, 1, 2, 3], ks: [1, 2, 4, 8]}
    output: {dir: runs/ideal-ms}

Every key is optional. Unknown keys are errors. A relative ``output.dir`` is
resolved against ``$IDEALDML_OUTPUT_ROOT`` when set, else the working
directory. Errors carry the file and line of the offending key.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .datasets import Dataset, GlyphConfig, generate_synthetic, load_image_folder, split_train_test, take_per_class
from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .sampling import PKConfig
from .trainer import MechanismConfig, OptimizerConfig
from .transforms import DataAugConfig, DomainSet

OUTPUT_ROOT_ENV = "IDEALDML_OUTPUT_ROOT"

SECTIONS = ("name", "dataset", "mechanism", "model", "loss", "optimizer", "sampler", "train", "eval", "output")
DATASET_KEYS = ("path", "synthetic", "image_size", "channels", "test_per_class")
MECHANISM_KEYS = ("mode", "domains", "split_heads", "seed", "multimodel_dim")
TRAIN_KEYS = ("epochs", "data_aug")
EVAL_KEYS = ("domains", "ks")
OUTPUT_KEYS = ("dir",)
MODEL_KEYS = ("input_shape", "conv_stages", "embedding_dim")


class ConfigFileError(ConfigError):
    """A configuration error located in a file."""

    def __init__(self, message: str, key: str | None = None, source: str | None = None, line: int | None = None):
        super().__init__(message, key)
        self.source = source
        self.line = line

    def __str__(self) -> str:
        where = self.source or "<config>"
        if self.line is not None:
            where += f":{self.line}"
        key = f" [{self.key}]" if self.key else ""
        return f"{where}:{key} {self.args[0]}"


# ---------------------------------------------------------------------------
# YAML with line numbers
# ---------------------------------------------------------------------------


def _node_lines(node, prefix: str, out: dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _node_lines(v, key, out)


def parse_yaml(text: str, source: str = "<config>") -> tuple[dict, dict[str, int]]:
    """Parse YAML text into (mapping, key-path -> 1-based line)."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigFileError(f"invalid YAML: {getattr(exc, 'problem', exc)}", None, source,
                              mark.line + 1 if mark else None) from None
    if data is None:
        return {}, {}
    if not isinstance(data, dict):
        raise ConfigFileError("top level must be a mapping", None, source, 1)
    lines: dict[str, int] = {}
    _node_lines(node, "", lines)
    return data, lines


def apply_override(data: dict, assignment: str) -> str:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested mapping; return the key path."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}", assignment)
    path, raw = assignment.split("=", 1)
    path = path.strip()
    parts = path.split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {path!r}", path)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"cannot parse override value {raw!r}", path) from None
    node = data
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{p!r} is not a section", path)
        node = nxt
    node[parts[-1]] = value
    return path


# ---------------------------------------------------------------------------
# typed conversion
# ---------------------------------------------------------------------------


def _as_float(v, key):
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}", key)
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            out = float(v)
        except ValueError:
            pass
        else:
            if math.isfinite(out):
                return out
    raise ConfigError(f"expected a number, got {v!r}", key)


def _as_int(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            return int(v)
        raise ConfigError(f"expected an integer, got {v!r}", key)
    return v


def _as_bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true or false, got {v!r}", key)
    return v


def _as_str(v, key):
    if not isinstance(v, str):
        raise ConfigError(f"expected a string, got {v!r}", key)
    return v


def _as_int_list(v, key):
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"expected a list of integers, got {v!r}", key)
    return tuple(_as_int(x, key) for x in v)


def _section(data: dict, name: str, allowed) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping", name)
    for k in sec:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})", f"{name}.{k}")
    return sec


def _build_dataclass(cls, values: dict, prefix: str, defaults=None):
    """Instantiate a flat frozen dataclass from a mapping, converting by the default's type."""
    base = defaults if defaults is not None else cls()
    names = [f.name for f in fields(cls)]
    kwargs = {}
    for k, v in values.items():
        key = f"{prefix}.{k}"
        if k not in names:
            raise ConfigError(f"unknown key {k!r} (allowed: {', '.join(names)})", key)
        current = getattr(base, k)
        if isinstance(current, bool):
            kwargs[k] = _as_bool(v, key)
        elif isinstance(current, int):
            kwargs[k] = _as_int(v, key)
        elif isinstance(current, float):
            kwargs[k] = _as_float(v, key)
        elif isinstance(current, str):
            kwargs[k] = _as_str(v, key)
        elif v is None:
            kwargs[k] = None
        else:
            kwargs[k] = _as_int(v, key)  # optional integer fields
    try:
        return replace(base, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), prefix) from None


# ---------------------------------------------------------------------------
# the experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    path: str | None = None
    synthetic: GlyphConfig | None = None
    image_size: int = 64
    channels: int = 1
    test_per_class: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(synthetic=GlyphConfig()))
    mechanism: MechanismConfig = MechanismConfig()
    output_dir: str | None = None
    source: str | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def output_path(self, override=None) -> Path:
        """Run directory: explicit override, else ``output.dir``, else ``runs/<name>``."""
        p = Path(override) if override is not None else Path(self.output_dir or f"runs/{self.name}")
        if not p.is_absolute():
            root = os.environ.get(OUTPUT_ROOT_ENV)
            p = Path(root) / p if root else Path.cwd() / p
        return p

    def with_mechanism(self, **changes) -> "ExperimentConfig":
        return replace(self, mechanism=replace(self.mechanism, **changes))

    def to_dict(self) -> dict:
        """Canonical mapping; ``from_mapping(to_dict())`` reproduces the config."""
        m = self.mechanism
        ds: dict[str, Any] = {"image_size": self.dataset.image_size, "channels": self.dataset.channels,
                              "test_per_class": self.dataset.test_per_class}
        if self.dataset.path is not None:
            ds["path"] = self.dataset.path
        if self.dataset.synthetic is not None:
            ds["synthetic"] = {f.name: getattr(self.dataset.synthetic, f.name) for f in fields(GlyphConfig)}
        md = m.model.to_dict()
        return {
            "name": self.name,
            "dataset": ds,
            "mechanism": {"mode": m.mode, "domains": list(m.domains.rotations), "split_heads": m.split_heads,
                          "seed": m.seed, "multimodel_dim": m.multimodel_dim},
            "model": {k: md[k] for k in MODEL_KEYS},
            "loss": {f.name: getattr(m.loss, f.name) for f in fields(LossConfig)},
            "optimizer": {f.name: getattr(m.optimizer, f.name) for f in fields(OptimizerConfig)},
            "sampler": {"P": m.sampler.P, "K": m.sampler.K},
            "train": {"epochs": m.epochs,
                      "data_aug": {f.name: getattr(m.data_aug, f.name) for f in fields(DataAugConfig)}},
            "eval": {"domains": list(m.eval_domains.rotations), "ks": list(m.eval_ks)},
            "output": {"dir": self.output_dir},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # datasets --------------------------------------------------------------

    def load_full_dataset(self) -> Dataset:
        if self.dataset.path is not None:
            return load_image_folder(self.dataset.path, self.dataset.image_size, self.dataset.channels)
        return generate_synthetic(self.dataset.synthetic)

    def load_splits(self) -> tuple[Dataset, Dataset]:
        """Class-disjoint (train, test); the test split is capped at ``test_per_class`` items per class."""
        train, test = split_train_test(self.load_full_dataset())
        if self.dataset.test_per_class is not None:
            test = take_per_class(test, self.dataset.test_per_class)
        return train, test


def _domain_set(v, key) -> DomainSet:
    try:
        return DomainSet(_as_int_list(v, key))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key) from None


def from_mapping(data: dict, check_paths: bool = True) -> ExperimentConfig:
    """Validate a parsed mapping and build the typed config. Raises :class:`ConfigError`."""
    for k in data:
        if k not in SECTIONS:
            raise ConfigError(f"unknown section {k!r} (allowed: {', '.join(SECTIONS)})", k)
    name = _as_str(data.get("name", "experiment"), "name")

    ds = _section(data, "dataset", DATASET_KEYS)
    path = ds.get("path")
    synth = ds.get("synthetic")
    if path is not None and synth is not None:
        raise ConfigError("give either dataset.path or dataset.synthetic, not both", "dataset.path")
    glyph = None
    if path is None:
        if synth is not None and not isinstance(synth, dict):
            raise ConfigError("dataset.synthetic must be a mapping", "dataset.synthetic")
        glyph = _build_dataclass(GlyphConfig, synth or {}, "dataset.synthetic")
    else:
        path = _as_str(path, "dataset.path")
        if check_paths and not Path(path).is_dir():
            raise ConfigError(f"dataset folder {path!r} does not exist", "dataset.path")
    tpc = ds.get("test_per_class")
    dataset = DatasetSpec(
        path=path,
        synthetic=glyph,
        image_size=_as_int(ds.get("image_size", 64), "dataset.image_size"),
        channels=_as_int(ds.get("channels", 1), "dataset.channels"),
        test_per_class=None if tpc is None else _as_int(tpc, "dataset.test_per_class"),
    )
    if dataset.channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3", "dataset.channels")
    if dataset.test_per_class is not None and dataset.test_per_class < 1:
        raise ConfigError("test_per_class must be positive", "dataset.test_per_class")

    mech = _section(data, "mechanism", MECHANISM_KEYS)
    mode = _as_str(mech.get("mode", "IDEAL"), "mechanism.mode")
    domains = _domain_set(mech.get("domains", [0, 1, 2, 3]), "mechanism.domains")
    split_heads = _as_bool(mech.get("split_heads", mode == "IDEAL"), "mechanism.split_heads")
    seed = _as_int(mech.get("seed", 0), "mechanism.seed")
    mm_dim = _as_str(mech.get("multimodel_dim", "full"), "mechanism.multimodel_dim")

    msec = _section(data, "model", MODEL_KEYS)
    image_shape = (dataset.channels, dataset.image_size, dataset.image_size) if path is not None else \
        (1, glyph.image_size, glyph.image_size)
    try:
        model = ModelConfig(
            input_shape=_as_int_list(msec.get("input_shape", image_shape), "model.input_shape"),
            conv_stages=tuple(_as_int_list(s, "model.conv_stages")
                              for s in msec.get("conv_stages", ModelConfig().conv_stages)),
            embedding_dim=_as_int(msec.get("embedding_dim", ModelConfig().embedding_dim), "model.embedding_dim"),
        )
    except TypeError:
        raise ConfigError("conv_stages must be a list of [out_channels, kernel, stride]", "model.conv_stages") from None
    if model.input_shape != image_shape:
        raise ConfigError(f"model.input_shape {list(model.input_shape)} does not match the dataset images "
                          f"{list(image_shape)}", "model.input_shape")

    loss = _build_dataclass(LossConfig, _section(data, "loss", [f.name for f in fields(LossConfig)]), "loss")
    opt = _build_dataclass(OptimizerConfig, _section(data, "optimizer", [f.name for f in fields(OptimizerConfig)]),
                           "optimizer")
    sampler = _build_dataclass(PKConfig, _section(data, "sampler", ("P", "K")), "sampler")

    tsec = _section(data, "train", TRAIN_KEYS)
    epochs = _as_int(tsec.get("epochs", 20), "train.epochs")
    aug_raw = tsec.get("data_aug") or {}
    if not isinstance(aug_raw, dict):
        raise ConfigError("train.data_aug must be a mapping", "train.data_aug")
    data_aug = _build_dataclass(DataAugConfig, aug_raw, "train.data_aug")
    if data_aug.crop_size is not None and data_aug.crop_size != image_shape[1]:
        raise ConfigError(f"crop_size must equal the image size {image_shape[1]} so rotations keep the geometry",
                          "train.data_aug.crop_size")

    esec = _section(data, "eval", EVAL_KEYS)
    eval_domains = _domain_set(esec.get("domains", [0, 1, 2, 3]), "eval.domains")
    ks = _as_int_list(esec.get("ks", [1, 2, 4, 8]), "eval.ks")
    if not ks or min(ks) < 1 or 1 not in ks:
        raise ConfigError("eval.ks must be positive and include 1", "eval.ks")

    if mode == "MultiModel" and eval_domains != domains:
        raise ConfigError("MultiModel evaluates each domain with its own model, so eval.domains must equal "
                          "mechanism.domains", "eval.domains")
    if mode == "IDEAL" and eval_domains != domains:
        raise ConfigError("IDEAL heads are tied to the training domains, so eval.domains must equal "
                          "mechanism.domains", "eval.domains")

    try:
        mechanism = MechanismConfig(mode=mode, domains=domains, split_heads=split_heads, loss=loss, optimizer=opt,
                                    epochs=epochs, seed=seed, sampler=sampler, data_aug=data_aug, model=model,
                                    eval_domains=eval_domains, eval_ks=tuple(sorted(set(ks))),
                                    multimodel_dim=mm_dim)
        mechanism.model_configs()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), "mechanism") from None
    # d mod k re-checked here for a clear message tied to the model key
    if split_heads and model.embedding_dim % len(domains):
        raise ConfigError(f"embedding_dim {model.embedding_dim} is not divisible by the {len(domains)} domains",
                          "model.embedding_dim")

    osec = _section(data, "output", OUTPUT_KEYS)
    out_dir = osec.get("dir")
    if out_dir is not None:
        out_dir = _as_str(out_dir, "output.dir")
    return ExperimentConfig(name=name, dataset=dataset, mechanism=mechanism, output_dir=out_dir,
                            raw=copy.deepcopy(data))


def _locate(exc: ConfigError, lines: dict[str, int], source: str) -> ConfigFileError:
    key = exc.key
    line = None
    probe = key
    while probe:
        if probe in lines:
            line = lines[probe]
            break
        probe = probe.rpartition(".")[0]
    return ConfigFileError(str(exc.args[0]), key, source, line)


def load_config(path=None, overrides=(), text: str | None = None, check_paths: bool = True) -> ExperimentConfig:
    """Read, override and validate a config file (or ``text``).

    Relative ``dataset.path`` values are taken relative to the config file.
    Raises :class:`ConfigFileError` with the file and line of the bad key.
    """
    source = str(path) if path is not None else "<config>"
    if text is None:
        if path is None:
            text = ""
        else:
            p = Path(path)
            if not p.is_file():
                raise ConfigFileError(f"config file {source} does not exist", None, source, None)
            text = p.read_text()
    data, lines = parse_yaml(text, source)
    override_keys = []
    for ov in overrides:
        try:
            override_keys.append(apply_override(data, ov))
        except ConfigError as exc:
            raise ConfigFileError(str(exc.args[0]), exc.key, "--set", None) from None
    ds = data.get("dataset")
    if path is not None and isinstance(ds, dict) and isinstance(ds.get("path"), str):
        dp = Path(ds["path"])
        if not dp.is_absolute():
            ds["path"] = str(Path(path).parent / dp)
    try:
        cfg = from_mapping(data, check_paths=check_paths)
    except ConfigError as exc:
        if exc.key and any(exc.key == k or exc.key.startswith(k + ".") or k.startswith(exc.key + ".")
                           for k in override_keys):
            raise ConfigFileError(str(exc.args[0]), exc.key, "--set", None) from None
        raise _locate(exc, lines, source) from None
    return replace(cfg, source=source)
