"""Shared convolutional backbone with one or ``k`` split projection heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 64, 64)
    conv_stages: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    embedding_dim: int = 128
    num_domains: int = 4
    split_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_stages", tuple(tuple(int(v) for v in s) for s in self.conv_stages))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}", "model.input_shape")
        for s in self.conv_stages:
            if len(s) != 3 or min(s) < 1:
                raise ConfigError(f"conv stage must be (out_channels, kernel, stride), got {s}", "model.conv_stages")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive", "model.embedding_dim")
        if self.num_domains < 1:
            raise ConfigError("num_domains must be positive", "model.num_domains")
        if self.split_heads and self.embedding_dim % self.num_domains:
            raise ConfigError(
                f"split_heads needs embedding_dim divisible by num_domains "
                f"({self.embedding_dim} % {self.num_domains} != 0)",
                "model.embedding_dim",
            )

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.num_domains if self.split_heads else self.embedding_dim

    @property
    def num_heads(self) -> int:
        return self.num_domains if self.split_heads else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_stages"] = [list(s) for s in self.conv_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "input_shape": tuple(d["input_shape"]), "conv_stages": tuple(map(tuple, d["conv_stages"]))})


@dataclass
class EmbeddingModel:
    config: ModelConfig
    backbone: dict[str, Tensor] = field(default_factory=dict)
    heads: list[dict[str, Tensor]] = field(default_factory=list)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.backbone.items())
        for h in self.heads:
            out.extend(h.items())
        return out

    def head_parameters(self, domain_index: int) -> list[tuple[str, Tensor]]:
        return list(self.heads[self.head_index(domain_index)].items())

    def head_index(self, domain_index: int) -> int:
        if not 0 <= domain_index < self.config.num_domains:
            raise IndexError(f"domain_index {domain_index} outside [0, {self.config.num_domains})")
        return domain_index if self.config.split_heads else 0

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != t.shape:
                raise ad.ShapeError(f"parameter {name!r}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def clone(self) -> "EmbeddingModel":
        twin = build_model(self.config, 0)
        twin.load_state_dict(self.state_dict())
        return twin


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def build_model(config: ModelConfig, rng_seed: int) -> EmbeddingModel:
    """Deterministic He-uniform weights and zero biases."""
    rng = np.random.default_rng(rng_seed)
    model = EmbeddingModel(config)
    c_in = config.input_shape[0]
    for i, (c_out, k, _stride) in enumerate(config.conv_stages):
        model.backbone[f"backbone.conv{i}.weight"] = _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        model.backbone[f"backbone.conv{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    for h in range(config.num_heads):
        prefix = f"head{h}" if config.split_heads else "head"
        model.heads.append({
            f"{prefix}.weight": _he_uniform(rng, (c_in, config.head_dim), c_in),
            f"{prefix}.bias": Tensor(np.zeros(config.head_dim), requires_grad=True),
        })
    return model


def features(model: EmbeddingModel, batch) -> Tensor:
    """Backbone output: conv/relu stages then global average pooling."""
    x = ad.as_tensor(batch)
    cfg = model.config
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise ad.ShapeError(f"batch shape {x.shape} does not match model input {cfg.input_shape}")
    for i, (_c, k, stride) in enumerate(cfg.conv_stages):
        x = ad.conv2d(x, model.backbone[f"backbone.conv{i}.weight"], model.backbone[f"backbone.conv{i}.bias"],
                      stride=stride, padding=k // 2)
        x = ad.relu(x)
    return ad.global_avg_pool(x)


def project(model: EmbeddingModel, feats: Tensor, domain_index: int) -> Tensor:
    head = model.heads[model.head_index(domain_index)]
    weight, bias = head.values()
    return ad.l2_normalize(ad.affine(feats, weight, bias))


def embed(model: EmbeddingModel, batch, domain_index: int = 0) -> Tensor:
    """Unit-norm embeddings of ``batch`` through the head responsible for ``domain_index``."""
    model.head_index(domain_index)
    return project(model, features(model, batch), domain_index)


def save_model(model: EmbeddingModel, path, extra: dict | None = None, tensors: dict | None = None):
    state = dict(model.state_dict())
    if tensors:
        state.update(tensors)
    meta = {"model_config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    return save_tensors(path, state, meta)


def load_model(path) -> tuple[EmbeddingModel, dict, dict[str, np.ndarray]]:
    """Returns the model, the checkpoint metadata and any non-parameter tensors."""
    tensors, meta = load_tensors(path)
    model = build_model(ModelConfig.from_dict(meta["model_config"]), 0)
    model.load_state_dict(tensors)
    names = {n for n, _ in model.parameters()}
    return model, meta, {k: v for k, v in tensors.items() if k not in names}
