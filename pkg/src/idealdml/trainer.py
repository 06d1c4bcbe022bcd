"""Training mechanisms (data augmentation, multiple models, IDEAL), Adam, and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_tensors, save_tensors
from .datasets import Dataset
from .losses import LossConfig, base_loss, domain_losses, pair_masks
from .model import ConfigError, EmbeddingModel, ModelConfig, build_model, embed
from .retrieval import evaluate
from .sampling import PKConfig, PKSampler
from .transforms import DataAugConfig, DomainSet, augment_batch, rotate_each, transform_batch

log = logging.getLogger(__name__)

MODES = ("DataAug", "MultiModel", "IDEAL")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class MechanismConfig:
    mode: str = "IDEAL"
    domains: DomainSet = DomainSet()
    split_heads: bool = True
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 20
    seed: int = 0
    sampler: PKConfig = PKConfig()
    data_aug: DataAugConfig = DataAugConfig()
    model: ModelConfig = ModelConfig()
    eval_domains: DomainSet = DomainSet()
    eval_ks: tuple[int, ...] = (1, 2, 4, 8)
    multimodel_dim: str = "full"  # MultiModel embedding width per model: "full" (d) or "split" (d/k)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", "mechanism.mode")
        if self.split_heads and self.mode != "IDEAL":
            raise ConfigError("split_heads is only meaningful with mode IDEAL", "mechanism.split_heads")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "train.epochs")
        if self.multimodel_dim not in ("full", "split"):
            raise ConfigError("multimodel_dim must be 'full' or 'split'", "mechanism.multimodel_dim")

    def model_configs(self) -> list[ModelConfig]:
        """Architecture of every model the mechanism trains."""
        k = len(self.domains)
        if self.mode == "IDEAL":
            cfg = replace(self.model, num_domains=k, split_heads=self.split_heads)
            return [cfg]
        single = replace(self.model, num_domains=1, split_heads=False)
        if self.mode == "MultiModel" and self.multimodel_dim == "split":
            if self.model.embedding_dim % k:
                raise ConfigError(f"embedding_dim {self.model.embedding_dim} is not divisible by {k} models",
                                  "model.embedding_dim")
            single = replace(single, embedding_dim=self.model.embedding_dim // k)
        return [single] * (k if self.mode == "MultiModel" else 1)

    def model_seeds(self) -> list[int]:
        return [self.seed + i for i in range(len(self.model_configs()))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = list(self.domains.rotations)
        d["eval_domains"] = list(self.eval_domains.rotations)
        d["model"] = self.model.to_dict()
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MechanismConfig":
        return cls(
            mode=d["mode"],
            domains=DomainSet(tuple(d["domains"])),
            split_heads=d["split_heads"],
            loss=LossConfig(**d["loss"]),
            optimizer=OptimizerConfig(**d["optimizer"]),
            epochs=d["epochs"],
            seed=d["seed"],
            sampler=PKConfig(**d["sampler"]),
            data_aug=DataAugConfig(**d["data_aug"]),
            model=ModelConfig.from_dict(d["model"]),
            eval_domains=DomainSet(tuple(d["eval_domains"])),
            eval_ks=tuple(d["eval_ks"]),
            multimodel_dim=d.get("multimodel_dim", "full"),
        )


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[tuple[str, ad.Tensor]], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta), in place.

    A missing gradient counts as zero. Any non-finite gradient aborts the
    step before anything is modified.
    """
    grads = [np.zeros_like(p.data) if g is None else g for (_, p), g in zip(params, grads)]
    for (name, _), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    state.t += 1
    c1, c2 = 1.0 - beta1**state.t, 1.0 - beta2**state.t
    for (name, p), g in zip(params, grads):
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * ((m / c1) / (np.sqrt(v / c2) + eps) + wd * p.data)
    return state


class Adam:
    def __init__(self, model: EmbeddingModel, cfg: OptimizerConfig):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        params = self.model.parameters()
        c = self.cfg
        adam_step(params, [p.grad for _, p in params], self.state, c.learning_rate, c.weight_decay,
                  c.beta1, c.beta2, c.eps)
        self.model.zero_grad()


# ---------------------------------------------------------------------------
# single training steps
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    domain_losses: list[float] = field(default_factory=list)
    cross_domain_pairs: int = 0


def cross_domain_pair_count(labels, domain_ids) -> int:
    """Positive plus negative pairs whose two members come from different domains."""
    pos, neg = pair_masks(labels)
    d = np.asarray(domain_ids)
    cross = d[:, None] != d[None, :]
    return int(((pos | neg) & cross).sum())


def _backward_and_step(model: EmbeddingModel, opt: Adam, loss: ad.Tensor, tape: ad.Tape) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    model.zero_grad()
    if loss.requires_grad:
        tape.backward(loss)
    opt.step()
    return value


def train_step_dataaug(model: EmbeddingModel, opt: Adam, batch: np.ndarray, labels, domains: DomainSet,
                       loss_cfg: LossConfig, rng: np.random.Generator) -> StepResult:
    """Rotate every image by a random domain transform and apply one loss to the mixed batch."""
    if len(domains) == 1:
        rots = np.full(batch.shape[0], domains.rotations[0])
    else:
        rots = rng.choice(np.asarray(domains.rotations), size=batch.shape[0])
    mixed = rotate_each(batch, rots)
    with ad.Tape() as tape:
        loss = base_loss(embed(model, mixed, 0), labels, loss_cfg)
    value = _backward_and_step(model, opt, loss, tape)
    return StepResult(value, [value], cross_domain_pair_count(labels, rots))


def train_step_multimodel(models: Sequence[EmbeddingModel], opts: Sequence[Adam], batch: np.ndarray, labels,
                          domains: DomainSet, loss_cfg: LossConfig) -> StepResult:
    """Model ``i`` sees only domain ``i`` and takes its own optimizer step."""
    if len(models) != len(domains):
        raise ConfigError(f"{len(models)} models for {len(domains)} domains", "mechanism.domains")
    values = []
    for model, opt, rot in zip(models, opts, domains):
        with ad.Tape() as tape:
            loss = base_loss(embed(model, transform_batch(batch, rot), 0), labels, loss_cfg)
        values.append(_backward_and_step(model, opt, loss, tape))
    return StepResult(float(sum(values)), values, 0)


def train_step_ideal(model: EmbeddingModel, opt: Adam, batch: np.ndarray, labels, domains: DomainSet,
                     loss_cfg: LossConfig) -> StepResult:
    """Sum of independent per-domain losses, one optimizer step on the shared parameters."""
    with ad.Tape() as tape:
        terms = domain_losses(model, batch, labels, domains, loss_cfg)
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    parts = [t.item() for t in terms]
    value = _backward_and_step(model, opt, total, tape)
    return StepResult(value, parts, 0)


# ---------------------------------------------------------------------------
# runs and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    config: MechanismConfig
    models: list[EmbeddingModel]
    optimizers: list[Adam]
    history: list[dict] = field(default_factory=list)

    @property
    def epochs_done(self) -> int:
        return len(self.history)

    @property
    def eval_target(self):
        return self.models if self.config.mode == "MultiModel" else self.models[0]


def init_run(cfg: MechanismConfig) -> TrainRun:
    models = [build_model(mc, s) for mc, s in zip(cfg.model_configs(), cfg.model_seeds())]
    return TrainRun(cfg, models, [Adam(m, cfg.optimizer) for m in models])


def save_run(run: TrainRun, path) -> Path:
    tensors = {}
    for j, (model, opt) in enumerate(zip(run.models, run.optimizers)):
        for name, p in model.parameters():
            tensors[f"model{j}/{name}"] = p.data
            if name in opt.state.m:
                tensors[f"model{j}/adam.m/{name}"] = opt.state.m[name]
                tensors[f"model{j}/adam.v/{name}"] = opt.state.v[name]
    meta = {
        "kind": "train-run",
        "mechanism": run.config.to_dict(),
        "model_configs": [m.config.to_dict() for m in run.models],
        "adam_steps": [o.state.t for o in run.optimizers],
        "epochs_done": run.epochs_done,
    }
    return save_tensors(path, tensors, meta)


def load_run(path, history: list[dict] | None = None) -> TrainRun:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "train-run":
        raise ValueError(f"{path} is not a training checkpoint")
    cfg = MechanismConfig.from_dict(meta["mechanism"])
    run = init_run(cfg)
    for j, (model, opt) in enumerate(zip(run.models, run.optimizers)):
        prefix = f"model{j}/"
        model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        opt.state.t = meta["adam_steps"][j]
        for name, _ in model.parameters():
            if f"{prefix}adam.m/{name}" in tensors:
                opt.state.m[name] = tensors[f"{prefix}adam.m/{name}"]
                opt.state.v[name] = tensors[f"{prefix}adam.v/{name}"]
    run.history = list(history or [])
    return run


def run_epoch(run: TrainRun, train: Dataset, epoch: int, debug: bool = False) -> dict:
    cfg = run.config
    rng = np.random.default_rng([cfg.seed, epoch])
    sampler = PKSampler(train.labels, cfg.sampler)
    losses, parts, cross = [], [], 0
    for idx in sampler.epoch(rng):
        batch = augment_batch(train.images[idx], cfg.data_aug, rng)
        labels = train.labels[idx]
        if cfg.mode == "DataAug":
            res = train_step_dataaug(run.models[0], run.optimizers[0], batch, labels, cfg.domains, cfg.loss, rng)
        elif cfg.mode == "MultiModel":
            res = train_step_multimodel(run.models, run.optimizers, batch, labels, cfg.domains, cfg.loss)
        else:
            res = train_step_ideal(run.models[0], run.optimizers[0], batch, labels, cfg.domains, cfg.loss)
        losses.append(res.loss)
        parts.append(res.domain_losses)
        cross += res.cross_domain_pairs
    record = {
        "epoch": epoch + 1,
        "mechanism": cfg.mode,
        "split_heads": cfg.split_heads,
        "batches": len(losses),
        "loss": float(np.mean(losses)),
        "domain_loss": [float(v) for v in np.mean(parts, axis=0)],
    }
    if debug:
        record["cross_domain_pairs"] = cross
    return record


def evaluation_record(run: TrainRun, test: Dataset) -> dict:
    cfg = run.config
    reports = evaluate(run.eval_target, test, cfg.eval_domains, cfg.eval_ks)
    rec = {f"R@1/{k}": r.recall[1] for k, r in reports.items() if k != "ensemble"}
    for k, v in reports["ensemble"].recall.items():
        rec[f"ensemble/R@{k}"] = v
    return rec


def train(cfg: MechanismConfig, train_set: Dataset, test_set: Dataset | None = None, out_dir=None,
          resume: bool = False, debug: bool = False, max_epochs: int | None = None) -> TrainRun:
    """Run (or continue) ``cfg.epochs`` epochs, evaluating and checkpointing after each.

    Every epoch draws from its own generator seeded by ``(seed, epoch)``, so a
    run resumed from a checkpoint reproduces the uninterrupted run exactly.
    ``max_epochs`` stops early after that many epochs in total (used to
    simulate interruption).
    """
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint" if out else None
    hist_path = out / "history.jsonl" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if resume and ckpt and ckpt.with_name("checkpoint.json").exists():
        history = [json.loads(line) for line in hist_path.read_text().splitlines() if line.strip()] \
            if hist_path.exists() else []
        run = load_run(ckpt, history)
        # the epoch budget may grow: nothing in an epoch depends on the total
        if replace(run.config, epochs=cfg.epochs) != cfg:
            raise ConfigError("checkpoint was written by a different configuration", "train.resume")
        run.config = cfg
    else:
        run = init_run(cfg)
        if out:
            hist_path.write_text("")
            save_run(run, ckpt)

    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for epoch in range(run.epochs_done, stop):
        t0 = time.perf_counter()
        try:
            record = run_epoch(run, train_set, epoch, debug=debug)
        except DivergenceError:
            log.error("run diverged in epoch %d; keeping %d completed epochs", epoch + 1, run.epochs_done)
            raise
        if test_set is not None:
            record.update(evaluation_record(run, test_set))
        record["seconds"] = round(time.perf_counter() - t0, 3) if debug else None
        record = {k: v for k, v in record.items() if v is not None}
        run.history.append(record)
        log.info("epoch %d/%d loss %.4f %s", epoch + 1, cfg.epochs, record["loss"],
                 " ".join(f"{k}={v:.3f}" for k, v in record.items() if k.startswith(("R@1", "ensemble/R@1"))))
        if out:
            save_run(run, ckpt)
            with open(hist_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return run
