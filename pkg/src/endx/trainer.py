"""Joint training of the dual and cross towers with geometry alignment.

Each step runs both towers on the same aligned batch and minimises
``a_dual * L_dual + a_cross * L_cross + a_ga * L_ga``.  With ``a_cross`` and
``a_ga`` both zero the step degenerates to plain dual-encoder training and the
cross tower is never run.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import numeric as nx
from .aggregator import AggregatorConfig
from .cross_attention import CrossAttentionConfig
from .data import RetrievalDataset, batch_iter
from .encoders import EncoderConfig, Vocabulary, pad_batch
from .evaluation import MetricsReport, evaluate
from .losses import DIRECTIONS, EmbeddingBatch, GAMConfig, LossWeights, total_loss
from .model import EndxModel
from .numeric import OptimizerConfig, Tape

KEEP_POLICIES = ("best", "final")
ABLATION_ROWS = ("full", "-q|q", "-a|a", "-q|a", "-a|q", "dual-only")
LOG_TERMS = {"q|q": "l_qq", "a|a": "l_aa", "q|a": "l_qa", "a|q": "l_aq"}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    precision: str = "float32"
    keep: str = "best"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    cross: CrossAttentionConfig = field(default_factory=CrossAttentionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    gam: GAMConfig = field(default_factory=GAMConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.precision not in nx.PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(nx.PRECISIONS)}")
        if self.keep not in KEEP_POLICIES:
            raise ValueError(f"keep must be one of {KEEP_POLICIES}")

    @property
    def baseline(self) -> bool:
        return not self.weights.needs_cross

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in out.items():
            if hasattr(value, "to_dict"):
                out[key] = value.to_dict()
            elif key == "optimizer":
                out[key] = asdict(value)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        """Build from parsed JSON, rejecting unknown keys at every level."""
        sections = {"encoder": EncoderConfig, "aggregator": AggregatorConfig,
                    "cross": CrossAttentionConfig, "optimizer": OptimizerConfig,
                    "weights": LossWeights, "gam": GAMConfig}
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        _check_keys("config", raw, {f.name for f in fields(cls)})
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                kind = sections[key]
                if not isinstance(value, dict):
                    raise ValueError(f"config.{key} must be an object")
                _check_keys(f"config.{key}", value, {f.name for f in fields(kind)})
                value = dict(value)
                if key == "gam" and "ablate" in value:
                    value["ablate"] = tuple(value["ablate"])
                kwargs[key] = kind(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _check_keys(where: str, raw: dict, allowed: set) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")


@dataclass
class StepResult:
    loss: float
    components: dict
    gam_weights: dict
    lr: float


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_r1: float = -math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: EndxModel
    state: TrainState
    final_params: dict
    config: TrainConfig

    @property
    def log(self) -> list:
        return self.state.history


# ---------------------------------------------------------------- steps


def encode_batch(model: EndxModel, ds: RetrievalDataset, batch: list) -> tuple:
    q_ids, q_mask = pad_batch(model.token_ids([ds.questions[q] for q, _ in batch], "question"))
    a_ids, a_mask = pad_batch(model.token_ids([ds.answers[a] for _, a in batch], "answer"))
    return q_ids, q_mask, a_ids, a_mask


def forward_loss(model: EndxModel, inputs: tuple, cfg: TrainConfig, epoch: int):
    """Objective for one batch; call inside an active tape to get gradients."""
    q_ids, q_mask, a_ids, a_mask = inputs
    dual = EmbeddingBatch(model.dual_embed(q_ids, q_mask, "question"),
                          model.dual_embed(a_ids, a_mask, "answer"), "dual")
    gam_weights = cfg.gam.weights_at(epoch)
    cross = None
    if not cfg.baseline:
        rq, ra = model.cross_embed(q_ids, q_mask, a_ids, a_mask)
        cross = EmbeddingBatch(rq, ra, "cross")
    loss, parts = total_loss(dual, cross, cfg.weights, cfg.gam, gam_weights)
    return loss, parts, gam_weights


def train_step(model: EndxModel, ds: RetrievalDataset, batch: list, cfg: TrainConfig,
               epoch: int, step: int) -> StepResult:
    inputs = encode_batch(model, ds, batch)
    with Tape():
        loss, parts, gam_weights = forward_loss(model, inputs, cfg, epoch)
        names = model.dual_parameter_names() if cfg.baseline else model.params.names()
        grads = nx.gradient_of(loss, [(n, model.params[n]) for n in names])
    value = float(loss.data)
    components = _components(parts)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {components}")
    lr = nx.schedule_value(cfg.optimizer.schedule, step, cfg.optimizer.total_steps,
                           cfg.optimizer.lr)
    nx.optimizer_step(model.params, grads, cfg.optimizer, step)
    return StepResult(value, components, gam_weights, lr)


def _components(parts: dict) -> dict:
    out = {"l_dual": float(parts["dual"].data),
           "l_cross": float(parts["cross"].data) if "cross" in parts else None}
    terms = parts.get("terms", {})
    for direction in DIRECTIONS:
        out[LOG_TERMS[direction]] = float(terms[direction].data) if direction in terms else None
    return out


# ---------------------------------------------------------------- loops


def train(train_ds: RetrievalDataset, val_ds: RetrievalDataset, cfg: TrainConfig,
          vocab: Vocabulary | None = None, log: Callable[[dict], None] | None = None,
          progress=None) -> TrainResult:
    """Train for ``cfg.epochs`` and keep the epoch with the best validation R@1.

    Ties keep the earlier epoch.  ``log`` receives every step and epoch record.
    """
    if vocab is None:
        vocab = Vocabulary.build([*train_ds.questions.values(), *train_ds.answers.values()])
    if not val_ds.pairs:
        raise ValueError("validation split is empty")
    state = TrainState()

    def emit(record):
        state.history.append(record)
        if log is not None:
            log(record)

    with nx.precision(cfg.precision):
        model = EndxModel.initialize(vocab, cfg.encoder, cfg.aggregator, cfg.cross,
                                     seed=cfg.seed, dtype=cfg.precision)
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            for batch in batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch):
                result = train_step(model, train_ds, batch, cfg, epoch, state.step)
                emit({"step": state.step, "epoch": epoch, "loss": result.loss,
                      **result.components, "lr": result.lr,
                      "gam_weights": {d: result.gam_weights.get(d) for d in DIRECTIONS}})
                state.step += 1
            report = evaluate(model, val_ds)
            emit({"epoch": epoch, "val_mrr": report.mrr, "val_r1": report.recall[1],
                  "val_r5": report.recall[5]})
            if progress is not None:
                print(f"epoch {epoch}: val R@1 {report.recall[1]:.4f} "
                      f"MRR {report.mrr:.4f}", file=progress)
            if report.recall[1] > state.best_r1:
                state.best_r1, state.best_epoch = report.recall[1], epoch
                state.best_params = model.params.snapshot()
        final = model.params.snapshot()
        if cfg.keep == "best":
            model.params.restore(state.best_params)
    return TrainResult(model, state, final, cfg)


def ablation_configs(base: TrainConfig) -> dict:
    """The six configurations compared in the ablation table, same seed throughout."""
    rows = {}
    for name in ABLATION_ROWS:
        if name == "full":
            rows[name] = base
        elif name == "dual-only":
            rows[name] = replace(base, weights=replace(base.weights, cross=0.0, ga=0.0))
        else:
            gam = replace(base.gam, ablate=tuple(sorted({*base.gam.ablate, name[1:]})))
            rows[name] = replace(base, gam=gam)
    return rows


def ablation_matrix(train_ds: RetrievalDataset, val_ds: RetrievalDataset,
                    test_ds: RetrievalDataset, base: TrainConfig, seeds=(0,),
                    vocab: Vocabulary | None = None, progress=None) -> list[dict]:
    """One row per configuration with seed-averaged MRR, R@1 and R@5 on ``test_ds``."""
    if vocab is None:
        vocab = Vocabulary.build([*train_ds.questions.values(), *train_ds.answers.values()])
    table = []
    for name, cfg in ablation_configs(base).items():
        reports = []
        for seed in seeds:
            run = train(train_ds, val_ds, replace(cfg, seed=seed), vocab)
            reports.append(evaluate(run.model, test_ds))
            if progress is not None:
                print(f"{name} seed {seed}: R@1 {reports[-1].recall[1]:.4f}", file=progress)
        table.append(summarize(name, reports))
    return table


def summarize(name: str, reports: list[MetricsReport]) -> dict:
    return {"config": name,
            "mrr": float(np.mean([r.mrr for r in reports])),
            "r1": float(np.mean([r.recall[1] for r in reports])),
            "r5": float(np.mean([r.recall[5] for r in reports]))}

