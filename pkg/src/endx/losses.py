"""Training objectives: in-batch retrieval losses and geometry alignment.

The geometry of a batch of embeddings is summarised by row-stochastic
neighbour distributions ``p(col_j | row_i)`` obtained from a kernel.  The
dual tower is pulled towards the cross tower's distributions with a KL
divergence in four directions (a|q, q|a, q|q, a|a); the cross side acts as a
fixed teacher and receives no gradient from these terms.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nx
from .numeric import Tensor

DIRECTIONS = ("a|q", "q|a", "q|q", "a|a")
SAME_TYPE = ("q|q", "a|a")
KERNELS = ("inner", "gaussian")
ORIGINS = ("dual", "cross")
KL_FLOOR = 1e-12

DEFAULT_TARGETS = {"a|q": 0.5, "q|a": 0.5, "q|q": 1e4, "a|a": 1e4}


@dataclass
class EmbeddingBatch:
    """Aligned sentence embeddings: row i of ``questions`` matches row i of ``answers``."""

    questions: Tensor
    answers: Tensor
    origin: str = "dual"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")
        if self.questions.ndim != 2 or self.questions.shape != self.answers.shape:
            raise ValueError("questions and answers must be matching (B, d) matrices")
        if self.questions.shape[0] < 2:
            raise ValueError("in-batch negatives need a batch of at least 2 pairs")

    @property
    def size(self) -> int:
        return self.questions.shape[0]

    def detached(self) -> "EmbeddingBatch":
        return EmbeddingBatch(nx.detach(self.questions), nx.detach(self.answers), self.origin)

    def side(self, letter: str) -> Tensor:
        return self.questions if letter == "q" else self.answers


@dataclass
class ConditionalDistribution:
    probs: Tensor
    direction: str
    exclude_diagonal: bool


@dataclass
class GAMConfig:
    kernel: str = "inner"
    # sigma^2 per direction; the kernel receives 2 * sigma^2
    cross_widths: dict = field(default_factory=lambda: {d: 1.0 for d in DIRECTIONS})
    dual_widths: dict = field(default_factory=lambda: {d: 1.0 for d in DIRECTIONS})
    targets: dict = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    warmup_epochs: int = 5
    ablate: tuple = ()
    exclude_diagonal: bool = True

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        self.ablate = tuple(self.ablate)
        for name in self.ablate:
            if name not in DIRECTIONS:
                raise ValueError(f"unknown GAM term {name!r}; expected one of {DIRECTIONS}")
        for label, table in (("targets", self.targets), ("cross_widths", self.cross_widths),
                             ("dual_widths", self.dual_widths)):
            if set(table) != set(DIRECTIONS):
                raise ValueError(f"{label} must have exactly the keys {DIRECTIONS}")
        if any(v < 0 for v in self.targets.values()):
            raise ValueError("GAM term weights must be non-negative")
        if self.kernel == "gaussian" and any(
                v <= 0 for v in (*self.cross_widths.values(), *self.dual_widths.values())):
            raise ValueError("gaussian widths must be positive")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")

    @property
    def active(self) -> tuple:
        return tuple(d for d in DIRECTIONS if d not in self.ablate)

    def weights_at(self, epoch: int) -> dict:
        """Warmed-up weight of every active term at ``epoch`` (0-based)."""
        return {d: warmup_weight(epoch, self.warmup_epochs, self.targets[d]) for d in self.active}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablate"] = list(self.ablate)
        return out


@dataclass
class LossWeights:
    dual: float = 0.25
    cross: float = 0.25
    ga: float = 0.5

    def __post_init__(self):
        if min(self.dual, self.cross, self.ga) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def needs_cross(self) -> bool:
        return self.cross > 0 or self.ga > 0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- kernels


def inner_kernel(e_i, e_j) -> float:
    e_i, e_j = np.asarray(e_i, float), np.asarray(e_j, float)
    if e_i.shape != e_j.shape:
        raise ValueError("kernel inputs must have equal dimensions")
    return float(e_i @ e_j)


def gaussian_kernel(e_i, e_j, width: float) -> float:
    """exp(-||e_i - e_j||^2 / width); pass ``2 * sigma**2`` as the width."""
    if width <= 0:
        raise ValueError("gaussian kernel width must be positive")
    diff = np.asarray(e_i, float) - np.asarray(e_j, float)
    return math.exp(-float(diff @ diff) / width)


def kernel_matrix(rows: Tensor, cols: Tensor, kernel: str = "inner",
                  width: float | None = None) -> Tensor:
    if kernel == "inner":
        return rows @ nx.swapaxes(cols, 0, 1)
    if kernel == "gaussian":
        if width is None or width <= 0:
            raise ValueError("gaussian kernel width must be positive")
        n, d = rows.shape
        m = cols.shape[0]
        diff = nx.reshape(rows, (n, 1, d)) - nx.reshape(cols, (1, m, d))
        return nx.exp(nx.sum(diff * diff, axis=2) * (-1.0 / width))
    raise ValueError(f"unknown kernel {kernel!r}")


def conditional_distribution(rows: Tensor, cols: Tensor, kernel: str = "inner",
                             direction: str = "a|q", width: float | None = None,
                             exclude_diagonal: bool = True) -> ConditionalDistribution:
    """p[i, j] = exp(K(row_i, col_j)) / sum_k exp(K(row_i, col_k)).

    For same-type directions with ``exclude_diagonal`` the sum skips k = i and
    the diagonal is exactly zero.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if rows.shape[0] < 2 or rows.shape != cols.shape:
        raise ValueError("conditional distributions need matching batches of size >= 2")
    scores = kernel_matrix(rows, cols, kernel, width)
    exclude = exclude_diagonal and direction in SAME_TYPE
    mask = ~np.eye(rows.shape[0], dtype=bool) if exclude else None
    return ConditionalDistribution(nx.softmax_rows(scores, mask=mask), direction, exclude)


# ---------------------------------------------------------------- losses


def _in_batch_loss(batch: EmbeddingBatch) -> Tensor:
    scores = batch.questions @ nx.swapaxes(batch.answers, 0, 1)
    return -nx.mean(nx.diagonal(nx.log_softmax_rows(scores)))


def dual_loss(batch: EmbeddingBatch) -> Tensor:
    """Mean negative log-likelihood of each matched answer among the batch's answers."""
    if batch.origin != "dual":
        raise ValueError("dual_loss expects dual-tower embeddings")
    return _in_batch_loss(batch)


def cross_loss(batch: EmbeddingBatch) -> Tensor:
    if batch.origin != "cross":
        raise ValueError("cross_loss expects cross-tower embeddings")
    return _in_batch_loss(batch)


def kl_alignment(p_cross: ConditionalDistribution, p_dual: ConditionalDistribution) -> Tensor:
    """Batch-mean KL(p_cross || p_dual), summed over both indices and divided by B."""
    if p_cross.direction != p_dual.direction:
        raise ValueError(f"direction mismatch: {p_cross.direction} vs {p_dual.direction}")
    if p_cross.probs.shape != p_dual.probs.shape:
        raise ValueError(f"shape mismatch: {p_cross.probs.shape} vs {p_dual.probs.shape}")
    if p_cross.exclude_diagonal != p_dual.exclude_diagonal:
        raise ValueError("diagonal conventions differ")
    return nx.kl_terms(p_cross.probs, p_dual.probs, KL_FLOOR) * (1.0 / p_cross.probs.shape[0])


def alignment_term(dual: EmbeddingBatch, cross: EmbeddingBatch, direction: str,
                   cfg: GAMConfig) -> Tensor:
    given, target = direction[2], direction[0]
    teacher = cross.detached()

    def dist(batch, widths):
        width = 2.0 * widths[direction] if cfg.kernel == "gaussian" else None
        return conditional_distribution(batch.side(given), batch.side(target), cfg.kernel,
                                        direction, width, cfg.exclude_diagonal)

    return kl_alignment(dist(teacher, cfg.cross_widths), dist(dual, cfg.dual_widths))


def gam_loss(dual: EmbeddingBatch, cross: EmbeddingBatch, cfg: GAMConfig,
             weights: dict | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the active alignment terms, plus the terms themselves.

    ``weights`` defaults to the configured targets; ablated terms are skipped.
    """
    if dual.origin != "dual" or cross.origin != "cross":
        raise ValueError("gam_loss expects (dual, cross) batches")
    if dual.questions.shape[0] != cross.questions.shape[0]:
        raise ValueError("dual and cross batches are not aligned")
    weights = dict(cfg.targets if weights is None else weights)
    components = {}
    total = Tensor(np.zeros((), dtype=dual.questions.dtype))
    for direction in cfg.active:
        term = alignment_term(dual, cross, direction, cfg)
        components[direction] = term
        total = total + term * float(weights.get(direction, 0.0))
    return total, components


def total_loss(dual_batch: EmbeddingBatch, cross_batch: EmbeddingBatch | None,
               weights: LossWeights, gam_cfg: GAMConfig,
               gam_weights: dict | None = None) -> tuple[Tensor, dict]:
    """alpha_dual L_dual + alpha_cross L_cross + alpha_ga L_ga, with a per-term breakdown."""
    parts = {"dual": dual_loss(dual_batch)}
    loss = parts["dual"] * weights.dual
    if cross_batch is None:
        if weights.needs_cross:
            raise ValueError("cross embeddings are required when cross or ga weights are non-zero")
        return loss, parts
    parts["cross"] = cross_loss(cross_batch)
    parts["ga"], parts["terms"] = gam_loss(dual_batch, cross_batch, gam_cfg, gam_weights)
    loss = loss + parts["cross"] * weights.cross + parts["ga"] * weights.ga
    return loss, parts


def warmup_weight(epoch: float, warmup_epochs: int, target: float) -> float:
    """Linear ramp from 0 at epoch 0 to ``target`` at ``warmup_epochs``."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be >= 1")
    return min(epoch / warmup_epochs, 1.0) * target
