"""Dual-encoder answer retrieval trained with a cross-encoder teacher and geometry alignment."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import RetrievalDataset, batch_iter, build_reqa, dataset_stats, make_splits
from .estimator import BM25Retriever, ENDXRetriever
from .evaluation import (
    BM25,
    AnswerIndex,
    MetricsReport,
    bm25_rank,
    embed_corpus,
    evaluate,
    mrr,
    one_to_many_subset,
    rank_answers,
    recall_at_n,
    significance_test,
    similarity_matrix,
)
from .losses import GAMConfig, LossWeights, gam_loss, total_loss
from .model import EndxModel
from .trainer import TrainConfig, ablation_matrix, train

__all__ = [
    "AnswerIndex", "BM25", "BM25Retriever", "ENDXRetriever", "EndxModel", "GAMConfig",
    "LossWeights", "MetricsReport", "RetrievalDataset", "TrainConfig", "ablation_matrix",
    "batch_iter", "bm25_rank", "build_reqa", "dataset_stats", "embed_corpus", "evaluate",
    "gam_loss", "load_checkpoint", "make_splits", "mrr", "one_to_many_subset", "rank_answers",
    "recall_at_n", "save_checkpoint", "significance_test", "similarity_matrix", "total_loss",
    "train",
]
