"""The server-side meta-learner: stack per-edge embeddings into an
(n, N, width) matrix with an availability mask, convolve a (N/2, width/2)
kernel bank over the stack, and predict. Also provides the majority /
average voting baselines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .datasets import Dataset, EdgeAssignment
from .edge import EdgeArtifact, edge_predict_proba, extract_embeddings
from .metrics import MetricReport, classification_report, regression_report
from .seeding import derived_seed, rng_from
from .vae import Vae, fill


@dataclass
class EmbeddingMatrix:
    """Stacked embeddings plus provenance: mask True means the slot was
    received from the edge; False means it was filled in."""

    values: np.ndarray           # (n, N, width) float32
    mask: np.ndarray             # (n, N) bool
    sample_indices: np.ndarray   # (n,) dataset indices the rows map to
    split: str = "train"

    def __post_init__(self):
        n, n_edges, _ = self.values.shape
        if self.mask.shape != (n, n_edges):
            raise nn.ShapeMismatchError(f"mask {self.mask.shape} vs values {self.values.shape}")
        if len(self.sample_indices) != n:
            raise nn.ShapeMismatchError("sample_indices length mismatch")

    @property
    def n_edges(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class EnsembleConfig:
    n_edges: int
    feature_width: int
    task: str
    n_outputs: int                      # classes, or 1 for regression
    n_filters: int = 64
    hidden: int = 64
    kernel: Optional[tuple] = None      # default (N//2, width//2)
    stride: Optional[tuple] = None      # default half kernel, floored to >= 1
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0

    def resolved_kernel(self) -> tuple[int, int]:
        if self.kernel is not None:
            return tuple(self.kernel)
        if self.n_edges % 2 or self.feature_width % 2:
            warnings.warn("odd N or feature width: ensemble kernel floored to (N//2, width//2)")
        return (max(1, self.n_edges // 2), max(1, self.feature_width // 2))

    def resolved_stride(self) -> tuple[int, int]:
        if self.stride is not None:
            return tuple(self.stride)
        kh, kw = self.resolved_kernel()
        return (max(1, kh // 2), max(1, kw // 2))

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.task == "classification" else "mse"


def build_ensemble_dataset(edges: Sequence[EdgeArtifact], vaes: Optional[Sequence[Vae]],
                           assignment: EdgeAssignment, dataset: Dataset, *,
                           policy: str = "vae", split: str = "train",
                           fill_seed=0) -> EmbeddingMatrix:
    """Stack every edge's embeddings for all dataset rows.

    A slot (k, i) holds edge i's real embedding when the edge was assigned
    sample k for this split; otherwise it is filled per the policy. The mask
    records exactly which slots were received.
    """
    n = len(dataset)
    n_edges = len(edges)
    if policy == "vae" and (vaes is None or len(vaes) != n_edges):
        raise ValueError("need one VAE per edge for the vae policy")
    width = edges[0].feature_width
    values = np.zeros((n, n_edges, width), dtype=np.float32)
    mask = np.zeros((n, n_edges), dtype=bool)
    index_sets = assignment.train_indices if split == "train" else assignment.test_indices
    for i, art in enumerate(edges):
        if art.feature_width != width:
            raise nn.ShapeMismatchError(f"edge {i} feature width {art.feature_width} != {width}")
        idx = np.asarray(index_sets[i], dtype=np.int64)
        emb = extract_embeddings(art, dataset, idx)
        values[idx, i, :] = emb
        mask[idx, i] = True
    sample_indices = np.arange(n)
    filled = fill(policy, values, mask, vaes=vaes, sample_indices=sample_indices, seed=fill_seed)
    return EmbeddingMatrix(values=filled, mask=mask, sample_indices=sample_indices, split=split)


def make_ensemble_model(config: EnsembleConfig) -> nn.Model:
    kernel = config.resolved_kernel()
    stride = config.resolved_stride()
    specs = [
        nn.conv(kernel, config.n_filters, stride=stride),
        nn.relu(),
        nn.flatten(),
        nn.dense(config.hidden),
        nn.relu(),
        nn.dense(config.n_outputs),
    ]
    input_shape = (1, config.n_edges, config.feature_width)
    seed = derived_seed(config.seed, "ensemble-weights")
    return nn.Model(specs, input_shape, seed=seed, dtype=np.float32)


def _as_conv_input(values: np.ndarray) -> np.ndarray:
    n, n_edges, width = values.shape
    return values.reshape(n, 1, n_edges, width)


def train_ensemble(matrix: EmbeddingMatrix, labels, config: EnsembleConfig):
    """Train the meta-learner on a stacked matrix; returns (model, loss trace)."""
    y = np.asarray(labels)
    if len(y) != len(matrix.values):
        raise nn.ShapeMismatchError("labels do not align with the embedding matrix")
    model = make_ensemble_model(config)
    rng = rng_from(config.seed, "ensemble-shuffle")
    trace = nn.fit(model, _as_conv_input(matrix.values), y, loss=config.loss,
                   optimizer=nn.Adam(config.lr), epochs=config.epochs,
                   batch_size=config.batch_size, rng=rng,
                   n_classes=config.n_outputs if config.task == "classification" else None)
    return model, trace


def ensemble_logits(model: nn.Model, matrix: EmbeddingMatrix, batch: int = 512) -> np.ndarray:
    x = _as_conv_input(matrix.values)
    outs = [model.forward(x[s:s + batch]) for s in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape, dtype=np.float32)


def predict(model: nn.Model, matrix: EmbeddingMatrix, task: str = "classification") -> np.ndarray:
    """Class ids for classification, real values for regression. The mask is
    provenance metadata only; inference never reads it."""
    logits = ensemble_logits(model, matrix)
    if task == "classification":
        return logits.argmax(axis=1)
    return logits[:, 0]


def predict_proba(model: nn.Model, matrix: EmbeddingMatrix) -> np.ndarray:
    return nn.softmax(ensemble_logits(model, matrix))


def vote_baselines(edges: Sequence[EdgeArtifact], dataset: Dataset, indices) -> dict:
    """Majority vote (mode of per-edge argmax, ties to the lowest class) and
    average vote (argmax of the mean softmax) over the given samples."""
    if not edges:
        raise ValueError("need at least one edge")
    idx = np.asarray(indices, dtype=np.int64)
    probs = np.stack([edge_predict_proba(art, dataset, idx) for art in edges])  # (N, n, c)
    n_classes = probs.shape[2]
    votes = probs.argmax(axis=2)                                # (N, n)
    counts = np.zeros((len(idx), n_classes), dtype=np.int64)
    for e in range(votes.shape[0]):
        np.add.at(counts, (np.arange(len(idx)), votes[e]), 1)
    majority = counts.argmax(axis=1)                            # argmax takes lowest index on ties
    average = probs.mean(axis=0).argmax(axis=1)
    return {"majority": majority, "average": average}


def evaluate(predictions, truth, task: str, *, scores: Optional[np.ndarray] = None,
             n_classes: Optional[int] = None, bin_edges=None) -> MetricReport:
    if task == "classification":
        return classification_report(truth, predictions, scores=scores, n_classes=n_classes)
    if task == "regression":
        return regression_report(truth, predictions, bin_edges=bin_edges)
    raise ValueError(f"unknown task {task!r}")
