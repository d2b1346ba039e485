"""Shading-ratio regressors and the asymmetric surplus loss.

Two model families predict the optimal shading ratio from the hashed
one-hot features:

* ``FmModel`` -- second-order factorization machine: global bias, per-index
  weight, and a K-dimensional embedding per index.  Pairwise interactions
  are scored through the dot products of embeddings; the forward pass uses
  the linear-time identity

      sum_{i<j} x_i x_j <v_i, v_j>
          = 0.5 * sum_k [ (sum_i x_i v_ik)^2 - sum_i x_i^2 v_ik^2 ]

  so a prediction costs O(active * K).

* ``LinearModel`` -- the same without the pairwise term.

Both are trained by minibatch SGD with per-coordinate adaptive learning
rates (accumulated squared gradients) on the asymmetric squared loss

    loss(y, phi, alpha) = (y - phi)^2 * (1 + alpha)   if phi < y   (bid lost)
                          (y - phi)^2 * (1 - alpha)   otherwise    (bid won)

where under-predicting the ratio means the shaded bid falls below the
minimum bid to win, i.e. the auction is lost.  The per-example ``alpha``
is the normalized achievable surplus floored by the operator knob
``gamma``:

    alpha = min(1, max((unshaded - min_bid_to_win) / unshaded, gamma))

With alpha = 0 the loss reduces to plain squared error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .encoding import EncoderConfig, SparseFeatureVector, encode, encode_dataset
from .records import AuctionRecord, target_ratio

# Served ratios are clamped to [RATIO_FLOOR, 1]: decrease-only shading with
# a guard against degenerate near-zero bids.
RATIO_FLOOR = 0.01

ModelKind = Literal["fm", "linear"]


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries epoch and learning rate."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate}); "
            "lower the learning rate or check the input data"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class PredictionError(RuntimeError):
    """A model produced a non-finite prediction."""


@dataclass(frozen=True, slots=True)
class AsymLossConfig:
    """Asymmetry floor gamma.

    The loss itself accepts any per-example alpha in [0, 1]; gamma only
    floors it.  The closed interval [0, 1] is allowed so the gamma sweep
    can include both endpoints.
    """

    gamma: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Optimizer settings (per-coordinate adaptive SGD)."""

    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 256
    l2_w: float = 1e-6
    l2_v: float = 1e-6
    init_scale: float = 0.01
    embed_dim: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be > 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")


def example_alpha(record: AuctionRecord, cfg: AsymLossConfig) -> float:
    """Per-example asymmetry: normalized optimal surplus floored by gamma."""
    surplus_norm = (record.unshaded_bid - record.min_bid_to_win) / record.unshaded_bid
    surplus_norm = min(max(surplus_norm, 0.0), 1.0)
    return min(1.0, max(surplus_norm, cfg.gamma))


def asym_loss(y: float, phi: float, alpha: float) -> float:
    """Asymmetric squared loss; (1 + alpha) weight on lost bids (phi < y)."""
    d = y - phi
    sq = d * d
    return sq * (1.0 + alpha) if phi < y else sq * (1.0 - alpha)


def asym_loss_grad(y: float, phi: float, alpha: float) -> float:
    """d(asym_loss)/d(phi); 0 at phi == y (subgradient choice)."""
    if phi == y:
        return 0.0
    d = y - phi
    weight = (1.0 + alpha) if phi < y else (1.0 - alpha)
    return -2.0 * d * weight


@dataclass
class LinearModel:
    """Bias plus per-index weights over the hashed feature space."""

    w0: float
    w: np.ndarray
    encoder: EncoderConfig

    kind: str = field(default="linear", init=False, repr=False)

    def score_indices(self, indices: np.ndarray) -> float:
        return float(self.w0 + self.w[indices].sum())

    def score_matrix(self, index_matrix: np.ndarray) -> np.ndarray:
        return self.w0 + self.w[index_matrix].sum(axis=1)

    def predict(self, x: SparseFeatureVector) -> float:
        return linear_predict(self, x)

    def raw_ratios(self, records: Sequence[AuctionRecord]) -> np.ndarray:
        return self.score_matrix(encode_dataset(records, self.encoder))

    def quantized(self) -> "LinearModel":
        """Round parameters through float32, as the model file stores them."""
        return LinearModel(
            w0=float(np.float32(self.w0)),
            w=self.w.astype(np.float32).astype(np.float64),
            encoder=self.encoder,
        )


@dataclass
class FmModel:
    """Factorization machine: bias, weights, and K-dim embeddings."""

    w0: float
    w: np.ndarray
    V: np.ndarray
    encoder: EncoderConfig

    kind: str = field(default="fm", init=False, repr=False)

    @property
    def embed_dim(self) -> int:
        return self.V.shape[1]

    def score_indices(self, indices: np.ndarray) -> float:
        rows = self.V[indices]
        sums = rows.sum(axis=0)
        pair = 0.5 * float((sums * sums - (rows * rows).sum(axis=0)).sum())
        return float(self.w0 + self.w[indices].sum() + pair)

    def score_matrix(self, index_matrix: np.ndarray) -> np.ndarray:
        rows = self.V[index_matrix]  # (n, m, K)
        sums = rows.sum(axis=1)
        pair = 0.5 * ((sums * sums).sum(axis=1) - (rows * rows).sum(axis=(1, 2)))
        return self.w0 + self.w[index_matrix].sum(axis=1) + pair

    def predict(self, x: SparseFeatureVector) -> float:
        return fm_predict(self, x)

    def raw_ratios(self, records: Sequence[AuctionRecord]) -> np.ndarray:
        return self.score_matrix(encode_dataset(records, self.encoder))

    def quantized(self) -> "FmModel":
        """Round parameters through float32, as the model file stores them."""
        return FmModel(
            w0=float(np.float32(self.w0)),
            w=self.w.astype(np.float32).astype(np.float64),
            V=self.V.astype(np.float32).astype(np.float64),
            encoder=self.encoder,
        )


def _check_range(model, indices: np.ndarray) -> None:
    size = model.w.shape[0]
    if len(indices) and (indices.min() < 0 or indices.max() >= size):
        raise ValueError(
            f"feature index out of model range [0, {size}): model/encoder mismatch"
        )


def fm_predict(model: FmModel, x: SparseFeatureVector) -> float:
    """Forward pass over the active indices (one-hot values)."""
    _check_range(model, x.indices)
    return model.score_indices(x.indices)


def linear_predict(model: LinearModel, x: SparseFeatureVector) -> float:
    _check_range(model, x.indices)
    return model.score_indices(x.indices)


def clamp_ratio(prediction: float) -> float:
    """Served shading ratio: clamp to [RATIO_FLOOR, 1]."""
    return min(max(prediction, RATIO_FLOOR), 1.0)


def shade(model, record: AuctionRecord) -> float:
    """Shaded bid for one record: clamp(prediction) * unshaded_bid.

    Always in (0, unshaded_bid].  Non-finite predictions raise
    ``PredictionError``; callers fall back to the unshaded bid.
    """
    pred = model.predict(encode(record, model.encoder))
    if not math.isfinite(pred):
        raise PredictionError(f"non-finite prediction {pred!r}")
    return clamp_ratio(pred) * record.unshaded_bid


@dataclass(frozen=True, slots=True)
class EpochStats:
    """Mean training losses for one epoch."""

    epoch: int
    asym_loss: float
    mse: float


@dataclass
class TrainResult:
    model: FmModel | LinearModel
    trace: list[EpochStats]


def training_targets(
    records: Sequence[AuctionRecord], loss_cfg: AsymLossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-record (target ratio, alpha) arrays."""
    bu = np.fromiter((r.unshaded_bid for r in records), dtype=np.float64, count=len(records))
    mb = np.fromiter((r.min_bid_to_win for r in records), dtype=np.float64, count=len(records))
    y = np.minimum(mb / bu, 1.0)
    surplus_norm = np.clip((bu - mb) / bu, 0.0, 1.0)
    alpha = np.minimum(1.0, np.maximum(surplus_norm, loss_cfg.gamma))
    return y, alpha


def train(
    records: Sequence[AuctionRecord],
    kind: ModelKind = "fm",
    *,
    encoder: EncoderConfig | None = None,
    train_cfg: TrainConfig | None = None,
    loss_cfg: AsymLossConfig | None = None,
) -> TrainResult:
    """Train a shading-ratio model on won-bid feedback.

    Deterministic for a fixed seed: the permutation, the embedding init,
    and every update run in a fixed order on one thread.  Weights start
    at zero; embeddings start from N(0, init_scale^2) so the FM begins as
    a linear model and grows interactions.  L2 is applied lazily to the
    coordinates touched by each minibatch, as usual for sparse one-hot
    data.
    """
    if len(records) == 0:
        raise ValueError("training set is empty")
    if kind not in ("fm", "linear"):
        raise ValueError(f"unknown model kind {kind!r}")
    encoder = encoder or EncoderConfig()
    cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or AsymLossConfig()

    X = encode_dataset(records, encoder)
    y, alpha = training_targets(records, loss_cfg)
    n, m = X.shape
    space = encoder.total_space
    K = cfg.embed_dim
    lr = cfg.learning_rate
    eps = 1e-8

    rng = np.random.default_rng(cfg.seed)
    w0 = 0.0
    acc_w0 = 0.0
    w = np.zeros(space)
    acc_w = np.zeros(space)
    if kind == "fm":
        V = rng.normal(0.0, cfg.init_scale, size=(space, K))
        acc_V = np.zeros((space, K))

    trace: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        mse_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            idx = X[batch]
            yb = y[batch]
            ab = alpha[batch]
            b = len(batch)

            lin = w0 + w[idx].sum(axis=1)
            if kind == "fm":
                rows = V[idx]
                sums = rows.sum(axis=1)
                pair = 0.5 * ((sums * sums).sum(axis=1) - (rows * rows).sum(axis=(1, 2)))
                phi = lin + pair
            else:
                phi = lin

            d = yb - phi
            weight = np.where(phi < yb, 1.0 + ab, 1.0 - ab)
            loss_sum += float((d * d * weight).sum())
            mse_sum += float((d * d).sum())

            # dL_mean/dphi per example
            g = (-2.0 * d * weight) / b

            g0 = float(g.sum())
            acc_w0 += g0 * g0
            w0 -= lr * g0 / (math.sqrt(acc_w0) + eps)

            uniq, inv = np.unique(idx.ravel(), return_inverse=True)
            gw = np.bincount(inv, weights=np.repeat(g, m), minlength=len(uniq))
            gw += cfg.l2_w * w[uniq]
            acc = acc_w[uniq] + gw * gw
            acc_w[uniq] = acc
            w[uniq] -= lr * gw / (np.sqrt(acc) + eps)

            if kind == "fm":
                contrib = g[:, None, None] * (sums[:, None, :] - rows)
                gV = np.zeros((len(uniq), K))
                np.add.at(gV, inv, contrib.reshape(-1, K))
                gV += cfg.l2_v * V[uniq]
                accv = acc_V[uniq] + gV * gV
                acc_V[uniq] = accv
                V[uniq] -= lr * gV / (np.sqrt(accv) + eps)

        mean_loss = loss_sum / n
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(epoch, lr)
        trace.append(EpochStats(epoch, mean_loss, mse_sum / n))

    if kind == "fm":
        model: FmModel | LinearModel = FmModel(w0=w0, w=w, V=V, encoder=encoder)
    else:
        model = LinearModel(w0=w0, w=w, encoder=encoder)
    return TrainResult(model=model, trace=trace)


def trace_csv(trace: Sequence[EpochStats]) -> str:
    """Per-epoch loss trace as a machine-readable CSV table."""
    lines = ["epoch,asym_loss,mse"]
    for s in trace:
        lines.append(f"{s.epoch},{s.asym_loss!r},{s.mse!r}")
    return "\n".join(lines) + "\n"
