"""
Training objectives: Gaussian negative log-likelihood on log-variances, MSE,
symmetric InfoNCE, and the pretraining / fine-tuning mixtures.

Every function accepts tensors (gradients flow through) or plain sequences,
and returns a 0-dim torch tensor.
"""

from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateRow, LossError, NonFiniteInput

TensorLike = Union[torch.Tensor, Sequence[float], float]


def _tensor(values: TensorLike) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(values, dtype=torch.float64)


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteInput(f"{name} contains non-finite values")


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.07
    lambda_: float = 1.0
    alpha: float = 0.2

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature tau must be > 0, got {self.tau}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class PredictionBatch:
    targets: torch.Tensor
    means: torch.Tensor
    log_variances: torch.Tensor

    @classmethod
    def of(cls, targets: TensorLike, means: TensorLike, log_variances: TensorLike) -> "PredictionBatch":
        return cls(_tensor(targets), _tensor(means), _tensor(log_variances))

    def __post_init__(self):
        shapes = {tuple(self.targets.shape), tuple(self.means.shape), tuple(self.log_variances.shape)}
        if len(shapes) != 1:
            raise LossError(f"prediction batch fields have different shapes: {sorted(shapes)}")
        if self.targets.numel() == 0:
            raise LossError("prediction batch is empty")

    @property
    def size(self) -> int:
        return self.targets.numel()


@dataclass(frozen=True)
class EmbeddingBatch:
    modality_a: torch.Tensor
    modality_b: torch.Tensor

    @classmethod
    def of(cls, modality_a: TensorLike, modality_b: TensorLike) -> "EmbeddingBatch":
        return cls(_tensor(modality_a), _tensor(modality_b))

    def __post_init__(self):
        if self.modality_a.shape != self.modality_b.shape or self.modality_a.dim() != 2:
            raise LossError(
                f"embedding batches must be equal N x d matrices, got "
                f"{tuple(self.modality_a.shape)} and {tuple(self.modality_b.shape)}"
            )
        if self.modality_a.shape[0] == 0:
            raise LossError("embedding batch is empty")


def gaussian_nll(batch: PredictionBatch) -> torch.Tensor:
    """mean[(y - mu)^2 / (2 sigma^2) + log(sigma^2) / 2], from log-variances."""
    for name in ("targets", "means", "log_variances"):
        _check_finite(name, getattr(batch, name))
    residual = batch.targets - batch.means
    terms = 0.5 * residual.pow(2) * torch.exp(-batch.log_variances) + 0.5 * batch.log_variances
    return terms.mean()


def mse(targets: TensorLike, predictions: TensorLike) -> torch.Tensor:
    targets, predictions = _tensor(targets), _tensor(predictions)
    if targets.shape != predictions.shape or targets.numel() == 0:
        raise LossError("mse needs aligned non-empty sequences")
    _check_finite("targets", targets)
    _check_finite("predictions", predictions)
    return (targets - predictions).pow(2).mean()


def info_nce_symmetric(batch: EmbeddingBatch, tau: float = 0.07) -> torch.Tensor:
    """
    Symmetric contrastive loss over aligned rows.

    Rows are L2-normalized; logits are inner products divided by tau; the
    loss averages cross-entropy over rows and over columns.

    Raises:
        DegenerateRow: An embedding row has zero norm.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}")
    a, b = batch.modality_a, batch.modality_b
    _check_finite("modality_a", a)
    _check_finite("modality_b", b)
    for name, emb in (("modality_a", a), ("modality_b", b)):
        zero = (emb.norm(dim=1) == 0).nonzero().flatten().tolist()
        if zero:
            raise DegenerateRow(f"{name} rows {zero} have zero norm")

    a = F.normalize(a, dim=1)
    b = F.normalize(b, dim=1)
    logits = a @ b.T / tau
    labels = torch.arange(logits.shape[0])
    return 0.5 * F.cross_entropy(logits, labels) + 0.5 * F.cross_entropy(logits.T, labels)


def lumo_dual_head_mse(targets: TensorLike, graph_head: TensorLike, smiles_head: TensorLike) -> torch.Tensor:
    """mean[(l_graph - l)^2 + (l_smiles - l)^2] over two prediction heads."""
    targets = _tensor(targets)
    return mse(targets, graph_head) + mse(targets, smiles_head)


def pretrain_objective(cl: TensorLike, lumo_aux: TensorLike, weights: LossWeights = LossWeights()) -> torch.Tensor:
    cl, lumo_aux = _tensor(cl), _tensor(lumo_aux)
    return cl + weights.lambda_ * lumo_aux


def finetune_objective(mse_val: TensorLike, uq_val: TensorLike, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """(1 - alpha) * MSE + alpha * NLL."""
    mse_val, uq_val = _tensor(mse_val), _tensor(uq_val)
    return (1.0 - weights.alpha) * mse_val + weights.alpha * uq_val
