"""
Surrogate property models.

A small torch MLP maps fingerprint features to a PCE mean and log-variance
(trained with the fine-tuning mixture of MSE and Gaussian NLL); point
regressors of the same shape without the variance head predict HOMO and LUMO.
Models are stored as versioned JSON documents.

Usage:
    spec = FeatureSpec()
    data = [(featurize(parse_smiles(s), spec), pce) for s, pce in rows]
    model = train(data, TrainConfig(epochs=50))
    out = predict_with_uncertainty(model, featurize(mol, spec))
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .database import atomic_write_text
from .errors import ConfigError, NonFiniteInput, NonFiniteLoss, PersistenceError, PredictorError, SpecMismatch
from .fingerprints import morgan_fingerprint
from .losses import LossWeights, PredictionBatch, finetune_objective, gaussian_nll, mse
from .retrieval import MoleculeRecord
from .sascore import SaScoreTable, load_sa_table, sa_score
from .smiles import MoleculeGraph, ring_info

logger = logging.getLogger(__name__)

MODEL_FORMAT = "osc-agent-regressor"
MODEL_VERSION = 1
TARGETS = ("pce", "homo", "lumo")

DESCRIPTORS: Dict[str, Callable[[MoleculeGraph], float]] = {
    "heavy_atoms": lambda mol: float(mol.heavy_atom_count),
    "rings": lambda mol: float(len(ring_info(mol).rings)),
}


# ─────────────────────── Features ────────────────────────────


@dataclass(frozen=True)
class FeatureSpec:
    radius: int = 2
    width: int = 2048
    descriptors: Tuple[str, ...] = ()

    def __post_init__(self):
        unknown = [d for d in self.descriptors if d not in DESCRIPTORS]
        if unknown:
            raise ConfigError(f"unknown descriptors {unknown}; expected some of {sorted(DESCRIPTORS)}")
        if self.width < 1:
            raise ConfigError(f"feature width must be >= 1, got {self.width}")

    @property
    def length(self) -> int:
        return self.width + len(self.descriptors)

    def to_dict(self) -> Dict:
        return {"radius": self.radius, "width": self.width, "descriptors": list(self.descriptors)}

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureSpec":
        return cls(int(data["radius"]), int(data["width"]), tuple(data.get("descriptors", ())))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Fingerprint bits as 0/1 followed by raw descriptor values."""

    values: np.ndarray
    spec: FeatureSpec

    def __post_init__(self):
        if self.values.shape != (self.spec.length,):
            raise SpecMismatch(f"feature vector shape {self.values.shape} does not match spec length {self.spec.length}")
        if not np.all(np.isfinite(self.values)):
            raise PredictorError("feature vector contains non-finite entries")


def featurize(mol: MoleculeGraph, spec: FeatureSpec = FeatureSpec()) -> FeatureVector:
    bits = morgan_fingerprint(mol, spec.radius, spec.width).bits.astype(np.float64)
    extra = [DESCRIPTORS[name](mol) for name in spec.descriptors]
    return FeatureVector(np.concatenate([bits, np.asarray(extra, dtype=np.float64)]), spec)


# ─────────────────────── Network ─────────────────────────────


class SurrogateNet(nn.Module):
    """input -> hidden (GELU, dropout) -> mean head and optional log-variance head."""

    def __init__(self, in_features: int, hidden: int = 768, dropout: float = 0.3, uncertainty: bool = True):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(in_features, hidden), nn.GELU(), nn.Dropout(dropout))
        self.mu_head = nn.Linear(hidden, 1)
        self.log_var_head = nn.Linear(hidden, 1) if uncertainty else None

    @property
    def uncertainty(self) -> bool:
        return self.log_var_head is not None

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.body(x)
        mu = self.mu_head(h).squeeze(-1)
        log_var = self.log_var_head(h).squeeze(-1) if self.log_var_head is not None else None
        return mu, log_var


def batch_objective(net: SurrogateNet, x: torch.Tensor, y: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Fine-tuning mixture for uncertainty models, plain MSE for point regressors."""
    mu, log_var = net(x)
    if log_var is None:
        return mse(y, mu)
    return finetune_objective(mse(y, mu), gaussian_nll(PredictionBatch(y, mu, log_var)), weights)


# ─────────────────────── Model ───────────────────────────────


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 768
    dropout: float = 0.3
    lr: float = 3e-4
    batch_size: int = 128
    weight_decay: float = 5e-5
    alpha: float = 0.2
    epochs: int = 100
    seed: int = 0
    uncertainty: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


@dataclass(frozen=True)
class Standardization:
    target_mean: float = 0.0
    target_std: float = 1.0
    descriptor_mean: Tuple[float, ...] = ()
    descriptor_std: Tuple[float, ...] = ()


@dataclass
class RegressorModel:
    net: SurrogateNet
    spec: FeatureSpec
    target: str
    standardization: Standardization
    hidden: int
    dropout: float
    metadata: Dict = field(default_factory=dict)

    @property
    def uncertainty(self) -> bool:
        return self.net.uncertainty

    def inputs(self, vectors: Sequence[FeatureVector]) -> torch.Tensor:
        """Stack feature vectors, z-scoring the descriptor tail."""
        for v in vectors:
            if v.spec != self.spec:
                raise SpecMismatch(f"feature spec {v.spec} does not match model spec {self.spec}")
        values = np.vstack([v.values for v in vectors]) if vectors else np.zeros((0, self.spec.length))
        if self.spec.descriptors:
            mean = np.asarray(self.standardization.descriptor_mean)
            std = np.asarray(self.standardization.descriptor_std)
            values[:, self.spec.width :] = (values[:, self.spec.width :] - mean) / std
        return torch.as_tensor(values, dtype=torch.float32)

    def parameters_equal(self, other: "RegressorModel") -> bool:
        mine, theirs = self.net.state_dict(), other.net.state_dict()
        return mine.keys() == theirs.keys() and all(torch.equal(mine[k], theirs[k]) for k in mine)

    def to_dict(self) -> Dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "target": self.target,
            "feature_spec": self.spec.to_dict(),
            "architecture": {"hidden": self.hidden, "dropout": self.dropout, "uncertainty": self.uncertainty},
            "standardization": asdict(self.standardization),
            "parameters": {
                name: {"shape": list(t.shape), "values": t.flatten().tolist()} for name, t in self.net.state_dict().items()
            },
            "metadata": self.metadata,
        }

    def save(self, path: Path) -> None:
        atomic_write_text(Path(path), json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, data: Dict) -> "RegressorModel":
        if data.get("format") != MODEL_FORMAT or data.get("version") != MODEL_VERSION:
            raise PersistenceError(f"unsupported model file format {data.get('format')!r} version {data.get('version')!r}")
        spec = FeatureSpec.from_dict(data["feature_spec"])
        arch = data["architecture"]
        net = SurrogateNet(spec.length, int(arch["hidden"]), float(arch["dropout"]), bool(arch["uncertainty"]))
        state = {
            name: torch.tensor(p["values"], dtype=torch.float32).reshape(p["shape"]) for name, p in data["parameters"].items()
        }
        try:
            net.load_state_dict(state)
        except RuntimeError as e:
            raise PersistenceError(f"model parameters do not fit the architecture: {e}") from e
        std = data["standardization"]
        standardization = Standardization(
            float(std["target_mean"]),
            float(std["target_std"]),
            tuple(std["descriptor_mean"]),
            tuple(std["descriptor_std"]),
        )
        net.eval()
        return cls(net, spec, data["target"], standardization, int(arch["hidden"]), float(arch["dropout"]), data.get("metadata", {}))

    @classmethod
    def load(cls, path: Path) -> "RegressorModel":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise PersistenceError(f"cannot read model {path}: {e}") from e
        try:
            return cls.from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            raise PersistenceError(f"malformed model file {path}: {e}") from e


# ─────────────────────── Training ────────────────────────────


def _standardization(vectors: Sequence[FeatureVector], targets: np.ndarray) -> Standardization:
    spec = vectors[0].spec
    target_std = float(targets.std())
    if spec.descriptors:
        tail = np.vstack([v.values[spec.width :] for v in vectors])
        d_mean = tail.mean(axis=0)
        d_std = tail.std(axis=0)
        d_std[d_std == 0] = 1.0
    else:
        d_mean = d_std = np.zeros(0)
    return Standardization(
        target_mean=float(targets.mean()),
        target_std=target_std if target_std > 0 else 1.0,
        descriptor_mean=tuple(float(v) for v in d_mean),
        descriptor_std=tuple(float(v) for v in d_std),
    )


def train(dataset: Sequence[Tuple[FeatureVector, float]], cfg: TrainConfig = TrainConfig(), target: str = "pce") -> RegressorModel:
    """
    Fit a regressor with Adam on shuffled minibatches.

    Targets are z-scored; the statistics are stored in the model. Training is
    deterministic given ``cfg.seed`` and does not disturb the global torch RNG.

    Raises:
        PredictorError: Fewer than two samples or non-finite targets.
        SpecMismatch: Feature vectors of different specs.
        NonFiniteLoss: A minibatch loss became NaN or infinite.
    """
    if len(dataset) < 2:
        raise PredictorError(f"training needs at least 2 samples, got {len(dataset)}")
    vectors = [v for v, _ in dataset]
    targets = np.asarray([y for _, y in dataset], dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise PredictorError("training targets contain non-finite values")
    spec = vectors[0].spec
    if any(v.spec != spec for v in vectors):
        raise SpecMismatch("training vectors use different feature specs")

    standardization = _standardization(vectors, targets)
    weights = LossWeights(alpha=cfg.alpha)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = SurrogateNet(spec.length, cfg.hidden, cfg.dropout, cfg.uncertainty)
        model = RegressorModel(net, spec, target, standardization, cfg.hidden, cfg.dropout)
        x = model.inputs(vectors)
        y = torch.as_tensor((targets - standardization.target_mean) / standardization.target_std, dtype=torch.float32)

        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        generator = torch.Generator().manual_seed(cfg.seed)
        history: List[float] = []
        net.train()
        for epoch in range(1, cfg.epochs + 1):
            order = torch.randperm(len(dataset), generator=generator)
            epoch_loss = 0.0
            for start in range(0, len(dataset), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                try:
                    loss = batch_objective(net, x[idx], y[idx], weights)
                except NonFiniteInput as e:
                    raise NonFiniteLoss(f"{target} training diverged at epoch {epoch}: {e}") from e
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(
                        f"{target} training diverged at epoch {epoch}, batch starting {start}: loss={loss.item()}"
                    )
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(idx)
            history.append(epoch_loss / len(dataset))
            logger.debug("%s epoch %d loss %.6f", target, epoch, history[-1])
        net.eval()

    predictions = np.asarray([_forward(model, v)[0] for v in vectors])
    model.metadata = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "optimizer": "adam",
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "weight_decay": cfg.weight_decay,
        "alpha": cfg.alpha,
        "samples": len(dataset),
        "final_loss": history[-1],
        "loss_history": history,
        "train_mae": float(np.abs(predictions - targets).mean()),
    }
    logger.info("trained %s regressor on %d samples, final loss %.4f", target, len(dataset), history[-1])
    return model


def split_holdout(
    dataset: Sequence[Tuple[FeatureVector, float]], fraction: float, seed: int = 0
) -> Tuple[List[Tuple[FeatureVector, float]], List[Tuple[FeatureVector, float]]]:
    """Seeded random (train, holdout) split; the holdout keeps at least one sample when fraction > 0."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in [0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_hold = int(round(fraction * len(dataset)))
    if fraction > 0:
        n_hold = max(1, n_hold)
    held = set(order[:n_hold].tolist())
    train_part = [row for i, row in enumerate(dataset) if i not in held]
    hold_part = [row for i, row in enumerate(dataset) if i in held]
    return train_part, hold_part


def regression_metrics(y_true: Sequence[float], y_pred: Sequence[float]) -> Dict[str, float]:
    """Coefficient of determination and mean absolute error."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise PredictorError("regression metrics need aligned non-empty sequences")
    residual = float(((y_true - y_pred) ** 2).sum())
    total = float(((y_true - y_true.mean()) ** 2).sum())
    r2 = 1.0 - residual / total if total > 0 else (1.0 if residual == 0 else 0.0)
    return {"r2": r2, "mae": float(np.abs(y_true - y_pred).mean()), "n": int(y_true.size)}


def dataset_from_records(
    records: Sequence[MoleculeRecord], target: str, spec: FeatureSpec = FeatureSpec()
) -> List[Tuple[FeatureVector, float]]:
    from .smiles import parse_smiles

    if target not in TARGETS:
        raise ConfigError(f"unknown target {target!r}; expected one of {TARGETS}")
    return [(featurize(parse_smiles(r.smiles), spec), float(getattr(r, target))) for r in records]


# ─────────────────────── Inference ───────────────────────────


@dataclass(frozen=True)
class ModelOutput:
    mu: float
    sigma: float


def _forward(model: RegressorModel, x: FeatureVector) -> Tuple[float, Optional[float]]:
    model.net.eval()
    with torch.no_grad():
        mu, log_var = model.net(model.inputs([x]))
    s = model.standardization
    mean = float(mu[0]) * s.target_std + s.target_mean
    if log_var is None:
        return mean, None
    return mean, math.exp(0.5 * float(log_var[0])) * s.target_std


def predict_with_uncertainty(model: RegressorModel, x: FeatureVector) -> ModelOutput:
    """Mean and standard deviation in target units, dropout disabled."""
    if not model.uncertainty:
        raise SpecMismatch(f"{model.target} model has no variance head")
    mu, sigma = _forward(model, x)
    return ModelOutput(mu=mu, sigma=max(sigma, np.finfo(np.float64).tiny))


def predict_point(model: RegressorModel, x: FeatureVector) -> float:
    return _forward(model, x)[0]


def predict_homo_lumo(models: Tuple[RegressorModel, RegressorModel], x: FeatureVector) -> Tuple[float, float]:
    """(HOMO, LUMO) in eV. No clamping and no ordering is enforced."""
    homo_model, lumo_model = models
    return predict_point(homo_model, x), predict_point(lumo_model, x)


# ─────────────────────── Surrogate bundle ────────────────────


@dataclass(frozen=True)
class PropertyEstimate:
    pce_mu: float
    pce_sigma: float
    sascore: float
    homo: float
    lumo: float


@dataclass
class SurrogateSuite:
    """PCE, HOMO and LUMO models plus the SAscore table, loaded from one directory."""

    pce: RegressorModel
    homo: RegressorModel
    lumo: RegressorModel
    sa_table: SaScoreTable

    MODEL_FILES = {"pce": "pce.json", "homo": "homo.json", "lumo": "lumo.json"}
    SA_TABLE_FILE = "sa_table.tsv"

    @classmethod
    def load(cls, models_dir: Path) -> "SurrogateSuite":
        models_dir = Path(models_dir)
        models = {name: RegressorModel.load(models_dir / file) for name, file in cls.MODEL_FILES.items()}
        table_path = models_dir / cls.SA_TABLE_FILE
        if table_path.exists():
            table = load_sa_table(table_path)
        else:
            logger.warning("no SAscore table in %s; every fragment gets the default contribution", models_dir)
            table = SaScoreTable(approximate=True)
        specs = {m.spec for m in models.values()}
        if len(specs) != 1:
            raise SpecMismatch(f"models in {models_dir} use different feature specs")
        return cls(pce=models["pce"], homo=models["homo"], lumo=models["lumo"], sa_table=table)

    @property
    def spec(self) -> FeatureSpec:
        return self.pce.spec

    def evaluate(self, mol: MoleculeGraph) -> PropertyEstimate:
        x = featurize(mol, self.spec)
        out = predict_with_uncertainty(self.pce, x)
        homo, lumo = predict_homo_lumo((self.homo, self.lumo), x)
        return PropertyEstimate(out.mu, out.sigma, sa_score(mol, self.sa_table), homo, lumo)

    def tool_settings(self) -> Dict[str, str]:
        spec = self.spec
        fp = f"morgan r={spec.radius} bits={spec.width}"
        return {
            "pce": f"mlp mean/log-variance, {fp}, hidden={self.pce.hidden}",
            "homo": f"mlp point regressor, {fp}",
            "lumo": f"mlp point regressor, {fp}",
            "sascore": f"fragment table ({len(self.sa_table)} entries{', approximate' if self.sa_table.approximate else ''})",
        }
