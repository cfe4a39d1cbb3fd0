"""Shared fixtures: toy reference data, a fixed property oracle and tiny trained models."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List

import pytest

from osc_agent.database import ingest_reference
from osc_agent.predictor import FeatureSpec, PropertyEstimate, TrainConfig, dataset_from_records, train
from osc_agent.retrieval import MoleculeRecord
from osc_agent.sascore import build_fallback_table, write_sa_table
from osc_agent.smiles import MoleculeGraph, parse_smiles

DATA_DIR = Path(__file__).parent / "data"

TINY_SPEC = FeatureSpec(radius=2, width=64)
TINY_TRAIN = TrainConfig(hidden=8, dropout=0.0, lr=1e-2, batch_size=8, epochs=5, seed=0)


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def reference_csv() -> Path:
    return DATA_DIR / "reference_toy.csv"


@pytest.fixture
def reference_records(reference_csv) -> List[MoleculeRecord]:
    return ingest_reference(reference_csv).records


@pytest.fixture
def corpus() -> List[str]:
    return [line.strip() for line in (DATA_DIR / "corpus.smi").read_text().splitlines() if line.strip()]


@dataclass
class FixedOracle:
    """Returns the same estimate for every molecule and counts the calls."""

    estimate: PropertyEstimate = PropertyEstimate(pce_mu=5.0, pce_sigma=0.4, sascore=2.0, homo=-5.5, lumo=-3.8)
    calls: List[MoleculeGraph] = field(default_factory=list)

    def evaluate(self, mol: MoleculeGraph) -> PropertyEstimate:
        self.calls.append(mol)
        return self.estimate

    def tool_settings(self) -> Dict[str, str]:
        return {"pce": "fixed", "sascore": "fixed", "homo": "fixed", "lumo": "fixed"}


@dataclass
class SizeOracle:
    """PCE grows with heavy-atom count, so larger molecules score higher."""

    def evaluate(self, mol: MoleculeGraph) -> PropertyEstimate:
        n = mol.heavy_atom_count
        return PropertyEstimate(pce_mu=float(n), pce_sigma=0.5, sascore=2.0, homo=-5.5, lumo=-3.5)

    def tool_settings(self) -> Dict[str, str]:
        return {"pce": "heavy-atom count"}


@pytest.fixture
def fixed_oracle() -> FixedOracle:
    return FixedOracle()


@pytest.fixture
def size_oracle() -> SizeOracle:
    return SizeOracle()


def write_tiny_models(records: List[MoleculeRecord], models_dir: Path) -> Path:
    """Train small pce/homo/lumo models and a fallback SAscore table into ``models_dir``."""
    models_dir.mkdir(parents=True, exist_ok=True)
    for target in ("pce", "homo", "lumo"):
        cfg = replace(TINY_TRAIN, uncertainty=target == "pce")
        model = train(dataset_from_records(records, target, TINY_SPEC), cfg, target=target)
        model.save(models_dir / f"{target}.json")
    table = build_fallback_table(parse_smiles(r.smiles) for r in records)
    write_sa_table(table, models_dir / "sa_table.tsv")
    return models_dir


@pytest.fixture
def models_dir(tmp_path, reference_records) -> Path:
    return write_tiny_models(reference_records, tmp_path / "models")
