"""Tests for the synthetic accessibility score."""

import math

import pytest

from osc_agent.errors import PersistenceError
from osc_agent.fingerprints import fragment_bag
from osc_agent.sascore import (
    SaScoreTable,
    build_fallback_table,
    complexity_penalty,
    load_sa_table,
    sa_score,
    write_sa_table,
)
from osc_agent.smiles import parse_smiles


def flat_table(smiles, value):
    bag = fragment_bag(parse_smiles(smiles), 2)
    return SaScoreTable({fid: value for fid in bag.counts})


def reference_rows(data_dir):
    rows = []
    for line in (data_dir / "sa_reference.tsv").read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        smiles, *counts = line.split("\t")
        rows.append((smiles, *map(int, counts)))
    return rows


def fragment_formula_score(counts, table, n_atoms, n_chiral, n_spiro, n_bridgeheads, macrocycle):
    """Fragment score, penalties and rescaling written out term by term."""
    score1 = 0.0
    nf = 0
    for fid, v in counts.items():
        nf += v
        score1 += table.get(fid, -4.0) * v
    score1 /= nf

    size_penalty = n_atoms**1.005 - n_atoms
    stereo_penalty = math.log10(n_chiral + 1)
    spiro_penalty = math.log10(n_spiro + 1)
    bridge_penalty = math.log10(n_bridgeheads + 1)
    macrocycle_penalty = math.log10(2) if macrocycle else 0.0
    score2 = 0.0 - size_penalty - stereo_penalty - spiro_penalty - bridge_penalty - macrocycle_penalty

    score3 = 0.0
    if n_atoms > len(counts):
        score3 = math.log(float(n_atoms) / len(counts)) * 0.5

    sascore = score1 + score2 + score3
    low, high = -4.0, 2.5
    sascore = 11.0 - (sascore - low + 1) / (high - low) * 9.0
    if sascore > 8.0:
        sascore = 8.0 + math.log(sascore + 1.0 - 9.0)
    return min(10.0, max(1.0, sascore))


class TestSaScore:
    def test_ethanol_known_fragments(self):
        score = sa_score(parse_smiles("CCO"), flat_table("CCO", 1.5))
        assert score == pytest.approx(2.023, abs=1e-3)
        assert 1.0 <= score <= 3.0

    def test_unknown_fragments_are_hard(self):
        score = sa_score(parse_smiles("CCO"), SaScoreTable())
        assert 8.0 < score < 10.0

    def test_clamped_to_range(self):
        assert sa_score(parse_smiles("CCO"), flat_table("CCO", 100.0)) == 1.0
        assert sa_score(parse_smiles("CCO"), SaScoreTable(default_contribution=-100.0)) == 10.0

    def test_atom_order_invariance(self):
        table = flat_table("CC(=O)O", 0.7)
        assert sa_score(parse_smiles("CC(=O)O"), table) == sa_score(parse_smiles("OC(C)=O"), table)

    def test_fallback_table_scores_corpus(self, corpus):
        mols = [parse_smiles(s) for s in corpus]
        table = build_fallback_table(mols)
        assert table.approximate
        for mol in mols:
            assert 1.0 <= sa_score(mol, table) <= 10.0

    def test_common_fragments_score_easier(self, reference_records):
        table = build_fallback_table(parse_smiles(r.smiles) for r in reference_records)
        easy = sa_score(parse_smiles("c1ccccc1"), table)
        hard = sa_score(parse_smiles("C1CC2CC1C1C3CCC(C3)C21"), table)
        assert easy < hard


class TestComplexityPenalty:
    def test_bridgeheads(self):
        diff = complexity_penalty(parse_smiles("C1CC2CCC1C2")) - complexity_penalty(parse_smiles("CC1CCCCC1"))
        assert diff == pytest.approx(math.log10(3))

    def test_spiro(self):
        diff = complexity_penalty(parse_smiles("C1CCC2(CC1)CCCC2")) - complexity_penalty(parse_smiles("CCCCC1CCCCC1"))
        assert diff == pytest.approx(math.log10(2))

    def test_stereo(self):
        diff = complexity_penalty(parse_smiles("N[C@@H](C)C(=O)O")) - complexity_penalty(parse_smiles("NC(C)C(=O)O"))
        assert diff == pytest.approx(math.log10(2))

    def test_macrocycle(self):
        diff = complexity_penalty(parse_smiles("C1CCCCCCCC1")) - complexity_penalty(parse_smiles("CC1CCCCCCC1"))
        assert diff == pytest.approx(math.log10(2))

    def test_small_chain_is_near_zero(self):
        assert 0.0 <= complexity_penalty(parse_smiles("CCO")) < 0.05


class TestTableFiles:
    def test_write_then_load(self, tmp_path):
        table = SaScoreTable({12: 0.5, -7: -1.25, 3_000_000_001: 2.0})
        path = tmp_path / "table.tsv"
        write_sa_table(table, path)
        loaded = load_sa_table(path)
        assert loaded.contributions == table.contributions
        assert not loaded.approximate

    def test_approximate_header(self, tmp_path, corpus):
        path = tmp_path / "table.tsv"
        write_sa_table(build_fallback_table(parse_smiles(s) for s in corpus), path)
        assert path.read_text().startswith("# approximate")
        assert load_sa_table(path).approximate

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "table.tsv"
        path.write_text("1\t0.5\n2 0.5\n")
        with pytest.raises(PersistenceError, match=":2:"):
            load_sa_table(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PersistenceError):
            load_sa_table(tmp_path / "nope.tsv")

    def test_empty_corpus(self):
        table = build_fallback_table([])
        assert len(table) == 0
        assert table.approximate


class TestPinnedScores:
    def test_ethanol_unknown_fragments(self):
        assert sa_score(parse_smiles("CCO"), SaScoreTable()) == pytest.approx(8.4936, abs=1e-3)

    def test_benzene_known_fragments(self):
        # 6 atoms, 3 distinct fragments, 18 occurrences
        bag = fragment_bag(parse_smiles("c1ccccc1"), 2)
        assert (len(bag), bag.total) == (3, 18)
        assert sa_score(parse_smiles("c1ccccc1"), flat_table("c1ccccc1", 1.0)) == pytest.approx(2.2872, abs=1e-3)

    def test_ethanol_fragments(self):
        bag = fragment_bag(parse_smiles("CCO"), 2)
        assert (len(bag), bag.total) == (6, 6)


class TestFragmentFormula:
    VALUES = (-1.5, -0.4, 0.0, 0.3, 0.9, 1.6, 2.1)

    @pytest.fixture
    def rows(self, data_dir):
        return reference_rows(data_dir)

    @pytest.fixture
    def mixed_table(self, rows):
        # every fifth fragment is left out and falls back to the default contribution
        contributions = {}
        for smiles, *_ in rows:
            for fid in fragment_bag(parse_smiles(smiles), 2).counts:
                if fid % 5:
                    contributions[fid] = self.VALUES[fid % len(self.VALUES)]
        return contributions

    def test_penalties_match_hand_counts(self, rows):
        for smiles, n_atoms, n_chiral, n_spiro, n_bridgeheads, macrocycle in rows:
            expected = (
                n_atoms**1.005 - n_atoms
                + math.log10(n_chiral + 1)
                + math.log10(n_spiro + 1)
                + math.log10(n_bridgeheads + 1)
                + (math.log10(2) if macrocycle else 0.0)
            )
            assert parse_smiles(smiles).heavy_atom_count == n_atoms, smiles
            assert complexity_penalty(parse_smiles(smiles)) == pytest.approx(expected, abs=1e-9), smiles

    def test_scores_agree_within_tolerance(self, rows, mixed_table):
        table = SaScoreTable(mixed_table)
        for smiles, *counts in rows:
            mol = parse_smiles(smiles)
            expected = fragment_formula_score(fragment_bag(mol, 2).counts, mixed_table, *counts)
            assert abs(sa_score(mol, table) - expected) < 0.05, smiles

    def test_empty_table_agrees(self, rows):
        for smiles, *counts in rows:
            mol = parse_smiles(smiles)
            expected = fragment_formula_score(fragment_bag(mol, 2).counts, {}, *counts)
            assert abs(sa_score(mol, SaScoreTable()) - expected) < 0.05, smiles

    def test_loaded_fixture_table_agrees(self, tmp_path, rows, mixed_table):
        path = tmp_path / "fragments.tsv"
        write_sa_table(SaScoreTable(mixed_table), path)
        table = load_sa_table(path)
        smiles, *counts = rows[7]
        mol = parse_smiles(smiles)
        expected = fragment_formula_score(fragment_bag(mol, 2).counts, mixed_table, *counts)
        assert sa_score(mol, table) == pytest.approx(expected, abs=1e-9)
