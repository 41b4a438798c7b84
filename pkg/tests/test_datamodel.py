import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromix.datamodel import (ComponentParams, FitConfig, GroundTruth,
                                MixtureModel, SampleTaxaMatrix, edge_list,
                                load_counts, load_model, partial_correlation,
                                save_model)
from micromix.errors import (DomainError, ParseError, SchemaError,
                             ValidationError)

from conftest import random_spd


def write(tmp_path, text, name="counts.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCounts:
    def test_basic_tsv(self, tmp_path):
        p = write(tmp_path, "sample_id\ta\tb\ns0\t1\t2\ns1\t3\t4\ns2\t5\t6\n")
        m = load_counts(p)
        assert m.n == 3 and m.d == 2
        assert np.array_equal(m.counts, [[1, 2], [3, 4], [5, 6]])
        assert m.taxon_ids == ("a", "b")

    def test_csv(self, tmp_path):
        p = write(tmp_path, "sample_id,a,b\ns0,1,2\n", name="c.csv")
        assert load_counts(p).d == 2

    def test_negative_entry_is_validation_error(self, tmp_path):
        p = write(tmp_path, "sample_id\ta\tb\ns0\t-1\t2\n")
        with pytest.raises(ValidationError) as err:
            load_counts(p)
        assert err.value.row == 0 and err.value.col == 0

    def test_fractional_entry_is_parse_error(self, tmp_path):
        p = write(tmp_path, "sample_id\ta\tb\ns0\t2.5\t2\n")
        with pytest.raises(ParseError) as err:
            load_counts(p)
        assert err.value.row == 0 and err.value.col == 0

    def test_garbage_cell(self, tmp_path):
        p = write(tmp_path, "sample_id\ta\tb\ns0\tfoo\t2\n")
        with pytest.raises(ParseError):
            load_counts(p)

    def test_single_taxon_rejected(self, tmp_path):
        p = write(tmp_path, "sample_id\ta\ns0\t1\n")
        with pytest.raises(ValidationError):
            load_counts(p)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            SampleTaxaMatrix([[1, 2]], ("s0",), ("a", "a"))


class TestPartialCorrelation:
    def test_identity(self):
        p = partial_correlation(np.eye(3))
        assert np.allclose(np.diag(p), -1.0)
        assert np.allclose(p - np.diag(np.diag(p)), 0.0)

    def test_two_by_two_hand_value(self):
        # P[0,1] = -(-1)/sqrt(2*2) = 0.5
        p = partial_correlation(np.array([[2.0, -1.0], [-1.0, 2.0]]))
        assert np.isclose(p[0, 1], 0.5)
        assert np.allclose(np.diag(p), -1.0)

    def test_zero_diagonal_rejected(self):
        with pytest.raises(DomainError):
            partial_correlation(np.array([[0.0, 0.0], [0.0, 1.0]]))

    @given(st.integers(2, 6), st.floats(0.1, 100.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, d, c):
        m = random_spd(d, np.random.default_rng(d))
        assert np.allclose(partial_correlation(m), partial_correlation(c * m),
                           atol=1e-10)

    def test_bounded_for_spd(self, rng):
        for _ in range(20):
            m = random_spd(5, rng)
            p = partial_correlation(m)
            assert (np.abs(p) <= 1.0 + 1e-9).all()


def tiny_model(k=1, d=2):
    comps = tuple(ComponentParams(np.zeros(d) + l, np.eye(d) * (l + 1))
                  for l in range(k))
    w = np.full((3, k), 1.0 / k)
    lam = tuple(np.zeros((3, d)) for _ in range(k))
    return MixtureModel(pi=np.full(k, 1.0 / k), components=comps,
                        responsibilities=w, lambdas=lam, loglik_trace=(-5.0, -4.0))


class TestModelSerialization:
    def test_round_trip(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "m.json"
        save_model(m, path)
        m2 = load_model(path)
        assert np.array_equal(m.pi, m2.pi)
        assert np.array_equal(m.responsibilities, m2.responsibilities)
        for c1, c2 in zip(m.components, m2.components):
            assert np.array_equal(c1.mu, c2.mu)
            assert np.array_equal(c1.sigma, c2.sigma)
            assert np.array_equal(c1.precision, c2.precision)
        assert m.loglik_trace == m2.loglik_trace

    def test_missing_pi_is_schema_error(self, tmp_path):
        path = tmp_path / "bad.json"
        payload = {"components": [], "responsibilities": []}
        path.write_text(json.dumps(payload))
        with pytest.raises(SchemaError):
            load_model(path)

    def test_invalid_pi_rejected_before_write(self, tmp_path):
        with pytest.raises(ValidationError):
            MixtureModel(pi=np.array([0.9]), components=(ComponentParams([0.0, 0.0], np.eye(2)),),
                         responsibilities=np.ones((2, 1)))

    def test_load_reproduces_invariants(self, tmp_path):
        m = tiny_model(k=2, d=3)
        path = tmp_path / "m.json"
        save_model(m, path)
        m2 = load_model(path)          # __post_init__ revalidates everything
        assert abs(m2.pi.sum() - 1.0) < 1e-10
        assert np.abs(m2.responsibilities.sum(axis=1) - 1.0).max() < 1e-10


class TestComponentParams:
    def test_precision_derived(self):
        c = ComponentParams([0.0, 0.0], [[2.0, 0.5], [0.5, 1.0]])
        assert np.abs(c.sigma @ c.precision - np.eye(2)).max() <= 1e-8

    def test_out_of_sync_rejected(self):
        with pytest.raises(ValidationError):
            ComponentParams([0.0, 0.0], np.eye(2), precision=2 * np.eye(2))

    def test_non_spd_rejected(self):
        with pytest.raises(ValidationError):
            ComponentParams([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


class TestFitConfig:
    def test_cv_needs_grid(self):
        with pytest.raises(ValidationError):
            FitConfig(engine="mixmpln", penalty="cv")

    def test_bad_engine(self):
        with pytest.raises(ValidationError):
            FitConfig(engine="mixfoo")

    def test_defaults_valid(self):
        cfg = FitConfig()
        assert cfg.n_restarts == 3 and cfg.tol > 0


class TestGroundTruth:
    def test_adjacency_support_checked(self):
        prec = np.array([[1.0, 0.5], [0.5, 1.0]])
        adj = np.array([[0, 0], [0, 0]])
        with pytest.raises(ValidationError):
            GroundTruth((prec,), (adj,), np.zeros(2))

    def test_edge_list(self):
        prec = np.array([[2.0, -1.0], [-1.0, 2.0]])
        edges = edge_list(prec, ["x", "y"])
        assert edges == [("x", "y", 0.5)]


class TestImmutability:
    def test_arrays_read_only(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m.pi[0] = 0.3
        with pytest.raises(ValueError):
            m.components[0].sigma[0, 0] = 9.0
