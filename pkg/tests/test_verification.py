import numpy as np
import pytest

from crispe import projection as pj
from crispe.verification import CHECKS, MUTATIONS, Check, VerificationReport, mutation, verify


@pytest.fixture(scope="module")
def full_report():
    return verify(seed=0)


def test_full_suite_passes(full_report):
    assert full_report.ok, full_report.format()
    assert [c.name for c in full_report.checks] == list(CHECKS)
    assert len(full_report.checks) == 24


def test_report_format(full_report):
    lines = full_report.format().splitlines()
    assert len(lines) == 25
    assert all(line.startswith("PASS  ") for line in lines[:-1])
    assert lines[-1] == "24/24 checks passed"


def test_suite_is_seed_robust():
    assert verify(seed=3, only=["factored vs dense projector", "K-FAC single-sample exactness",
                                "SGD updates stay in subspace"]).ok


def test_mutation_is_caught():
    report = verify(mutation_name="kron_sign_flip", only=["factored vs dense projector"])
    assert not report.ok
    assert report.failures[0].observed > 1.0


def test_mutation_is_scoped():
    original = pj.kron_project
    with mutation("kron_sign_flip"):
        assert pj.kron_project is not original
    assert pj.kron_project is original
    with pytest.raises(ValueError, match="unknown mutation"):
        with mutation("nope"):
            pass
    assert MUTATIONS == ("kron_sign_flip",)


def test_tight_tolerance_exposes_floating_point_checks(full_report):
    """Override every tolerance with 1e-15: checks with float round-off fail, exact ones pass."""
    tight = verify(tolerance=1e-15)
    failing = {c.name for c in tight.failures}
    assert "sym_eig reconstruction" in failing and "MC Fisher matches GNH" in failing
    assert "energy cutoff monotone in gamma" not in failing
    assert all(c.tolerance == 1e-15 for c in tight.checks)
    print("\nchecks failing at tolerance 1e-15:", ", ".join(sorted(failing)))


def test_crash_becomes_failure(monkeypatch):
    def boom(rng):
        raise RuntimeError("broken")

    monkeypatch.setitem(CHECKS, "sym_eig reconstruction", boom)
    report = verify(only=["sym_eig reconstruction"])
    assert not report.ok and report.checks[0].observed == np.inf
    assert not verify(only=["no such check"]).ok


def test_check_line():
    line = Check("x", 1.5e-3, 1e-2, True, 0.25).line()
    assert line.startswith("PASS  x") and "observed=1.500e-03" in line and "tol=1.0e-02" in line
    assert VerificationReport().ok
