"""Smoke test for the qproc_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
Then run with `python python/smoke_test.py` or `pytest python/`.
"""

import cmath
import json
import math

import qproc_py as q


def test_vacuum_half_plane():
    e = q.Engine.vacuum()
    right = q.History([(q.Cell(0.0, 6.0, -6.0, 6.0), 0.0)])
    for route in ("bargmann", "oracle"):
        v, err = e.phi(right, q.History.trivial(), route)
        assert abs(v - 0.5) < 1e-7 + err, v


def test_routes_agree_and_hermitian():
    e = q.Engine.harmonic(q.PhasePoint(0.5, -0.2))
    a = q.History([(q.Cell(-1.0, 1.0, 0.0, 2.0), 0.0), (q.Cell(-2.0, 0.5, -1.0, 1.0), 0.8)])
    b = q.History([(q.Cell(0.0, 2.0, -2.0, 1.0), 0.4)])
    v, err = e.phi(a, b)
    o, _ = e.phi(a, b, "oracle")
    r, _ = e.phi(b, a, "oracle")
    assert abs(v - o) <= max(1e-6, err)
    assert abs(o - r.conjugate()) < 1e-12


def test_axioms_and_interference():
    e = q.Engine.harmonic(q.PhasePoint(0.8, -0.3))
    cells = [q.Cell(-3.0, 0.0, -3.0, 3.0), q.Cell(0.0, 3.0, -3.0, 3.0)]
    report = e.check_axioms(cells, [0.0, 0.7])
    assert all(ok for _, ok in report.values()), report
    a = q.History([(q.Cell(-0.5, 1.5, 0.0, 2.0), 0.0), (q.Cell(-2.0, 1.0, -1.0, 1.0), 1.0)])
    rho, beta = e.interfere(a, q.History.trivial())
    phi, _ = e.phi(a, q.History.trivial(), "oracle")
    assert abs(cmath.rect(rho, beta) - phi) < 1e-5


def test_holonomy_and_phase_fit():
    # A small triangle picks up minus its area as phase.
    tri = [q.PhasePoint(0.0, 0.0), q.PhasePoint(0.3, 0.0), q.PhasePoint(0.0, 0.3)]
    assert abs(cmath.phase(q.bargmann_invariant(tri)) + 0.045) < 1e-12
    chi = [2 * math.pi * k / 32 for k in range(32)]
    i = [1.5 + 0.8 * math.cos(c - 2.0) for c in chi]
    rho, beta, r2 = q.extract_phase(chi, i)
    assert abs(rho - 0.4) < 1e-12 and abs(beta - 2.0) < 1e-12 and abs(r2 - 0.5) < 1e-12


def test_correlations_spectrum_wigner():
    e = q.Engine.harmonic(q.PhasePoint(0.0, 0.0))
    g = e.g_nm([("x", 0.7)], [("x", 0.0)])
    assert abs(g - 0.5 * cmath.exp(0.7j)) < 1e-12
    delta, k = e.kernels(["x", "p"], [0.0, 0.5, 1.0])
    assert len(delta) == 6 and abs(delta[0][0] - 0.5) < 1e-12
    small = q.Engine.harmonic(q.PhasePoint(0.0, 0.0), cutoff=12)
    energies = small.spectrum(6.0, 0.5, 0.1)
    assert all(abs(energies[n] - (n + 0.5)) < 1e-3 for n in range(5)), energies
    w = q.Engine.fock(1, cutoff=16).wigner([0.0], [0.0])
    assert abs(w[0][0] + 2.0) < 1e-12


def test_errors_and_cli():
    try:
        q.Cell(1.0, 0.0, 0.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("reversed cell accepted")
    code, text = q.run("decfun", "[engine]\ncutoff = 24")
    assert code == 0 and json.loads(text)["pass"] is True
    code, _ = q.run("interfere", "[engine]\ncutoff = 16\n[experiment]\nalpha = [{ empty = true, t = 0.0 }]")
    assert code == 3
    assert issubclass(q.NumericalError, ArithmeticError)


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
