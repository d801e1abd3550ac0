//! Python bindings for the qproc core.

use num_complex::Complex64 as C64;
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qproc::cli::{self, ExperimentConfig, Subcommand};
use qproc::coherent::{self, CoherentFamily};
use qproc::correlations::{self, Observable, TimeGrid};
use qproc::decfun::{self, Event, Hamiltonian, Initial, ProcessEngine, Route};
use qproc::fock::{basis_vector, harmonic_hamiltonian, quartic_hamiltonian, FockOperator};
use qproc::markov::{self, PhaseGrid, PropagatorTable};
use qproc::{pancharatnam, wigner, QprocError};

create_exception!(qproc_py, NumericalError, PyArithmeticError);

fn err(e: QprocError) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

#[pyclass(name = "PhasePoint", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyPhasePoint(coherent::PhasePoint);

#[pymethods]
impl PyPhasePoint {
    #[new]
    fn new(x: f64, xi: f64) -> Self {
        PyPhasePoint(coherent::PhasePoint::new(x, xi))
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }

    #[getter]
    fn xi(&self) -> f64 {
        self.0.xi
    }

    /// The point carried by the oscillator flow for time `theta`.
    fn rotated(&self, theta: f64) -> Self {
        PyPhasePoint(self.0.rotated(theta))
    }

    fn __repr__(&self) -> String {
        format!("PhasePoint({}, {})", self.0.x, self.0.xi)
    }
}

#[pyclass(name = "Cell", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyCell(coherent::Cell);

#[pymethods]
impl PyCell {
    #[new]
    fn new(x0: f64, x1: f64, xi0: f64, xi1: f64) -> PyResult<Self> {
        coherent::Cell::new((x0, x1), (xi0, xi1), coherent::DEFAULT_QUAD_ORDER).map(PyCell).map_err(err)
    }

    /// The square `[−r, r]²`.
    #[staticmethod]
    fn covering(r: f64) -> Self {
        PyCell(coherent::Cell::covering(r))
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("Cell({}, {}, {}, {})", c.x_range.0, c.x_range.1, c.xi_range.0, c.xi_range.1)
    }
}

/// A time-ordered sequence of cell events; `None` marks the empty event.
#[pyclass(name = "History", frozen, from_py_object)]
#[derive(Clone)]
struct PyHistory(decfun::History);

#[pymethods]
impl PyHistory {
    #[new]
    #[pyo3(signature = (steps, label = "h"))]
    fn new(steps: Vec<(Option<PyCell>, f64)>, label: &str) -> PyResult<Self> {
        let steps = steps.into_iter().map(|(c, t)| (c.map_or_else(Event::empty, |c| Event::cell(c.0)), t)).collect();
        decfun::History::new(steps, label).map(PyHistory).map_err(err)
    }

    #[staticmethod]
    fn trivial() -> Self {
        PyHistory(decfun::History::trivial())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn route(name: &str) -> PyResult<Route> {
    match name {
        "bargmann" => Ok(Route::BargmannQuadrature),
        "oracle" => Ok(Route::OracleTrace),
        other => Err(PyValueError::new_err(format!("unknown route {other:?}; use \"bargmann\" or \"oracle\""))),
    }
}

fn points(v: &[(PyPhasePoint, f64)]) -> Vec<(coherent::PhasePoint, f64)> {
    v.iter().map(|(z, t)| (z.0, *t)).collect()
}

fn table(m: &nalgebra::DMatrix<C64>) -> Vec<Vec<C64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// A process: coherent family, initial state and dynamics.
#[pyclass(name = "Engine", frozen)]
struct PyEngine(ProcessEngine);

fn engine(cutoff: usize, initial: Initial, h: impl FnOnce(usize) -> qproc::Result<Hamiltonian>) -> PyResult<PyEngine> {
    let family = CoherentFamily::new(cutoff).map_err(err)?;
    ProcessEngine::new(family, initial, h(cutoff).map_err(err)?).map(PyEngine).map_err(err)
}

#[pymethods]
impl PyEngine {
    #[staticmethod]
    #[pyo3(signature = (cutoff = 48))]
    fn vacuum(cutoff: usize) -> PyResult<Self> {
        engine(cutoff, Initial::Point(coherent::PhasePoint::ORIGIN), |_| Ok(Hamiltonian::Zero))
    }

    /// Coherent initial state with no dynamics.
    #[staticmethod]
    #[pyo3(signature = (z0, cutoff = 48))]
    fn kinematic(z0: PyPhasePoint, cutoff: usize) -> PyResult<Self> {
        engine(cutoff, Initial::Point(z0.0), |_| Ok(Hamiltonian::Zero))
    }

    #[staticmethod]
    #[pyo3(signature = (z0, cutoff = 48, offset = 0.5))]
    fn harmonic(z0: PyPhasePoint, cutoff: usize, offset: f64) -> PyResult<Self> {
        engine(cutoff, Initial::Point(z0.0), |n| Ok(Hamiltonian::Operator(harmonic_hamiltonian(n, offset)?)))
    }

    #[staticmethod]
    #[pyo3(signature = (z0, lam, cutoff = 48, offset = 0.5))]
    fn quartic(z0: PyPhasePoint, lam: f64, cutoff: usize, offset: f64) -> PyResult<Self> {
        engine(cutoff, Initial::Point(z0.0), |n| Ok(Hamiltonian::Operator(quartic_hamiltonian(n, offset, lam)?)))
    }

    /// Number state `|n>` under the oscillator (or no dynamics).
    #[staticmethod]
    #[pyo3(signature = (n, cutoff = 48, harmonic = true))]
    fn fock(n: usize, cutoff: usize, harmonic: bool) -> PyResult<Self> {
        if n >= cutoff {
            return Err(PyValueError::new_err(format!("level {n} is not below the cutoff {cutoff}")));
        }
        let rho = FockOperator::projector(&basis_vector(cutoff, n));
        engine(cutoff, Initial::Density(rho), |c| {
            Ok(if harmonic { Hamiltonian::Operator(harmonic_hamiltonian(c, 0.5)?) } else { Hamiltonian::Zero })
        })
    }

    #[getter]
    fn cutoff(&self) -> usize {
        self.0.dim()
    }

    /// `Φ(alpha, beta)` with its quadrature error estimate.
    #[pyo3(signature = (alpha, beta, route = "bargmann"))]
    fn phi(&self, alpha: &PyHistory, beta: &PyHistory, route: &str) -> PyResult<(C64, f64)> {
        let v = decfun::phi_cells(&self.0, &alpha.0, &beta.0, self::route(route)?).map_err(err)?;
        Ok((v.value, v.quad_error))
    }

    /// Point-history kernel `υ` over `(point, time)` lists.
    fn upsilon(&self, forward: Vec<(PyPhasePoint, f64)>, backward: Vec<(PyPhasePoint, f64)>) -> PyResult<C64> {
        decfun::upsilon(&self.0, &points(&forward), &points(&backward)).map_err(err)
    }

    /// Worst axiom defects over histories built from disjoint `cells` at `times`.
    fn check_axioms<'py>(&self, py: Python<'py>, cells: Vec<PyCell>, times: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let cells: Vec<coherent::Cell> = cells.iter().map(|c| c.0).collect();
        let r = decfun::check_axioms(&self.0, &cells, &times).map_err(err)?;
        let d = PyDict::new(py);
        for c in r.checks(coherent::QuadratureSpec::default().tolerance) {
            d.set_item(c.name, (c.value, c.pass))?;
        }
        Ok(d)
    }

    /// Fitted `(rho, beta)` of the interference scan between the beams
    /// filtered by `alpha` and `reference`.
    fn interfere(&self, alpha: &PyHistory, reference: &PyHistory) -> PyResult<(f64, f64)> {
        let fit = pancharatnam::history_phase_protocol(&self.0, &alpha.0, &reference.0).map_err(err)?;
        Ok((fit.rho, fit.beta))
    }

    /// Mixed correlation `Tr(F_n…F_1 ρ G_1…G_m)` for `(observable, time)` lists.
    fn g_nm(&self, forward: Vec<(String, f64)>, backward: Vec<(String, f64)>) -> PyResult<C64> {
        let f: Vec<(&str, f64)> = forward.iter().map(|(o, t)| (o.as_str(), *t)).collect();
        let b: Vec<(&str, f64)> = backward.iter().map(|(o, t)| (o.as_str(), *t)).collect();
        correlations::g_nm(&self.0, &f, &b).map_err(err)
    }

    /// `(iΔ, iK)` kernel matrices, blocked by observable then time.
    fn kernels(&self, observables: Vec<String>, times: Vec<f64>) -> PyResult<(Vec<Vec<C64>>, Vec<Vec<C64>>)> {
        let obs: Vec<Observable> = observables.iter().map(|o| Observable::parse(o)).collect::<qproc::Result<_>>().map_err(err)?;
        let grid = TimeGrid::new(times).map_err(err)?;
        let k = correlations::oracle_kernels(&self.0, &obs, &grid).map_err(err)?;
        Ok((table(&k.i_delta), table(&k.i_k)))
    }

    /// Chapman–Kolmogorov composition defect through `s_mid` over `[−r, r]²`.
    #[pyo3(signature = (z1, z1p, t, z0, z0p, s, s_mid, radius = 8.0, quad_order = 24))]
    #[allow(clippy::too_many_arguments)]
    fn ck_defect(
        &self,
        z1: PyPhasePoint,
        z1p: PyPhasePoint,
        t: f64,
        z0: PyPhasePoint,
        z0p: PyPhasePoint,
        s: f64,
        s_mid: f64,
        radius: f64,
        quad_order: usize,
    ) -> PyResult<f64> {
        let region = coherent::Cell::covering(radius);
        let r = markov::chapman_kolmogorov_check(&self.0, z1.0, z1p.0, t, z0.0, z0p.0, s, s_mid, &region, quad_order).map_err(err)?;
        Ok(r.defect)
    }

    /// Energies recovered from propagator tables on a disc grid.
    #[pyo3(signature = (radius = 6.0, spacing = 0.5, dt = 0.1))]
    fn spectrum(&self, radius: f64, spacing: f64, dt: f64) -> PyResult<Vec<f64>> {
        let grid = PhaseGrid::disc(radius, spacing).map_err(err)?;
        let t = PropagatorTable::from_engine(&self.0, grid, &[(0.0, 0.0), (dt, 0.0)]).map_err(err)?;
        let sub = markov::reconstruct_subspace(&t, markov::DEFAULT_THRESHOLD).map_err(err)?;
        markov::extract_hamiltonian(&t, &sub, dt).map_err(err)
    }

    /// Wigner function of the initial state, `w[i][j] = W(q_i, p_j)`.
    fn wigner(&self, q: Vec<f64>, p: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        wigner::wigner_function(self.0.rho(), &q, &p).map(|t| t.values).map_err(err)
    }

    /// Wigner-route functional on a cell pair.
    fn wigner_cells(&self, a: PyCell, b: PyCell) -> PyResult<(C64, f64)> {
        let v = wigner::wigner_decfun_cells(self.0.rho(), &a.0, &b.0).map_err(err)?;
        Ok((v.value, v.quad_error))
    }
}

/// Bargmann invariant of the loop through `forward` then `backward` reversed.
#[pyfunction]
#[pyo3(signature = (forward, backward = Vec::new()))]
fn bargmann_invariant(forward: Vec<PyPhasePoint>, backward: Vec<PyPhasePoint>) -> C64 {
    let f: Vec<coherent::PhasePoint> = forward.iter().map(|z| z.0).collect();
    let b: Vec<coherent::PhasePoint> = backward.iter().map(|z| z.0).collect();
    coherent::bargmann_invariant(&f, &b)
}

/// Fitted `(rho, beta, r2)` of `a + 2ρ cos(χ − β)` through a scan.
#[pyfunction]
fn extract_phase(chi: Vec<f64>, intensities: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let scan = pancharatnam::IntensityScan::new(chi, intensities).map_err(err)?;
    let fit = pancharatnam::extract_phase(&scan).map_err(err)?;
    Ok((fit.rho, fit.beta, fit.r2))
}

/// Run a CLI subcommand on a TOML config; returns `(exit_code, result_json)`.
#[pyfunction]
#[pyo3(signature = (subcommand, config = ""))]
fn run(subcommand: &str, config: &str) -> PyResult<(i32, String)> {
    let sub = Subcommand::parse(subcommand).ok_or_else(|| PyValueError::new_err(format!("unknown subcommand {subcommand:?}")))?;
    let cfg = ExperimentConfig::from_toml(config)
        .map_err(|d| PyValueError::new_err(d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n")))?;
    Ok(match cli::run(sub, &cfg) {
        Ok(out) => (if out.envelope.pass { 0 } else { 1 }, out.envelope.to_json()),
        Err(e) => (e.exit_code(), serde_json::json!({ "error": e.to_string() }).to_string()),
    })
}

#[pymodule]
fn qproc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPhasePoint>()?;
    m.add_class::<PyCell>()?;
    m.add_class::<PyHistory>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(bargmann_invariant, m)?)?;
    m.add_function(wrap_pyfunction!(extract_phase, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
