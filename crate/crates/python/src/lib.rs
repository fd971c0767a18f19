//! Python bindings: instances, the operational cost model, exact and
//! approximate solvers, policy evaluation and the queue simulator.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowdfleet::dp::{self, InitialState, LearningRate, PlvfaConfig};
use crowdfleet::eval::{self, EvalOptions, Policy};
use crowdfleet::fluid::{self, service_level};
use crowdfleet::instance;
use crowdfleet::mdp::{self, FleetState};
use crowdfleet::sim::{self, derive_routing, fluid_bound_check};

type Fleet = (u32, u32, u32);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Instance", module = "crowdfleet", from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: instance::Instance,
}

#[pymethods]
impl PyInstance {
    /// The bundled 18-zone instance.
    #[staticmethod]
    fn builtin() -> Self {
        Self { inner: instance::Instance::builtin_grubhub() }
    }

    /// A file path or `builtin:grubhub18`.
    #[staticmethod]
    fn load(spec: &str) -> PyResult<Self> {
        instance::Instance::resolve(spec).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        instance::Instance::from_toml_str(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn single_zone(demand: f64, r_km: f64) -> Self {
        Self { inner: instance::Instance::single_zone(demand, r_km) }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn zones(&self) -> usize {
        self.inner.zones
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.strategic.horizon
    }

    /// `(fd, gw, od)` caps.
    #[getter]
    fn caps(&self) -> (u32, u32, u32) {
        let c = self.inner.strategic.caps;
        (c.fd, c.gw, c.od)
    }

    #[setter]
    fn set_caps(&mut self, caps: (u32, u32, u32)) {
        self.inner.strategic.caps = instance::Fleet { fd: caps.0, gw: caps.1, od: caps.2 };
    }

    #[getter]
    fn initial(&self) -> (u32, u32, u32) {
        let c = self.inner.strategic.initial;
        (c.fd, c.gw, c.od)
    }

    #[setter]
    fn set_initial(&mut self, fleet: (u32, u32, u32)) {
        self.inner.strategic.initial = instance::Fleet { fd: fleet.0, gw: fleet.1, od: fleet.2 };
    }

    #[setter]
    fn set_horizon(&mut self, horizon: usize) {
        self.inner.strategic.horizon = horizon;
    }

    /// Turnover probabilities as a dict with keys `p_fd p_gw p_od q_gw q_od`.
    #[getter]
    fn turnover<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let t = &self.inner.turnover;
        let d = PyDict::new(py);
        for (k, v) in [("p_fd", t.p_fd), ("p_gw", t.p_gw), ("p_od", t.p_od), ("q_gw", t.q_gw), ("q_od", t.q_od)] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    #[pyo3(signature = (p_fd=None, p_gw=None, p_od=None, q_gw=None, q_od=None))]
    fn set_turnover(
        &mut self,
        p_fd: Option<f64>,
        p_gw: Option<f64>,
        p_od: Option<f64>,
        q_gw: Option<f64>,
        q_od: Option<f64>,
    ) -> PyResult<()> {
        let t = &mut self.inner.turnover;
        for (slot, v) in [(&mut t.p_fd, p_fd), (&mut t.p_gw, p_gw), (&mut t.p_od, p_od), (&mut t.q_gw, q_gw), (&mut t.q_od, q_od)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        self.inner.validate().map_err(err)
    }

    /// Total request rate at period `t`.
    fn demand_total(&self, t: usize) -> PyResult<f64> {
        self.inner.demand_total(t).map_err(err)
    }

    fn with_demand_scaled(&self, factor: f64) -> Self {
        Self { inner: self.inner.with_demand_scaled(factor) }
    }

    fn __repr__(&self) -> String {
        format!("Instance(name={:?}, zones={}, horizon={})", self.inner.name, self.inner.zones, self.inner.strategic.horizon)
    }
}

/// Operational cost model with cached cost curves.
#[pyclass(name = "OpsModel", module = "crowdfleet", frozen)]
struct PyOpsModel {
    inner: fluid::OpsModel,
}

#[pymethods]
impl PyOpsModel {
    #[new]
    fn new(inst: &PyInstance) -> PyResult<Self> {
        fluid::OpsModel::new(&inst.inner).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn instance(&self) -> PyInstance {
        PyInstance { inner: self.inner.instance().clone() }
    }

    /// Operational cost rate in $/h.
    fn cost_rate(&self, py: Python<'_>, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> PyResult<f64> {
        py.detach(|| self.inner.cost_rate(n_fd, n_gw, n_od, t)).map_err(err)
    }

    /// `C_ops` for one strategic step.
    fn ops_cost(&self, py: Python<'_>, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> PyResult<f64> {
        py.detach(|| self.inner.ops_cost(n_fd, n_gw, n_od, t)).map_err(err)
    }

    fn min_fd_full_service(&self, py: Python<'_>, n_gw: u32, n_od: u32, t: usize) -> PyResult<u32> {
        py.detach(|| self.inner.min_fd_full_service(n_gw, n_od, t)).map_err(err)
    }

    /// Full fluid solution as a dict of rates, coverage and routing matrices.
    fn solve<'py>(&self, py: Python<'py>, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> PyResult<Bound<'py, PyDict>> {
        let sol = py.detach(|| self.inner.solve(n_fd, n_gw, n_od, t)).map_err(err)?;
        let inst = self.inner.instance();
        let d = PyDict::new(py);
        d.set_item("cost_rate", sol.cost_rate)?;
        d.set_item("fd_serving", sol.rates.fd_serving)?;
        d.set_item("fd_relocation", sol.rates.fd_relocation)?;
        d.set_item("gw", sol.rates.gw)?;
        d.set_item("od", sol.rates.od)?;
        d.set_item("penalty", sol.rates.penalty)?;
        d.set_item("service_level", service_level(&sol, &sol.lambda, &inst.request_pattern))?;
        let (gw, od) = fluid::unmatched_cd_shares(inst, &sol);
        d.set_item("unmatched_gw", gw)?;
        d.set_item("unmatched_od", od)?;
        d.set_item("lambda", sol.lambda.clone())?;
        d.set_item("a_fd", sol.a_fd.clone())?;
        d.set_item("a_gw", sol.a_gw.clone())?;
        d.set_item("a_od", sol.a_od.clone())?;
        d.set_item("a_null", sol.a_null.clone())?;
        d.set_item("e", sol.e.clone())?;
        d.set_item("f", sol.f.clone())?;
        Ok(d)
    }

    /// Total step cost `(ops, fix, sev)` of hiring `action` in the given state.
    fn total_cost(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize, action: i64) -> PyResult<(f64, f64, f64)> {
        let c = mdp::total_cost(&self.inner, FleetState::new(n_fd, n_gw, n_od, t), action).map_err(err)?;
        Ok((c.ops, c.fix, c.sev))
    }
}

#[pyclass(name = "ValueTable", module = "crowdfleet", from_py_object)]
#[derive(Clone)]
struct PyValueTable {
    inner: dp::ValueTable,
}

#[pymethods]
impl PyValueTable {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dp::ValueTable::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dp::ValueTable::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn value(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Option<f64> {
        self.inner.value(FleetState::new(n_fd, n_gw, n_od, t))
    }

    fn action(&self, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> Option<i64> {
        self.inner.action(FleetState::new(n_fd, n_gw, n_od, t))
    }
}

#[pyclass(name = "SlopeTable", module = "crowdfleet", from_py_object)]
#[derive(Clone)]
struct PySlopeTable {
    inner: dp::SlopeTable,
}

#[pymethods]
impl PySlopeTable {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dp::SlopeTable::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dp::SlopeTable::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __len__(&self) -> usize {
        self.inner.slopes.len()
    }

    fn is_monotone(&self) -> bool {
        self.inner.is_monotone()
    }

    /// Slope vector stored for the aggregated key, or zeros.
    fn slopes(&self, n_gw: u32, n_od: u32, t: usize) -> Vec<f64> {
        let key = self.inner.key(FleetState::new(0, n_gw, n_od, t));
        (0..=self.inner.fd_cap).map(|k| self.inner.slope(key, k)).collect()
    }
}

#[pyfunction]
fn bdp_solve(py: Python<'_>, ops: &PyOpsModel) -> PyResult<PyValueTable> {
    py.detach(|| dp::bdp_solve(&ops.inner)).map(|inner| PyValueTable { inner }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (ops, episodes, seed, alpha=1e-3, k_gw=100, k_od=100, epsilon=0.05, harmonic=false, start=None))]
#[allow(clippy::too_many_arguments)]
fn plvfa_train(
    py: Python<'_>,
    ops: &PyOpsModel,
    episodes: usize,
    seed: u64,
    alpha: f64,
    k_gw: u32,
    k_od: u32,
    epsilon: f64,
    harmonic: bool,
    start: Option<(u32, u32, u32)>,
) -> PyResult<PySlopeTable> {
    let mut cfg = PlvfaConfig::new(episodes, seed);
    cfg.alpha = alpha;
    cfg.k_gw = k_gw;
    cfg.k_od = k_od;
    cfg.epsilon = epsilon;
    if harmonic {
        cfg.learning_rate = LearningRate::Harmonic;
    }
    if let Some((n_fd, n_gw, n_od)) = start {
        cfg.initial = InitialState::Point { n_fd, n_gw, n_od };
    }
    py.detach(|| dp::plvfa_train(&ops.inner, &cfg)).map(|out| PySlopeTable { inner: out.table }).map_err(err)
}

fn to_policy(obj: &Bound<'_, PyAny>) -> PyResult<Policy> {
    if let Ok(t) = obj.extract::<PyValueTable>() {
        return Ok(Policy::BdpTable(t.inner));
    }
    if let Ok(t) = obj.extract::<PySlopeTable>() {
        return Ok(Policy::Plvfa(t.inner));
    }
    match obj.extract::<String>()?.as_str() {
        "myopic" => Ok(Policy::Myopic),
        "fd-only" => Ok(Policy::FdOnlyMyopic),
        "never-hire" => Ok(Policy::NeverHire),
        other => Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    }
}

/// Evaluates a policy (`"myopic"`, `"fd-only"`, `"never-hire"`, a ValueTable or a
/// SlopeTable) and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (ops, policy, start, rollouts, seed, compare_myopic=false, compare_fd_only=false, hiring_gap=false, oracle=None, jobs=1))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    ops: &PyOpsModel,
    policy: &Bound<'py, PyAny>,
    start: (u32, u32, u32),
    rollouts: usize,
    seed: u64,
    compare_myopic: bool,
    compare_fd_only: bool,
    hiring_gap: bool,
    oracle: Option<f64>,
    jobs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let policy = to_policy(policy)?;
    let s0 = FleetState::new(start.0, start.1, start.2, 0);
    let opts = EvalOptions { oracle, compare_myopic, compare_fd_only, hiring_gap, jobs };
    let ev = py.detach(|| eval::evaluate(&ops.inner, &policy, s0, rollouts, seed, &opts)).map_err(err)?;
    let r = ev.report;
    let d = PyDict::new(py);
    d.set_item("policy", r.policy)?;
    d.set_item("rollouts", r.rollouts)?;
    d.set_item("mean_cost", r.mean_cost)?;
    d.set_item("std_cost", r.std_cost)?;
    d.set_item("mean_discounted", r.mean_discounted)?;
    d.set_item("std_discounted", r.std_discounted)?;
    d.set_item("delta_oracle", r.delta_oracle)?;
    d.set_item("delta_myopic", r.delta_myopic)?;
    d.set_item("h", r.h)?;
    d.set_item("h_bar", r.h_bar)?;
    d.set_item("hiring_gap", r.hiring_gap)?;
    d.set_item("service_level", r.mean_service_level)?;
    let s = r.shares;
    let shares = PyDict::new(py);
    for (k, v) in [
        ("fd_fix", s.fd_fix),
        ("fd_variable", s.fd_variable),
        ("gw", s.gw),
        ("od", s.od),
        ("penalty", s.penalty),
        ("severance", s.severance),
    ] {
        shares.set_item(k, v)?;
    }
    d.set_item("shares", shares)?;
    let finals: Vec<(u32, u32, u32)> =
        ev.trajectories.iter().filter_map(|t| t.steps.last()).map(|s| (s.n_fd_post, s.state.n_gw, s.state.n_od)).collect();
    d.set_item("terminal_fleets", finals)?;
    Ok(d)
}

/// Successor distribution of a post-decision state under constant turnover.
#[pyfunction]
fn transition_pmf(inst: &PyInstance, n_fd: u32, n_gw: u32, n_od: u32, t: usize) -> PyResult<Vec<(Fleet, f64)>> {
    let pmf = mdp::transition_pmf(&inst.inner, FleetState::new(n_fd, n_gw, n_od, t)).map_err(err)?;
    Ok(pmf.into_iter().map(|(s, p)| ((s.n_fd, s.n_gw, s.n_od), p)).collect())
}

/// One seeded queue simulation with fluid-derived routing.
#[pyfunction]
#[pyo3(signature = (inst, n_fd, n_gw, n_od, t, seed, hours=40.0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    inst: &PyInstance,
    n_fd: u32,
    n_gw: u32,
    n_od: u32,
    t: usize,
    seed: u64,
    hours: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let inst = &inst.inner;
    let (stats, lp_rate) = py
        .detach(|| -> Result<_, fluid::FluidError> {
            let sol = fluid::OpsModel::new(inst)?.solve(n_fd, n_gw, n_od, t)?;
            let cfg = sim::SimConfig { hours, ..Default::default() };
            let stats = sim::simulate(inst, n_fd, n_gw, n_od, t, &derive_routing(inst, &sol), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok((stats, sol.cost_rate))
        })
        .map_err(err)?;
    let (holds, margin) = fluid_bound_check(stats.cost_rate, stats.half_width, lp_rate);
    let d = PyDict::new(py);
    d.set_item("cost_rate", stats.cost_rate)?;
    d.set_item("half_width", stats.half_width)?;
    d.set_item("lp_rate", lp_rate)?;
    d.set_item("bound_holds", holds)?;
    d.set_item("margin", margin)?;
    d.set_item("relocation_km", stats.relocation_km)?;
    d.set_item("arrivals", stats.arrivals)?;
    d.set_item("penalized", stats.penalized)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "crowdfleet")]
fn crowdfleet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyOpsModel>()?;
    m.add_class::<PyValueTable>()?;
    m.add_class::<PySlopeTable>()?;
    m.add_function(wrap_pyfunction!(bdp_solve, m)?)?;
    m.add_function(wrap_pyfunction!(plvfa_train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(transition_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
