//! Python module `pycsopt`: instances, the auction and its baseline, the
//! protocol simulator and the reputation rule.
//!
//! Money crosses the boundary as decimal strings ("24.00") so nothing is
//! rounded; inputs may also be ints or floats.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyString;

use csopt::chain::{end_to_end_delay as delay, run_scripted, ChainConfig, ScriptedRun, Timing};
use csopt::experiment::{generate_scenario, Scenario};
use csopt::gssum::{run_gssum_with, GssumScore};
use csopt::oracle::brute_force_ae;
use csopt::reputation::{inclusion_probability as inclusion, rational};
use csopt::{AuctionInstance, AuctionOutcome, Bid, Credits, TaskId, UserId};

create_exception!(pycsopt, CsoptError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    CsoptError::new_err(e.to_string())
}

fn credits(value: &Bound<'_, PyAny>) -> PyResult<Credits> {
    if let Ok(s) = value.cast::<PyString>() {
        return s.to_str()?.parse().map_err(err);
    }
    if let Ok(i) = value.extract::<i64>() {
        return Ok(Credits::from_whole(i));
    }
    Ok(Credits::from_f64_rounded(value.extract::<f64>()?))
}

/// An auction instance.
#[pyclass(name = "Instance", module = "pycsopt", from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: AuctionInstance,
}

#[pymethods]
impl PyInstance {
    /// `bids` is a list of `(user_id, cost_per_task, task_ids)` tuples.
    #[new]
    #[pyo3(signature = (n_tasks, bids, alpha=0.9, beta=0.9, repeat=None))]
    fn new(
        n_tasks: u32,
        bids: Vec<(UserId, Bound<'_, PyAny>, Vec<TaskId>)>,
        alpha: f64,
        beta: f64,
        repeat: Option<u32>,
    ) -> PyResult<Self> {
        let bids = bids
            .into_iter()
            .map(|(user, cost, tasks)| Ok(Bid::new(user, credits(&cost)?, tasks)))
            .collect::<PyResult<Vec<_>>>()?;
        let mut inner = AuctionInstance::with_task_count(n_tasks, bids, alpha, beta);
        inner.repeat_override = repeat;
        inner.check().map_err(err)?;
        Ok(PyInstance { inner })
    }

    /// A random grid scenario.
    #[staticmethod]
    #[pyo3(signature = (users, tasks, seed=0, radius=15.0, grid=100, repeat=None))]
    fn generate(users: usize, tasks: usize, seed: u64, radius: f64, grid: u32, repeat: Option<u32>) -> PyResult<Self> {
        let s = Scenario { n_users: users, n_tasks: tasks, seed, bid_radius: radius, grid_size: grid, repeat, ..Scenario::default() };
        Ok(PyInstance { inner: generate_scenario(&s).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyInstance { inner: serde_json::from_str(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn repeat(&self) -> PyResult<u32> {
        self.inner.repeat().map_err(err)
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.inner.tasks.len()
    }

    #[getter]
    fn n_bids(&self) -> usize {
        self.inner.bids.len()
    }

    fn __repr__(&self) -> String {
        format!("Instance(tasks={}, bids={})", self.inner.tasks.len(), self.inner.bids.len())
    }
}

/// Allocation and payments of one auction run.
#[pyclass(name = "Outcome", module = "pycsopt")]
struct PyOutcome {
    inner: AuctionOutcome,
}

#[pymethods]
impl PyOutcome {
    #[getter]
    fn r(&self) -> u32 {
        self.inner.r
    }

    #[getter]
    fn total_payment(&self) -> String {
        self.inner.total_payment.to_string()
    }

    #[getter]
    fn total_cost(&self) -> String {
        self.inner.total_cost.to_string()
    }

    /// Payment per bidder as decimal strings.
    #[getter]
    fn payments(&self) -> BTreeMap<UserId, String> {
        self.inner.payments.iter().map(|(u, p)| (*u, p.to_string())).collect()
    }

    /// Task ids assigned to each winner.
    #[getter]
    fn allocation(&self) -> BTreeMap<UserId, Vec<TaskId>> {
        self.inner.allocation.iter().map(|(u, copies)| (u, copies.iter().map(|c| c.task_id).collect())).collect()
    }

    fn utility(&self, user: UserId, true_cost: Bound<'_, PyAny>) -> PyResult<String> {
        Ok(self.inner.utility(user, credits(&true_cost)?).to_string())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Outcome(r={}, total_payment={})", self.inner.r, self.inner.total_payment)
    }
}

#[pyfunction]
fn repeat_factor(alpha: f64, beta: f64) -> PyResult<u32> {
    csopt::repeat_factor(alpha, beta).map_err(err)
}

#[pyfunction]
fn run_csopt(instance: &PyInstance) -> PyResult<PyOutcome> {
    Ok(PyOutcome { inner: csopt::run_csopt(&instance.inner).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (instance, r=None, score="set_cost_per_gain"))]
fn run_gssum(instance: &PyInstance, r: Option<u32>, score: &str) -> PyResult<PyOutcome> {
    let r = match r {
        Some(r) => r,
        None => instance.inner.repeat().map_err(err)?,
    };
    let score: GssumScore = score.parse().map_err(err)?;
    Ok(PyOutcome { inner: run_gssum_with(&instance.inner, r, score).map_err(err)? })
}

/// Minimum assignment cost found by exhaustive search.
#[pyfunction]
fn brute_force_cost(instance: &PyInstance, r: u32) -> PyResult<String> {
    Ok(brute_force_ae(&instance.inner, r).map_err(err)?.0.to_string())
}

#[pyfunction]
fn end_to_end_delay(t_b: f64, t_ann: f64, t_bidding: f64, t_auction: f64, t_task: f64) -> f64 {
    delay(&Timing { block_interval: t_b, announcement: t_ann, bidding: t_bidding, auction: t_auction, task: t_task })
}

/// Runs the full protocol and returns completion time, formula value and
/// payments per winning user.
#[pyfunction]
#[pyo3(signature = (instance, t_b=1.0, t_ann=2.0, t_bidding=5.0, t_auction=1.0, t_task=10.0))]
fn simulate_protocol(
    py: Python<'_>,
    instance: &PyInstance,
    t_b: f64,
    t_ann: f64,
    t_bidding: f64,
    t_auction: f64,
    t_task: f64,
) -> PyResult<Py<PyAny>> {
    let timing = Timing { block_interval: t_b, announcement: t_ann, bidding: t_bidding, auction: t_auction, task: t_task };
    let run = run_scripted(&ScriptedRun::new(instance.inner.clone(), timing), ChainConfig::default()).map_err(err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("completed_at", run.completed_at)?;
    dict.set_item("formula", delay(&timing))?;
    dict.set_item("blocks", run.chain.height())?;
    dict.set_item("escrowed", run.chain.escrowed().to_string())?;
    let winners: BTreeMap<UserId, String> = run.winners.iter().map(|(u, p)| (*u, p.to_string())).collect();
    dict.set_item("winners", winners)?;
    Ok(dict.into_any().unbind())
}

/// `rho / (rho + 1)` for `rho = num / den`, as a `fractions.Fraction`.
#[pyfunction]
#[pyo3(signature = (num, den=1))]
fn inclusion_probability(py: Python<'_>, num: i64, den: i64) -> PyResult<Py<PyAny>> {
    if den <= 0 || num < 0 {
        return Err(err("reputation must be a nonnegative fraction"));
    }
    let p = inclusion(&rational(num, den));
    let fraction = py.import("fractions")?.getattr("Fraction")?;
    Ok(fraction.call1((p.numer().to_string().parse::<i64>()?, p.denom().to_string().parse::<i64>()?))?.unbind())
}

#[pymodule]
fn pycsopt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CsoptError", m.py().get_type::<CsoptError>())?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyOutcome>()?;
    m.add_function(wrap_pyfunction!(repeat_factor, m)?)?;
    m.add_function(wrap_pyfunction!(run_csopt, m)?)?;
    m.add_function(wrap_pyfunction!(run_gssum, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_cost, m)?)?;
    m.add_function(wrap_pyfunction!(end_to_end_delay, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(inclusion_probability, m)?)?;
    Ok(())
}
