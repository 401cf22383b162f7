//! Central finite-difference checks of analytic gradients.
//!
//! Each [`GradCase`] builds a computation from fresh input leaves. Non-scalar
//! outputs are reduced with a fixed random projection so that one backward
//! pass checks a full vector-Jacobian product.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Suite-wide pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-3;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One input of a case; `differentiable == false` inputs are fed as constants.
pub struct CaseInput {
    pub value: Tensor,
    pub differentiable: bool,
}

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<CaseInput>,
    build: Builder,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<CaseInput>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }
}

pub fn diff(value: Tensor) -> CaseInput {
    CaseInput {
        value,
        differentiable: true,
    }
}

pub fn fixed(value: Tensor) -> CaseInput {
    CaseInput {
        value,
        differentiable: false,
    }
}

/// Uniform tensor in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

#[derive(Debug, Error)]
#[error("gradcheck failed for: {}", .failures.iter().map(|c| format!("{} (max rel err {:.3e})", c.name, c.max_rel_error)).collect::<Vec<_>>().join(", "))]
pub struct GradcheckFailure {
    pub failures: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&CaseReport> {
        self.cases
            .iter()
            .filter(|c| !(c.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn into_result(self) -> std::result::Result<Self, GradcheckFailure> {
        if self.passed() {
            Ok(self)
        } else {
            Err(GradcheckFailure {
                failures: self.failures().into_iter().cloned().collect(),
            })
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(2).max(2);
        writeln!(f, "{:<width$}  {:>12}  {:>8}  status", "op", "max_rel_err", "checked")?;
        for c in &self.cases {
            let status = if c.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>8}  {status}",
                c.name, c.max_rel_error, c.checked
            )?;
        }
        Ok(())
    }
}

fn evaluate(case: &GradCase, inputs: &[Tensor], projection: &Option<Tensor>) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(inputs)
        .map(|(spec, t)| {
            if spec.differentiable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = match projection {
        Some(p) => tape.weighted_sum(out, p.clone())?,
        None => out,
    };
    Ok((tape, vars, loss))
}

/// Checks one case; the projection for non-scalar outputs is drawn from `rng`.
pub fn check_case(case: &GradCase, rng: &mut impl Rng) -> Result<CaseReport> {
    let base: Vec<Tensor> = case.inputs.iter().map(|i| i.value.clone()).collect();
    let (probe, _, out) = evaluate(case, &base, &None)?;
    let projection = (probe.value(out).numel() > 1)
        .then(|| uniform(rng, probe.shape(out), -1.0, 1.0));

    let (mut tape, vars, loss) = evaluate(case, &base, &projection)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, spec) in case.inputs.iter().enumerate() {
        if !spec.differentiable {
            continue;
        }
        let analytic = tape
            .grad(vars[k])
            .unwrap_or_else(|| Tensor::zeros(spec.value.shape()));
        for j in 0..spec.value.numel() {
            let mut shifted = base.clone();
            let x0 = base[k].data()[j];
            shifted[k].data_mut()[j] = x0 + STEP;
            let (t_plus, _, l_plus) = evaluate(case, &shifted, &projection)?;
            shifted[k].data_mut()[j] = x0 - STEP;
            let (t_minus, _, l_minus) = evaluate(case, &shifted, &projection)?;
            let numeric = (t_plus.value(l_plus).item() - t_minus.value(l_minus).item()) / (2.0 * STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            checked += 1;
        }
    }
    Ok(CaseReport {
        name: case.name.clone(),
        max_rel_error: worst,
        checked,
    })
}

/// Runs `cases` with a generator seeded from `seed`.
pub fn run_cases(cases: &[GradCase], seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let reports = cases
        .iter()
        .map(|c| check_case(c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        cases: reports,
    })
}

/// Random small instances of every built-in differentiable op.
pub fn builtin_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    for &(stride, padding, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        cases.push(GradCase::new(
            format!("conv2d[k{k},s{stride},p{padding}]"),
            vec![
                diff(uniform(r, &[1, 2, 4, 4], -2.0, 2.0)),
                diff(uniform(r, &[3, 2, k, k], -2.0, 2.0)),
                diff(uniform(r, &[3], -2.0, 2.0)),
            ],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding),
        ));
    }
    let shape = [2, 3, 2, 2];
    cases.push(GradCase::new("relu", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| Ok(t.relu(v[0]))));
    cases.push(GradCase::new("sigmoid", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| {
        Ok(t.sigmoid(v[0]))
    }));
    cases.push(GradCase::new("exp", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| Ok(t.exp(v[0]))));
    cases.push(GradCase::new("abs", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| Ok(t.abs(v[0]))));
    cases.push(GradCase::new("mul_scalar", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| {
        Ok(t.mul_scalar(v[0], -1.7))
    }));
    for name in ["add", "sub", "mul", "mse_elementwise"] {
        cases.push(GradCase::new(
            name,
            vec![diff(uniform(r, &shape, -2.0, 2.0)), diff(uniform(r, &shape, -2.0, 2.0))],
            move |t, v| match name {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                "mul" => t.mul(v[0], v[1]),
                _ => t.mse_elementwise(v[0], v[1]),
            },
        ));
    }
    cases.push(GradCase::new(
        "bce_prob",
        vec![diff(uniform(r, &shape, 0.05, 0.95)), fixed(uniform(r, &shape, 0.0, 1.0))],
        |t, v| t.bce_prob(v[0], v[1]),
    ));
    cases.push(GradCase::new(
        "max_over_channels",
        vec![diff(uniform(r, &[1, 4, 3, 3], -2.0, 2.0))],
        |t, v| t.max_over_channels(v[0]),
    ));
    cases.push(GradCase::new(
        "upsample_nearest2x",
        vec![diff(uniform(r, &[1, 2, 2, 3], -2.0, 2.0))],
        |t, v| t.upsample_nearest2x(v[0]),
    ));
    cases.push(GradCase::new("sum", vec![diff(uniform(r, &shape, -2.0, 2.0))], |t, v| Ok(t.sum(v[0]))));
    let w = uniform(r, &shape, -1.0, 1.0);
    cases.push(GradCase::new(
        "weighted_sum",
        vec![diff(uniform(r, &shape, -2.0, 2.0))],
        move |t, v| t.weighted_sum(v[0], w.clone()),
    ));
    let m = uniform(r, &[2, 1, 2, 2], 0.0, 1.0);
    cases.push(GradCase::new(
        "site_weighted_sum",
        vec![diff(uniform(r, &shape, -2.0, 2.0))],
        move |t, v| t.site_weighted_sum(v[0], m.clone()),
    ));
    let targets = Tensor::from_fn(&shape, |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    cases.push(GradCase::new(
        "sigmoid_focal_sum",
        vec![diff(uniform(r, &shape, -2.0, 2.0))],
        move |t, v| t.sigmoid_focal_sum(v[0], targets.clone(), 2.0, 0.25),
    ));
    cases
}

/// Gradient check of every built-in op on seed-derived random inputs.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    run_cases(&builtin_cases(seed), seed)
}
