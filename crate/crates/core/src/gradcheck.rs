//! Analytic gradients against central finite differences on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_gradient, max_relative_error, GradMap, Tape, Var};
use crate::coverage::{CoverageMode, CoverageTrace, NeuronActMap, NormScope};
use crate::error::{Error, Result};
use crate::nn::{init_params, ModelSpec, ParamStore};
use crate::tensor::Tensor;
use crate::training::{objective_gradients, BatchInput, Bookkeeping, ObjectiveConfig, ObjectiveOutput};

pub const PRESETS: &[&str] = &["mlp-small"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub preset: String,
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub batch: usize,
    pub seed: u64,
    pub lambda: f64,
    pub beta: f64,
    pub t: f64,
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl GradcheckSettings {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mlp-small" => Ok(Self {
                preset: name.into(),
                inputs: 8,
                hidden: 16,
                classes: 4,
                batch: 6,
                seed: 0,
                lambda: 0.1,
                beta: 0.01,
                // High enough that some neurons stay inactive and the
                // coverage term contributes a gradient.
                t: 0.5,
                eps: 1e-6,
                floor: 1e-4,
                tolerance: 1e-4,
            }),
            _ => Err(Error::Config(format!(
                "unknown gradcheck preset {name:?} (known: {PRESETS:?})"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub settings: GradcheckSettings,
    pub params: usize,
    /// `L_cov` on the raw batch.
    pub first_order: CheckResult,
    /// The full objective, differentiated through the gradient-similarity term.
    pub second_order: CheckResult,
    pub pass: bool,
}

struct Problem {
    spec: ModelSpec,
    params: ParamStore<f64>,
    raw: (Tensor<f64>, Vec<usize>),
    aug: (Tensor<f64>, Vec<usize>),
}

fn problem(s: &GradcheckSettings) -> Result<Problem> {
    let spec = ModelSpec::perceptron(s.inputs, s.hidden, s.classes)?;
    let params = init_params::<f64>(&spec, s.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let x: Vec<f64> = (0..s.batch * s.inputs).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..s.batch).map(|_| rng.random_range(0..s.classes)).collect();
    let x = Tensor::new(vec![s.batch, s.inputs], x)?;
    let aug = (x.map(|v| 1.0 - v), labels.clone());
    Ok(Problem {
        spec,
        params,
        raw: (x, labels),
        aug,
    })
}

fn run(
    p: &Problem,
    values: &[Tensor<f64>],
    cfg: &ObjectiveConfig,
    with_aug: bool,
    replay: Option<(&CoverageTrace, Option<&CoverageTrace>)>,
) -> Result<ObjectiveOutput<f64>> {
    let tape = Tape::new();
    let vars: Vec<(String, Var)> = p
        .params
        .names()
        .into_iter()
        .zip(values)
        .map(|(n, t)| (n, tape.param(t.clone())))
        .collect();
    let raw = BatchInput {
        images: tape.constant(p.raw.0.clone()),
        labels: &p.raw.1,
    };
    let aug = with_aug.then(|| BatchInput {
        images: tape.constant(p.aug.0.clone()),
        labels: &p.aug.1,
    });
    let mut map = NeuronActMap::new(&p.spec);
    let book = match replay {
        Some((r, a)) => Bookkeeping::Replay { raw: r, aug: a },
        None => Bookkeeping::Live(&mut map),
    };
    objective_gradients(&tape, &p.spec, &vars, &raw, aug.as_ref(), cfg, book)
}

fn check(p: &Problem, s: &GradcheckSettings, cfg: ObjectiveConfig, with_aug: bool) -> Result<CheckResult> {
    let base = run(p, &p.params.tensors(), &cfg, with_aug, None)?;
    let value_cfg = ObjectiveConfig {
        second_order: false,
        ..cfg
    };
    let named: Vec<(String, Tensor<f64>)> = p.params.names().into_iter().zip(p.params.tensors()).collect();
    let (tr, ta) = (&base.trace_raw, base.trace_aug.as_ref());
    let numeric = finite_diff_gradient(
        |v| Ok(run(p, v, &value_cfg, with_aug, Some((tr, ta)))?.total),
        &named,
        s.eps,
    )?;
    let analytic = GradMap {
        names: p.params.names(),
        grads: base.grads,
        vars: None,
    };
    let max_rel_err = max_relative_error(&analytic, &numeric, s.floor)?;
    Ok(CheckResult {
        max_rel_err,
        pass: max_rel_err < s.tolerance,
    })
}

pub fn run_gradcheck(settings: &GradcheckSettings) -> Result<GradcheckReport> {
    let p = problem(settings)?;
    let cfg = |beta: f64| ObjectiveConfig {
        lambda: settings.lambda,
        t: settings.t,
        beta,
        second_order: true,
        coverage_mode: CoverageMode::Bootstrapped,
        norm_scope: NormScope::PerSample,
    };
    let first_order = check(&p, settings, cfg(0.0), false)?;
    let second_order = check(&p, settings, cfg(settings.beta), true)?;
    Ok(GradcheckReport {
        settings: settings.clone(),
        params: p.params.scalar_count(),
        pass: first_order.pass && second_order.pass,
        first_order,
        second_order,
    })
}
