//! The NCDG objective, optimizers, and the training and evaluation loops.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tape, Var};
use crate::coverage::{
    coverage_loss, coverage_loss_replay, coverage_ratio, coverage_regularizer_full, normalize_all, observe,
    CoverageMode, CoverageRecord, CoverageTrace, LayerTrace, NeuronActMap, NormScope,
};
use crate::data::{self, Batch, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{forward, ConvNetWidths, ModelSpec, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drops the gradient-similarity term (beta = 0).
    NoGrad,
    /// Drops the coverage term (lambda = 0).
    NoCov,
}

/// Which second stream is paired with the raw data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    Reverse,
    /// Raw data only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub t: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many steps when non-zero.
    pub iterations: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub second_order: bool,
    pub coverage_mode: CoverageMode,
    pub norm_scope: NormScope,
    pub ablation: Ablation,
    pub augment: Augment,
    pub widths: ConvNetWidths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            t: 0.005,
            beta: 0.01,
            lr: 1e-4,
            batch_size: 32,
            epochs: 5,
            iterations: 0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            second_order: true,
            coverage_mode: CoverageMode::Bootstrapped,
            norm_scope: NormScope::PerSample,
            ablation: Ablation::None,
            augment: Augment::Reverse,
            widths: ConvNetWidths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return bad(format!("t must lie in (0, 1), got {}", self.t));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 && self.iterations == 0 {
            return bad("set epochs or iterations".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be > 0".into());
        }
        if self.augment == Augment::None && self.effective_beta() > 0.0 {
            return bad("beta > 0 needs an augmented stream (augment = reverse)".into());
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ablation == Ablation::NoCov {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablation == Ablation::NoGrad {
            0.0
        } else {
            self.beta
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.effective_lambda(),
            t: self.t,
            beta: self.effective_beta(),
            second_order: self.second_order,
            coverage_mode: self.coverage_mode,
            norm_scope: self.norm_scope,
        }
    }
}

/// The loss-shaping subset of [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub t: f64,
    pub beta: f64,
    pub second_order: bool,
    pub coverage_mode: CoverageMode,
    pub norm_scope: NormScope,
}

/// Whether coverage decisions are taken now or replayed.
pub enum Bookkeeping<'a> {
    /// Decide from current values and update the map, raw branch first.
    Live(&'a mut NeuronActMap),
    /// Reuse earlier decisions for the raw and augmented branches.
    Replay {
        raw: &'a CoverageTrace,
        aug: Option<&'a CoverageTrace>,
    },
}

/// One branch of the objective on the tape.
pub struct LcovParts {
    pub loss: Var,
    pub ce: Var,
    /// The regularizer before weighting; absent when lambda is 0.
    pub cov: Option<Var>,
    pub trace: CoverageTrace,
}

fn full_trace(selections: Vec<crate::coverage::Selection>, sizes: &[usize]) -> CoverageTrace {
    CoverageTrace {
        layers: selections
            .into_iter()
            .zip(sizes)
            .map(|(selection, &n)| LayerTrace {
                selection,
                inactive: (0..n).collect(),
            })
            .collect(),
    }
}

/// `CE - lambda * coverage` for one batch.
#[allow(clippy::too_many_arguments)]
pub fn l_cov<T: Element>(
    tape: &Tape<T>,
    spec: &ModelSpec,
    params: &[(String, Var)],
    images: Var,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    live: Option<&mut NeuronActMap>,
    replay: Option<&CoverageTrace>,
) -> Result<LcovParts> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = forward(tape, spec, params, images)?;
    let log_probs = tape.log_softmax(out.logits)?;
    let ce = tape.nll_loss(log_probs, labels)?;
    if let Some(map) = live {
        if cfg.lambda == 0.0 {
            observe(tape, &out.layer_outputs, map, cfg.t, cfg.norm_scope)?;
            return Ok(LcovParts {
                loss: ce,
                ce,
                cov: None,
                trace: CoverageTrace::default(),
            });
        }
        let (cov, trace) = match cfg.coverage_mode {
            CoverageMode::Bootstrapped => coverage_loss(tape, &out.layer_outputs, map, cfg.t, cfg.norm_scope)?,
            CoverageMode::Full => {
                observe(tape, &out.layer_outputs, map, cfg.t, cfg.norm_scope)?;
                let (_, sels) = tape.no_grad(|| normalize_all(tape, &out.layer_outputs, cfg.norm_scope))?;
                let cov = coverage_regularizer_full(tape, &out.layer_outputs, cfg.norm_scope)?;
                (cov, full_trace(sels, &spec.tracked_sizes()))
            }
        };
        let weighted = tape.scale(cov, cfg.lambda)?;
        let loss = tape.sub(ce, weighted)?;
        return Ok(LcovParts {
            loss,
            ce,
            cov: Some(cov),
            trace,
        });
    }
    let trace = replay.ok_or_else(|| Error::InvalidArgument("l_cov needs a map or a trace".into()))?;
    if cfg.lambda == 0.0 {
        return Ok(LcovParts {
            loss: ce,
            ce,
            cov: None,
            trace: trace.clone(),
        });
    }
    let cov = coverage_loss_replay(tape, &out.layer_outputs, trace)?;
    let weighted = tape.scale(cov, cfg.lambda)?;
    let loss = tape.sub(ce, weighted)?;
    Ok(LcovParts {
        loss,
        ce,
        cov: Some(cov),
        trace: trace.clone(),
    })
}

/// Single global L2 norm of the concatenated gradient differences.
pub fn l_sim_vars<T: Element>(tape: &Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "gradient sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&ga, &gb) in a.iter().zip(b) {
        let d = tape.sub(ga, gb)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    tape.sqrt(total.expect("non-empty"))
}

/// [`l_sim_vars`] over two gradient maps. Differentiable maps are used
/// through their tape handles; others enter as constants.
pub fn l_sim<T: Element>(tape: &Tape<T>, a: &GradMap<T>, b: &GradMap<T>) -> Result<Var> {
    if a.names != b.names {
        return Err(Error::InvalidArgument(format!(
            "gradient maps cover different parameters: {:?} vs {:?}",
            a.names, b.names
        )));
    }
    let handles = |m: &GradMap<T>| -> Vec<Var> {
        match &m.vars {
            Some(v) => v.clone(),
            None => m.grads.iter().map(|g| tape.constant(g.clone())).collect(),
        }
    };
    let (va, vb) = (handles(a), handles(b));
    l_sim_vars(tape, &va, &vb)
}

/// A batch placed on a tape.
pub struct BatchInput<'a> {
    pub images: Var,
    pub labels: &'a [usize],
}

/// Gradients and component values of the full objective
/// `L_cov(raw) + L_cov(aug) + beta * L_sim`.
pub struct ObjectiveOutput<T: Element> {
    pub grads: Vec<Tensor<T>>,
    /// Gradient of `L_sim` alone, when it was differentiated.
    pub sim_grads: Option<Vec<Tensor<T>>>,
    pub total: f64,
    pub ce_raw: f64,
    pub ce_aug: f64,
    pub cov_raw: f64,
    pub cov_aug: f64,
    pub lcov_raw: f64,
    pub lcov_aug: f64,
    pub sim: f64,
    pub trace_raw: CoverageTrace,
    pub trace_aug: Option<CoverageTrace>,
}

fn scalar<T: Element>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// Evaluates the objective and its parameter gradients.
pub fn objective_gradients<T: Element>(
    tape: &Tape<T>,
    spec: &ModelSpec,
    params: &[(String, Var)],
    raw: &BatchInput<'_>,
    aug: Option<&BatchInput<'_>>,
    cfg: &ObjectiveConfig,
    book: Bookkeeping<'_>,
) -> Result<ObjectiveOutput<T>> {
    let ids: Vec<Var> = params.iter().map(|(_, v)| *v).collect();
    let (lr, la) = match book {
        Bookkeeping::Live(map) => {
            let lr = l_cov(tape, spec, params, raw.images, raw.labels, cfg, Some(&mut *map), None)?;
            let la = match aug {
                Some(a) => Some(l_cov(tape, spec, params, a.images, a.labels, cfg, Some(map), None)?),
                None => None,
            };
            (lr, la)
        }
        Bookkeeping::Replay { raw: tr, aug: ta } => {
            let lr = l_cov(tape, spec, params, raw.images, raw.labels, cfg, None, Some(tr))?;
            let la = match (aug, ta) {
                (Some(a), Some(t)) => Some(l_cov(tape, spec, params, a.images, a.labels, cfg, None, Some(t))?),
                (None, _) => None,
                (Some(_), None) => return Err(Error::InvalidArgument("missing augmented trace".into())),
            };
            (lr, la)
        }
    };
    let value = |v: Option<Var>| v.map_or(0.0, |v| scalar(tape, v));
    let mut out = ObjectiveOutput {
        grads: Vec::new(),
        sim_grads: None,
        total: 0.0,
        ce_raw: scalar(tape, lr.ce),
        ce_aug: la.as_ref().map_or(0.0, |l| scalar(tape, l.ce)),
        cov_raw: value(lr.cov),
        cov_aug: value(la.as_ref().and_then(|l| l.cov)),
        lcov_raw: scalar(tape, lr.loss),
        lcov_aug: la.as_ref().map_or(0.0, |l| scalar(tape, l.loss)),
        sim: 0.0,
        trace_raw: lr.trace.clone(),
        trace_aug: la.as_ref().map(|l| l.trace.clone()),
    };
    let grad_vars = match &la {
        Some(la) if cfg.beta > 0.0 => {
            let g_raw = tape.backward(lr.loss, &ids, cfg.second_order)?;
            let g_aug = tape.backward(la.loss, &ids, cfg.second_order)?;
            let sim = l_sim_vars(tape, &g_raw, &g_aug)?;
            out.sim = scalar(tape, sim);
            let total = tape.no_grad(|| -> Result<Var> {
                let s = tape.add(lr.loss, la.loss)?;
                let w = tape.scale(sim, cfg.beta)?;
                tape.add(s, w)
            })?;
            out.total = scalar(tape, total);
            let sim_grads = if cfg.second_order {
                Some(tape.backward(sim, &ids, false)?)
            } else {
                None
            };
            tape.no_grad(|| -> Result<Vec<Var>> {
                let mut grads = Vec::with_capacity(ids.len());
                for i in 0..ids.len() {
                    let mut g = tape.add(g_raw[i], g_aug[i])?;
                    if let Some(sg) = &sim_grads {
                        let w = tape.scale(sg[i], cfg.beta)?;
                        g = tape.add(g, w)?;
                    }
                    grads.push(g);
                }
                out.sim_grads = sim_grads.map(|s| s.iter().map(|&v| tape.value(v)).collect());
                Ok(grads)
            })?
        }
        Some(la) => {
            let total = tape.add(lr.loss, la.loss)?;
            out.total = scalar(tape, total);
            tape.backward(total, &ids, false)?
        }
        None => {
            out.total = out.lcov_raw;
            tape.backward(lr.loss, &ids, false)?
        }
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            what: format!(
                "total loss (ce_raw {}, ce_aug {}, cov_raw {}, cov_aug {}, sim {})",
                out.ce_raw, out.ce_aug, out.cov_raw, out.cov_aug, out.sim
            ),
            value: out.total,
        });
    }
    out.grads = grad_vars.iter().map(|&g| tape.value(g)).collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<T: Element> {
    Adam(AdamState<T>),
    Sgd,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => Self::Sgd,
        }
    }
}

fn check_grads<T: Element>(params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (e, g) in params.entries.iter().zip(grads) {
        if g.shape() != e.tensor.shape() {
            return Err(Error::shape(
                "optimizer",
                format!(
                    "{}: gradient {:?} vs parameter {:?}",
                    e.name,
                    g.shape(),
                    e.tensor.shape()
                ),
            ));
        }
        if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", e.name),
                value: v.as_f64(),
            });
        }
    }
    Ok(())
}

/// Adam with bias correction.
pub fn adam_update<T: Element>(
    state: &mut AdamState<T>,
    params: &ParamStore<T>,
    grads: &[Tensor<T>],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<ParamStore<T>> {
    check_grads(params, grads)?;
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(&params.entries)
            .any(|(m, e)| m.shape() != e.tensor.shape())
    {
        return Err(Error::shape("adam_update", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let (b1, b2) = (T::of(betas.0), T::of(betas.1));
    let (one_b1, one_b2) = (T::of(1.0 - betas.0), T::of(1.0 - betas.1));
    let c1 = T::of(1.0 - betas.0.powi(state.step as i32));
    let c2 = T::of(1.0 - betas.1.powi(state.step as i32));
    let (lr, eps) = (T::of(lr), T::of(eps));
    let mut out = Vec::with_capacity(params.len());
    for ((e, g), (m, v)) in params
        .entries
        .iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut p = e.tensor.clone();
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + one_b1 * gi;
            vd[i] = b2 * vd[i] + one_b2 * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        out.push(p);
    }
    params.with_tensors(out)
}

pub fn sgd_update<T: Element>(params: &ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<ParamStore<T>> {
    check_grads(params, grads)?;
    let lr = T::of(lr);
    let out = params
        .entries
        .iter()
        .zip(grads)
        .map(|(e, g)| e.tensor.zip_map(g, |p, gi| p - lr * gi))
        .collect();
    params.with_tensors(out)
}

/// One metrics line per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub ce_raw: f64,
    pub ce_aug: f64,
    pub cov_raw: f64,
    pub cov_aug: f64,
    pub lcov_raw: f64,
    pub lcov_aug: f64,
    pub sim: f64,
    pub total: f64,
    pub coverage_ratio: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Equality of every field except wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        let bits = |r: &Self| {
            [
                r.ce_raw,
                r.ce_aug,
                r.cov_raw,
                r.cov_aug,
                r.lcov_raw,
                r.lcov_aug,
                r.sim,
                r.total,
                r.coverage_ratio,
            ]
            .map(f64::to_bits)
        };
        self.iteration == other.iteration && self.epoch == other.epoch && bits(self) == bits(other)
    }
}

/// One optimizer step on a paired raw/augmented batch.
#[allow(clippy::too_many_arguments)]
pub fn ncdg_step(
    spec: &ModelSpec,
    params: &ParamStore<f32>,
    raw: &Batch,
    aug: Option<&Batch>,
    map: &mut NeuronActMap,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<f32>,
    (iteration, epoch): (usize, usize),
) -> Result<(ParamStore<f32>, MetricsRecord)> {
    let start = Instant::now();
    if let Some(a) = aug {
        if a.indices != raw.indices || a.labels != raw.labels {
            return Err(Error::InvalidArgument(
                "raw and augmented batches are not aligned".into(),
            ));
        }
    }
    let tape = Tape::<f32>::new();
    let vars = params.register(&tape);
    let raw_in = BatchInput {
        images: tape.constant(raw.images.clone()),
        labels: &raw.labels,
    };
    let aug_in = aug.map(|a| BatchInput {
        images: tape.constant(a.images.clone()),
        labels: &a.labels,
    });
    let out = objective_gradients(
        &tape,
        spec,
        &vars,
        &raw_in,
        aug_in.as_ref(),
        &cfg.objective(),
        Bookkeeping::Live(map),
    )
    .map_err(|e| match e {
        Error::NonFinite { what, value } => Error::NonFinite {
            what: format!("iteration {iteration}: {what}"),
            value,
        },
        other => other,
    })?;
    drop(tape);
    let updated = match opt {
        OptimizerState::Adam(state) => adam_update(
            state,
            params,
            &out.grads,
            cfg.lr,
            (cfg.adam_beta1, cfg.adam_beta2),
            cfg.adam_eps,
        )?,
        OptimizerState::Sgd => sgd_update(params, &out.grads, cfg.lr)?,
    };
    let record = MetricsRecord {
        iteration,
        epoch,
        ce_raw: out.ce_raw,
        ce_aug: out.ce_aug,
        cov_raw: out.cov_raw,
        cov_aug: out.cov_aug,
        lcov_raw: out.lcov_raw,
        lcov_aug: out.lcov_aug,
        sim: out.sim,
        total: out.total,
        coverage_ratio: coverage_ratio(map).global_ratio,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((updated, record))
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    /// The map has just been reset for `epoch`.
    EpochStart {
        epoch: usize,
        act_map: &'a NeuronActMap,
    },
    Step {
        record: &'a MetricsRecord,
        act_map: &'a NeuronActMap,
    },
    EpochEnd {
        coverage: &'a CoverageRecord,
    },
}

pub struct TrainOutput {
    pub params: ParamStore<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub coverage: Vec<CoverageRecord>,
}

/// Runs the training loop. Both streams are visited in the same seeded order.
pub fn train(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    params: ParamStore<f32>,
    raw: &ImageDataset,
    aug: Option<&ImageDataset>,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let aug = match cfg.augment {
        Augment::None => None,
        Augment::Reverse => {
            Some(aug.ok_or_else(|| Error::Config("augment = reverse needs an augmented dataset".into()))?)
        }
    };
    if let Some(a) = aug {
        if a.len() != raw.len() || a.labels != raw.labels {
            return Err(Error::InvalidArgument(
                "raw and augmented datasets are not aligned".into(),
            ));
        }
    }
    let mut params = params;
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut map = NeuronActMap::new(spec);
    let mut metrics = Vec::new();
    let mut coverage = Vec::new();
    let mut iteration = 0;
    let mut epoch = 0;
    loop {
        let done = if cfg.iterations > 0 {
            iteration >= cfg.iterations
        } else {
            epoch >= cfg.epochs
        };
        if done {
            break;
        }
        map.reset(epoch);
        on_event(TrainEvent::EpochStart { epoch, act_map: &map })?;
        let order = data::permutation(raw.len(), cfg.seed, epoch);
        for idx in data::batch_indices(&order, cfg.batch_size)? {
            if cfg.iterations > 0 && iteration >= cfg.iterations {
                break;
            }
            let rb = data::make_batch(raw, &idx)?;
            let ab = aug.map(|a| data::make_batch(a, &idx)).transpose()?;
            let (next, record) = ncdg_step(
                spec,
                &params,
                &rb,
                ab.as_ref(),
                &mut map,
                cfg,
                &mut opt,
                (iteration, epoch),
            )?;
            params = next;
            on_event(TrainEvent::Step {
                record: &record,
                act_map: &map,
            })?;
            metrics.push(record);
            iteration += 1;
        }
        let record = CoverageRecord::new(epoch, coverage_ratio(&map));
        on_event(TrainEvent::EpochEnd { coverage: &record })?;
        coverage.push(record);
        epoch += 1;
    }
    Ok(TrainOutput {
        params,
        metrics,
        coverage,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n: usize,
}

/// Predicted classes for every sample, in dataset order.
pub fn predict(
    spec: &ModelSpec,
    params: &ParamStore<f32>,
    dataset: &ImageDataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(dataset.len());
    for idx in data::sequential_batches(dataset, batch_size)? {
        let batch = data::make_batch(dataset, &idx)?;
        let tape = Tape::<f32>::new();
        let vars = params.register_frozen(&tape);
        let x = tape.constant(batch.images);
        let out = forward(&tape, spec, &vars, x)?;
        let logits = tape.value(out.logits);
        preds.extend(logits.data().chunks(spec.num_classes).map(argmax));
    }
    Ok(preds)
}

pub fn evaluate(spec: &ModelSpec, params: &ParamStore<f32>, dataset: &ImageDataset) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(spec, params, dataset, 100)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, l)| p == l).count();
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        n: dataset.len(),
    })
}

/// Coverage of `dataset` streamed once through the model with a fresh map.
pub fn dataset_coverage(
    spec: &ModelSpec,
    params: &ParamStore<f32>,
    dataset: &ImageDataset,
    t: f64,
    scope: NormScope,
) -> Result<crate::coverage::CoverageStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut map = NeuronActMap::new(spec);
    for idx in data::sequential_batches(dataset, 100)? {
        let batch = data::make_batch(dataset, &idx)?;
        let tape = Tape::<f32>::new();
        let vars = params.register_frozen(&tape);
        let x = tape.constant(batch.images);
        let out = forward(&tape, spec, &vars, x)?;
        observe(&tape, &out.layer_outputs, &mut map, t, scope)?;
    }
    Ok(coverage_ratio(&map))
}
