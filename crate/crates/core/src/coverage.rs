//! Neuron normalization, epoch-scoped activation bookkeeping and the
//! bootstrapped coverage loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::tensor::{Element, Tensor};

/// Which values share one min/max pair during normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each sample is normalized over its own neurons.
    #[default]
    PerSample,
    /// One min/max over every sample and neuron of the batch.
    Batch,
}

/// Bootstrapped (inactive neurons only) or full regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    #[default]
    Bootstrapped,
    Full,
}

/// Per tracked layer, whether each neuron has activated during the current epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronActMap {
    pub layers: Vec<String>,
    pub activated: Vec<Vec<bool>>,
    pub epoch: usize,
}

impl NeuronActMap {
    pub fn new(spec: &ModelSpec) -> Self {
        Self::with_sizes(spec.tracked_layers.clone(), &spec.tracked_sizes())
    }

    pub fn with_sizes(layers: Vec<String>, sizes: &[usize]) -> Self {
        Self {
            layers,
            activated: sizes.iter().map(|&n| vec![false; n]).collect(),
            epoch: 0,
        }
    }

    /// Clears every neuron and moves to `epoch`.
    pub fn reset(&mut self, epoch: usize) {
        for layer in &mut self.activated {
            layer.fill(false);
        }
        self.epoch = epoch;
    }

    pub fn activated_count(&self) -> usize {
        self.activated.iter().flatten().filter(|&&a| a).count()
    }

    pub fn total(&self) -> usize {
        self.activated.iter().map(Vec::len).sum()
    }

    /// True when every neuron activated in `self` is also activated in `later`.
    pub fn is_subset_of(&self, later: &Self) -> bool {
        self.activated.len() == later.activated.len()
            && self
                .activated
                .iter()
                .zip(&later.activated)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCoverage {
    pub layer: String,
    pub activated: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub per_layer: Vec<LayerCoverage>,
    pub global_ratio: f64,
}

/// One line of the coverage report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub epoch: usize,
    pub per_layer: Vec<LayerCoverage>,
    pub global_ratio: f64,
}

impl CoverageRecord {
    pub fn new(epoch: usize, stats: CoverageStats) -> Self {
        Self {
            epoch,
            per_layer: stats.per_layer,
            global_ratio: stats.global_ratio,
        }
    }
}

pub fn coverage_ratio(map: &NeuronActMap) -> CoverageStats {
    let per_layer: Vec<LayerCoverage> = map
        .layers
        .iter()
        .zip(&map.activated)
        .map(|(name, a)| LayerCoverage {
            layer: name.clone(),
            activated: a.iter().filter(|&&x| x).count(),
            total: a.len(),
        })
        .collect();
    let total: usize = per_layer.iter().map(|l| l.total).sum();
    let activated: usize = per_layer.iter().map(|l| l.activated).sum();
    CoverageStats {
        per_layer,
        global_ratio: if total == 0 {
            0.0
        } else {
            activated as f64 / total as f64
        },
    }
}

/// Neuron values of one tracked output: identity for `[B, U]`, channel
/// spatial mean for `[B, C, H, W]`.
pub fn neuron_values<T: Element>(tape: &Tape<T>, output: Var) -> Result<Var> {
    let shape = tape.shape(output);
    match shape[..] {
        [_, _] => Ok(output),
        [b, c, h, w] => {
            let flat = tape.reshape(output, vec![b, c, h * w])?;
            tape.mean_axis(flat, 2)
        }
        _ => Err(Error::shape(
            "neuron_values",
            format!("expected [B, U] or [B, C, H, W], got {shape:?}"),
        )),
    }
}

/// The min/max positions used to normalize one layer, frozen at the values
/// they were chosen from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub scope: NormScope,
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
    /// Groups whose max equals their min; their output is zero.
    pub degenerate: Vec<bool>,
}

/// Chooses the first minimum and first maximum of each normalization group.
pub fn select<T: Element>(values: &Tensor<T>, scope: NormScope) -> Result<Selection> {
    let (rows, cols) = match values.shape()[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::shape(
                "normalize",
                format!("expected [B, N], got {:?}", values.shape()),
            ))
        }
    };
    if rows == 0 || cols == 0 {
        return Err(Error::shape("normalize", format!("empty values {:?}", values.shape())));
    }
    let data = values.data();
    let groups: Vec<(usize, usize)> = match scope {
        NormScope::PerSample => (0..rows).map(|r| (r * cols, (r + 1) * cols)).collect(),
        NormScope::Batch => vec![(0, rows * cols)],
    };
    let mut sel = Selection {
        scope,
        argmin: Vec::with_capacity(groups.len()),
        argmax: Vec::with_capacity(groups.len()),
        degenerate: Vec::with_capacity(groups.len()),
    };
    for (lo, hi) in groups {
        let (mut mn, mut mx) = (lo, lo);
        for i in lo + 1..hi {
            if data[i] < data[mn] {
                mn = i;
            }
            if data[i] > data[mx] {
                mx = i;
            }
        }
        sel.argmin.push(mn);
        sel.argmax.push(mx);
        sel.degenerate
            .push(data[mx].partial_cmp(&data[mn]) != Some(std::cmp::Ordering::Greater));
    }
    Ok(sel)
}

/// Max-min normalization of `values` (`[B, N]`) under a fixed selection.
///
/// Gradients flow through the selected min and max values; degenerate groups
/// are masked to zero and receive no gradient.
pub fn normalize_with<T: Element>(tape: &Tape<T>, values: Var, sel: &Selection) -> Result<Var> {
    let shape = tape.shape(values);
    let (rows, cols) = match shape[..] {
        [r, c] => (r, c),
        _ => return Err(Error::shape("normalize", format!("expected [B, N], got {shape:?}"))),
    };
    let groups = match sel.scope {
        NormScope::PerSample => rows,
        NormScope::Batch => 1,
    };
    if sel.argmin.len() != groups {
        return Err(Error::shape(
            "normalize",
            format!("selection has {} groups, values need {groups}", sel.argmin.len()),
        ));
    }
    let spread = |idx: &[usize]| -> Result<Var> {
        let picked = tape.gather(values, idx.to_vec(), vec![groups])?;
        match sel.scope {
            NormScope::PerSample => tape.broadcast_axis(picked, 1, cols),
            NormScope::Batch => {
                let s = tape.reshape(picked, vec![])?;
                tape.expand_scalar(s, vec![rows, cols])
            }
        }
    };
    let mn = spread(&sel.argmin)?;
    let mx = spread(&sel.argmax)?;
    let num = tape.sub(values, mn)?;
    let range = tape.sub(mx, mn)?;
    let group_of = |r: usize| if sel.scope == NormScope::PerSample { r } else { 0 };
    let per_cell = |f: &dyn Fn(bool) -> f64| -> Result<Tensor<T>> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| f(sel.degenerate[group_of(i / cols)]))
            .collect();
        Tensor::from_f64(vec![rows, cols], &data)
    };
    if sel.degenerate.iter().all(|&d| !d) {
        return tape.div(num, range);
    }
    let pad = tape.constant(per_cell(&|d| if d { 1.0 } else { 0.0 })?);
    let keep = tape.constant(per_cell(&|d| if d { 0.0 } else { 1.0 })?);
    let safe = tape.add(range, pad)?;
    let q = tape.div(num, safe)?;
    tape.mul(q, keep)
}

/// Max-min normalization with min/max chosen from the current values.
pub fn normalize<T: Element>(tape: &Tape<T>, values: Var, scope: NormScope) -> Result<(Var, Selection)> {
    let sel = select(&tape.value(values), scope)?;
    let out = normalize_with(tape, values, &sel)?;
    Ok((out, sel))
}

/// What one coverage-loss call decided for one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub selection: Selection,
    /// Neurons that stayed inactive and were summed, ascending.
    pub inactive: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageTrace {
    pub layers: Vec<LayerTrace>,
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "activation threshold t must lie in (0, 1], got {t}"
        )))
    }
}

/// Marks every neuron whose normalized value exceeds `t` for some sample.
fn mark_activated<T: Element>(normalized: &Tensor<T>, t: f64, activated: &mut [bool]) {
    let cols = normalized.shape()[1];
    for (i, v) in normalized.data().iter().enumerate() {
        if v.as_f64() > t {
            activated[i % cols] = true;
        }
    }
}

fn check_map(map: &NeuronActMap, n_layers: usize) -> Result<()> {
    if map.activated.len() != n_layers {
        return Err(Error::InvalidArgument(format!(
            "activation map tracks {} layers, got {n_layers} outputs",
            map.activated.len()
        )));
    }
    Ok(())
}

/// Sum over layers of the batch-mean normalized value of each neuron in
/// `take(layer)`, or all neurons when `take` returns `None`.
fn sum_scores<T: Element>(
    tape: &Tape<T>,
    normalized: &[Var],
    take: impl Fn(usize) -> Option<Vec<usize>>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &nv) in normalized.iter().enumerate() {
        let score = tape.mean_axis(nv, 0)?;
        let term = match take(i) {
            None => tape.sum(score)?,
            Some(idx) if idx.is_empty() => continue,
            Some(idx) => {
                let n = idx.len();
                let picked = tape.gather(score, idx, vec![n])?;
                tape.sum(picked)?
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Bootstrapped coverage loss.
///
/// Neurons that are already active, or whose normalized value exceeds `t` for
/// any sample of this batch, are marked in `map` first. The remaining
/// inactive neurons contribute their batch-mean normalized value.
pub fn coverage_loss<T: Element>(
    tape: &Tape<T>,
    layer_outputs: &[Var],
    map: &mut NeuronActMap,
    t: f64,
    scope: NormScope,
) -> Result<(Var, CoverageTrace)> {
    check_threshold(t)?;
    check_map(map, layer_outputs.len())?;
    let mut normalized = Vec::with_capacity(layer_outputs.len());
    let mut trace = CoverageTrace::default();
    for (i, &out) in layer_outputs.iter().enumerate() {
        let values = neuron_values(tape, out)?;
        let (nv, selection) = normalize(tape, values, scope)?;
        let value = tape.value(nv);
        let act = &mut map.activated[i];
        if act.len() != value.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "layer {} has {} neurons, activation map expects {}",
                map.layers[i],
                value.shape()[1],
                act.len()
            )));
        }
        mark_activated(&value, t, act);
        let inactive = (0..act.len()).filter(|&j| !act[j]).collect();
        normalized.push(nv);
        trace.layers.push(LayerTrace { selection, inactive });
    }
    let loss = sum_scores(tape, &normalized, |i| Some(trace.layers[i].inactive.clone()))?;
    Ok((loss, trace))
}

/// Recomputes the coverage loss with every decision taken from `trace`.
/// Used to differentiate numerically with the bookkeeping held fixed.
pub fn coverage_loss_replay<T: Element>(tape: &Tape<T>, layer_outputs: &[Var], trace: &CoverageTrace) -> Result<Var> {
    if trace.layers.len() != layer_outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "trace covers {} layers, got {} outputs",
            trace.layers.len(),
            layer_outputs.len()
        )));
    }
    let normalized = layer_outputs
        .iter()
        .zip(&trace.layers)
        .map(|(&out, lt)| {
            let values = neuron_values(tape, out)?;
            normalize_with(tape, values, &lt.selection)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_scores(tape, &normalized, |i| Some(trace.layers[i].inactive.clone()))
}

/// Non-bootstrapped regularizer: batch mean of the sum of every normalized
/// neuron value across tracked layers.
pub fn coverage_regularizer_full<T: Element>(tape: &Tape<T>, layer_outputs: &[Var], scope: NormScope) -> Result<Var> {
    let (normalized, _) = normalize_all(tape, layer_outputs, scope)?;
    sum_scores(tape, &normalized, |_| None)
}

/// Full regularizer with frozen selections.
pub fn coverage_regularizer_full_replay<T: Element>(
    tape: &Tape<T>,
    layer_outputs: &[Var],
    selections: &[Selection],
) -> Result<Var> {
    let normalized = layer_outputs
        .iter()
        .zip(selections)
        .map(|(&out, sel)| {
            let values = neuron_values(tape, out)?;
            normalize_with(tape, values, sel)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_scores(tape, &normalized, |_| None)
}

/// Normalized neuron values of every tracked layer and their selections.
pub fn normalize_all<T: Element>(
    tape: &Tape<T>,
    layer_outputs: &[Var],
    scope: NormScope,
) -> Result<(Vec<Var>, Vec<Selection>)> {
    let mut out = Vec::with_capacity(layer_outputs.len());
    let mut sels = Vec::with_capacity(layer_outputs.len());
    for &o in layer_outputs {
        let values = neuron_values(tape, o)?;
        let (nv, sel) = normalize(tape, values, scope)?;
        out.push(nv);
        sels.push(sel);
    }
    Ok((out, sels))
}

/// Updates `map` from a batch without building a loss.
pub fn observe<T: Element>(
    tape: &Tape<T>,
    layer_outputs: &[Var],
    map: &mut NeuronActMap,
    t: f64,
    scope: NormScope,
) -> Result<()> {
    check_threshold(t)?;
    check_map(map, layer_outputs.len())?;
    let (normalized, _) = tape.no_grad(|| normalize_all(tape, layer_outputs, scope))?;
    for (i, nv) in normalized.iter().enumerate() {
        let value = tape.value(*nv);
        if map.activated[i].len() != value.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "layer {} has {} neurons, activation map expects {}",
                map.layers[i],
                value.shape()[1],
                map.activated[i].len()
            )));
        }
        mark_activated(&value, t, &mut map.activated[i]);
    }
    Ok(())
}
