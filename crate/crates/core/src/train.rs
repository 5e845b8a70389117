//! Losses, importance weighting, optimisers and the streaming learner.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeLabel, GraphState, NeighborSample, NodeKey};
use crate::metrics::{self, EvalRecord, NLL_FLOOR};
use crate::model::{FeatureScaler, HeadOutputs, Model};
use crate::pipeline::{
    replay, routing, ClickSample, DeliveredSample, DeliveryKind, Label, PipelineConfig, Policy,
};
use crate::tensor::{GradBuffer, ParamSet, Tape, Var};

/// Negative-class weight formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RatioMode {
    /// `p(y=0|x) / b(y=0|x)` in closed form.
    #[default]
    Exact,
    /// The published loss weight, missing the `1 / (1 - y_p)` factor.
    Paper,
}

impl RatioMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RatioMode::Exact => "EXACT",
            RatioMode::Paper => "PAPER",
        }
    }
}

impl std::str::FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EXACT" => Ok(RatioMode::Exact),
            "PAPER" => Ok(RatioMode::Paper),
            _ => Err(Error::Config(format!("unknown ratio mode `{s}`"))),
        }
    }
}

/// Importance weights `(w_pos, w_neg)` for a record with head estimates
/// `y_p` (positive inside the window) and `y_fn` (fake negative).
///
/// Both estimates must lie in `[0, 1)` with `y_p + y_fn < 1`.
pub fn importance_ratios(y_p: f64, y_fn: f64, mode: RatioMode) -> Result<(f64, f64)> {
    let inside = |v: f64| (0.0..1.0).contains(&v);
    if !inside(y_p) || !inside(y_fn) || y_p + y_fn >= 1.0 {
        return Err(Error::Contract(format!(
            "importance ratios need y_p, y_fn in [0, 1) with y_p + y_fn < 1, got ({y_p}, {y_fn})"
        )));
    }
    Ok(ratio_formula(y_p, y_fn, mode))
}

fn ratio_formula(y_p: f64, y_fn: f64, mode: RatioMode) -> (f64, f64) {
    let w_pos = 1.0 + y_fn;
    let paper = (1.0 + y_fn) * (1.0 - y_p - y_fn);
    let w_neg = match mode {
        RatioMode::Paper => paper,
        // y_p = 1 leaves no negatives to weight
        RatioMode::Exact if y_p >= 1.0 => 0.0,
        RatioMode::Exact => paper / (1.0 - y_p),
    };
    (w_pos, w_neg)
}

const SIMPLEX_MARGIN: f64 = 1e-6;

/// Scales `(y_p, y_fn)` back inside the open simplex; reports whether it had to.
pub fn project_simplex(y_p: f64, y_fn: f64) -> ((f64, f64), bool) {
    let s = y_p + y_fn;
    if s < 1.0 - SIMPLEX_MARGIN {
        return ((y_p, y_fn), false);
    }
    let k = (1.0 - SIMPLEX_MARGIN) / s;
    ((y_p * k, y_fn * k), true)
}

/// Value of the debiased loss over `(heads, label)` pairs, with the number of
/// clamped probabilities.
pub fn debias_loss_value(batch: &[(HeadOutputs, bool)], mode: RatioMode) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut clamps = 0;
    for (h, y) in batch {
        let (w_pos, w_neg) = importance_ratios(h.y_p_hat, h.y_fn_hat, mode)?;
        let c = h.y_cvr_hat.clamp(NLL_FLOOR, 1.0 - NLL_FLOOR);
        if c != h.y_cvr_hat {
            clamps += 1;
        }
        loss -= if *y {
            w_pos * c.ln()
        } else {
            w_neg * (1.0 - c).ln()
        };
    }
    Ok((loss, clamps))
}

/// Debiased loss on the tape. `aux` holds the p/fn head values, which enter
/// only as constant weights.
pub fn debias_loss(
    tape: &mut Tape,
    y_cvr: Var,
    aux: &[(f64, f64)],
    labels: &[bool],
    mode: RatioMode,
) -> Result<(Var, usize)> {
    let mut weights = Vec::with_capacity(labels.len());
    for (&(p, f), &y) in aux.iter().zip(labels) {
        let (w_pos, w_neg) = importance_ratios(p, f, mode)?;
        weights.push(if y { w_pos } else { w_neg });
    }
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y))).collect();
    tape.binary_cross_entropy(y_cvr, &targets, &weights, NLL_FLOOR)
}

/// Supervision for the p and fn heads: `(p target, fn target)`.
pub fn aux_targets(kind: DeliveryKind, label: Label) -> (f64, f64) {
    let p = kind == DeliveryKind::WindowEnd && label == Label::Positive;
    let f = kind == DeliveryKind::Calibration;
    (f64::from(u8::from(p)), f64::from(u8::from(f)))
}

/// Summed BCE of both auxiliary heads.
pub fn aux_losses(
    tape: &mut Tape,
    y_p: Var,
    y_fn: Var,
    records: &[(DeliveryKind, Label)],
) -> Result<(Var, usize)> {
    let (tp, tf): (Vec<f64>, Vec<f64>) = records.iter().map(|&(k, l)| aux_targets(k, l)).unzip();
    let ones = vec![1.0; records.len()];
    let (lp, cp) = tape.binary_cross_entropy(y_p, &tp, &ones, NLL_FLOOR)?;
    let (lf, cf) = tape.binary_cross_entropy(y_fn, &tf, &ones, NLL_FLOOR)?;
    Ok((tape.add(lp, lf)?, cp + cf))
}

/// One feature cell of a synthetic ground-truth distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mass: f64,
    /// `p(y = 1 | x)`.
    pub p1: f64,
    /// `p(t_d > l_w | x, y = 1)`.
    pub q: f64,
    /// Fixed model score at this cell, in `(0, 1)`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDistribution {
    pub cells: Vec<Cell>,
}

impl SyntheticDistribution {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for (i, c) in self.cells.iter().enumerate() {
            if !unit(c.mass) || !unit(c.p1) || !unit(c.q) || !(c.score > 0.0 && c.score < 1.0) {
                return Err(Error::Contract(format!("cell {i} out of range: {c:?}")));
            }
        }
        let total: f64 = self.cells.iter().map(|c| c.mass).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "cell masses sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub mode: RatioMode,
    /// Expected log-loss of the score under the true distribution.
    pub ideal_loss: f64,
    /// Importance-weighted expected log-loss under the delivered stream.
    pub weighted_loss: f64,
    pub gap: f64,
}

/// Enumerates the delivered stream of every cell (window-end positives,
/// window-end negatives including fake negatives, and calibration
/// duplicates) and compares its weighted expected loss against the ideal.
///
/// Weights use the oracle head values `y_p = p1 (1 - q)`, `y_fn = p1 q`.
/// The duplicated stream is normalised per cell, so the click marginal is
/// the true one.
pub fn distribution_oracle(dist: &SyntheticDistribution, mode: RatioMode) -> Result<OracleReport> {
    dist.validate()?;
    let mut ideal = 0.0;
    let mut weighted = 0.0;
    for c in &dist.cells {
        let l1 = -c.score.ln();
        let l0 = -(1.0 - c.score).ln();
        ideal += c.mass * (c.p1 * l1 + (1.0 - c.p1) * l0);

        let on_time = c.p1 * (1.0 - c.q);
        let late = c.p1 * c.q;
        let records = [(on_time, true), ((1.0 - c.p1) + late, false), (late, true)];
        let total: f64 = records.iter().map(|r| r.0).sum();
        let (w_pos, w_neg) = ratio_formula(on_time, late, mode);
        for (m, y) in records {
            let b = m / total;
            weighted += c.mass * b * if y { w_pos * l1 } else { w_neg * l0 };
        }
    }
    Ok(OracleReport {
        mode,
        ideal_loss: ideal,
        weighted_loss: weighted,
        gap: (weighted - ideal).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Option<GradBuffer>,
    v: Option<GradBuffer>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: None,
            v: None,
            t: 0,
        })
    }

    /// Applies one update with gradient `scale · grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuffer, scale: f64) {
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    for (w, gv) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                        *w -= lr * scale * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let m = self.m.get_or_insert_with(|| GradBuffer::zeros_like(params));
                let v = self.v.get_or_insert_with(|| GradBuffer::zeros_like(params));
                self.t += 1;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (id, g) in grads.iter() {
                    let mi = m.get_mut(id);
                    let vi = v.get_mut(id);
                    let w = params.get_mut(id).data_mut();
                    for j in 0..g.len() {
                        let gj = scale * g[j];
                        if gj == 0.0 && mi[j] == 0.0 {
                            continue;
                        }
                        mi[j] = b1 * mi[j] + (1.0 - b1) * gj;
                        vi[j] = b2 * vi[j] + (1.0 - b2) * gj * gj;
                        w[j] -= lr * (mi[j] / c1) / ((vi[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Which loss a learner minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Plain BCE on all three heads (offline warm start).
    Pretrain,
    /// Plain BCE on the CVR head only.
    Plain,
    /// Importance-weighted CVR loss plus both auxiliary losses.
    Debiased(RatioMode),
}

impl Objective {
    pub fn for_policy(policy: Policy, mode: RatioMode) -> Self {
        match policy {
            Policy::Dgdfem | Policy::Esdfm => Objective::Debiased(mode),
            _ => Objective::Plain,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Pretrain => "PRETRAIN",
            Objective::Plain => "PLAIN",
            Objective::Debiased(m) => m.as_str(),
        }
    }
}

/// Neighbourhood of a click's user and item as of `t`. Seeds not yet in
/// the graph (or without an attribute at `t`) enter as isolated nodes
/// carrying the click's own features.
pub fn neighborhood(
    graph: &GraphState,
    click: &ClickSample,
    hops: usize,
    t: f64,
) -> Result<NeighborSample> {
    let user = NodeKey::user(click.user_id);
    let item = NodeKey::item(click.item_id);
    let known = |k: NodeKey| graph.attribute_at(k, t).is_some();
    let present: Vec<NodeKey> = [user, item].into_iter().filter(|&k| known(k)).collect();
    if present.is_empty() {
        return Ok(NeighborSample::isolated(
            vec![
                (user, click.user_features.clone()),
                (item, click.item_features.clone()),
            ],
            hops,
            t,
        ));
    }
    let mut s = graph.khop_sample(&present, hops, t)?;
    if present.len() == 2 {
        return Ok(s);
    }
    let (missing, attr) = if present[0] == user {
        (item, &click.item_features)
    } else {
        (user, &click.user_features)
    };
    let iso = NeighborSample::isolated(vec![(missing, attr.clone())], hops, t);
    s.nodes
        .insert(0, iso.nodes.into_iter().next().expect("one seed"));
    for e in &mut s.edges {
        e.user += 1;
        e.item += 1;
    }
    Ok(s)
}

/// Head values for a click at time `t`, without recording gradients.
pub fn predict(
    model: &Model,
    params: &ParamSet,
    graph: &GraphState,
    scaler: &FeatureScaler,
    click: &ClickSample,
    hops: usize,
    t: f64,
) -> Result<(HeadOutputs, Option<f64>)> {
    let sample = neighborhood(graph, click, hops, t)?;
    let mut tape = Tape::inference(params);
    let out = model.forward(
        &mut tape,
        scaler,
        &sample,
        NodeKey::user(click.user_id),
        NodeKey::item(click.item_id),
    )?;
    Ok((out.values(&tape), out.mean_filter_weight))
}

/// Result of one optimiser update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Summed loss over the batch (before the update).
    pub loss: f64,
    pub clamp_count: usize,
    /// `(ŷ_cvr, delivered label)` per batch element, before the update.
    pub predictions: Vec<(f64, bool)>,
    /// `(delivery time, mean low-pass weight)` per forward with edges.
    pub filter_weights: Vec<(f64, f64)>,
}

/// Trains on one batch of labeled deliveries against the current graph;
/// the caller applies the batch's graph events afterwards.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    graph: &GraphState,
    scaler: &FeatureScaler,
    batch: &[DeliveredSample<'_>],
    hops: usize,
    objective: Objective,
) -> Result<StepOutcome> {
    let mut samples = Vec::with_capacity(batch.len());
    for d in batch {
        samples.push(training_sample(graph, d, hops)?);
    }
    train_on_samples(model, params, opt, scaler, batch, &samples, objective)
}

/// Neighbourhood a labeled delivery trains on, taken as of its delivery
/// time. Fails if the delivery's own positive edge is already in the graph.
pub fn training_sample(
    graph: &GraphState,
    d: &DeliveredSample<'_>,
    hops: usize,
) -> Result<NeighborSample> {
    if d.label == Label::Unlabeled {
        return Err(Error::Contract(format!(
            "unlabeled delivery of sample {} routed to the trainer",
            d.sample.sample_id
        )));
    }
    if d.label == Label::Positive
        && graph.has_positive_edge(d.sample.user_id, d.sample.item_id, d.delivery_time)
    {
        return Err(Error::Contract(format!(
            "graph already holds the positive edge of sample {} at t={}",
            d.sample.sample_id, d.delivery_time
        )));
    }
    neighborhood(graph, d.sample, hops, d.delivery_time)
}

/// One optimizer update from pre-sampled neighbourhoods, `samples[j]`
/// belonging to `batch[j]`.
pub fn train_on_samples(
    model: &Model,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    scaler: &FeatureScaler,
    batch: &[DeliveredSample<'_>],
    samples: &[NeighborSample],
    objective: Objective,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step on an empty batch".into()));
    }
    if samples.len() != batch.len() {
        return Err(Error::Contract(format!(
            "{} neighbourhoods for a batch of {}",
            samples.len(),
            batch.len()
        )));
    }
    if let Some(d) = batch.iter().find(|d| d.label == Label::Unlabeled) {
        return Err(Error::Contract(format!(
            "unlabeled delivery of sample {} routed to the trainer",
            d.sample.sample_id
        )));
    }

    let mut grads = GradBuffer::zeros_like(params);
    let (loss, clamp_count, predictions, filter_weights) = {
        let mut tape = Tape::new(params);
        let mut ys = (Vec::new(), Vec::new(), Vec::new());
        let mut filter_weights = Vec::new();
        for (d, s) in batch.iter().zip(samples) {
            let out = model.forward(
                &mut tape,
                scaler,
                s,
                NodeKey::user(d.sample.user_id),
                NodeKey::item(d.sample.item_id),
            )?;
            if let Some(w) = out.mean_filter_weight {
                filter_weights.push((d.delivery_time, w));
            }
            ys.0.push(out.y_p);
            ys.1.push(out.y_fn);
            ys.2.push(out.y_cvr);
        }
        let y_p = tape.concat(&ys.0, 0)?;
        let y_fn = tape.concat(&ys.1, 0)?;
        let y_cvr = tape.concat(&ys.2, 0)?;
        let labels: Vec<bool> = batch.iter().map(|d| d.label == Label::Positive).collect();
        let predictions: Vec<(f64, bool)> = tape
            .value(y_cvr)
            .data()
            .iter()
            .copied()
            .zip(labels.iter().copied())
            .collect();
        let records: Vec<(DeliveryKind, Label)> = batch.iter().map(|d| (d.kind, d.label)).collect();
        let targets: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y))).collect();
        let ones = vec![1.0; batch.len()];

        let (total, clamps) = match objective {
            Objective::Plain => tape.binary_cross_entropy(y_cvr, &targets, &ones, NLL_FLOOR)?,
            Objective::Pretrain => {
                let (l_cvr, c1) = tape.binary_cross_entropy(y_cvr, &targets, &ones, NLL_FLOOR)?;
                let (l_aux, c2) = aux_losses(&mut tape, y_p, y_fn, &records)?;
                (tape.add(l_cvr, l_aux)?, c1 + c2)
            }
            Objective::Debiased(mode) => {
                let mut projected = 0;
                let aux: Vec<(f64, f64)> = tape
                    .value(y_p)
                    .data()
                    .iter()
                    .zip(tape.value(y_fn).data())
                    .map(|(&p, &f)| {
                        let (v, hit) = project_simplex(p, f);
                        projected += usize::from(hit);
                        v
                    })
                    .collect();
                let (l_cvr, c1) = debias_loss(&mut tape, y_cvr, &aux, &labels, mode)?;
                let (l_aux, c2) = aux_losses(&mut tape, y_p, y_fn, &records)?;
                (tape.add(l_cvr, l_aux)?, c1 + c2 + projected)
            }
        };
        let loss = tape.value(total).data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at t={}",
                batch[0].delivery_time
            )));
        }
        tape.backward_into(total, &mut grads)?;
        (loss, clamps, predictions, filter_weights)
    };
    if !grads.max_abs().is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    opt.step(params, &grads, 1.0 / batch.len() as f64);
    Ok(StepOutcome {
        loss,
        clamp_count,
        predictions,
        filter_weights,
    })
}

/// One row of the step-metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ts: f64,
    pub loss: f64,
    pub auc_window: Option<f64>,
    pub nll_window: Option<f64>,
    pub clamp_count: usize,
    pub mode: &'static str,
}

pub fn write_step_metrics<W: Write>(mut out: W, steps: &[StepMetrics]) -> Result<()> {
    writeln!(out, "step,ts,loss,auc_window,nll_window,clamp_count,mode")?;
    for s in steps {
        writeln!(
            out,
            "{},{},{:.6},{},{},{},{}",
            s.step,
            s.ts,
            s.loss,
            metrics::fmt_metric(s.auc_window),
            metrics::fmt_metric(s.nll_window),
            s.clamp_count,
            s.mode
        )?;
    }
    Ok(())
}

/// Training deliveries remembered for the windowed step metrics.
const METRIC_WINDOW: usize = 1000;

/// Routes a delivery stream into micro-batched training steps and graph
/// events. A labeled delivery's neighbourhood is sampled when it arrives,
/// before its own graph event, so graph events apply in stream order while
/// the batch waits.
pub struct Learner<'a, 'm> {
    model: &'m Model,
    pub params: ParamSet,
    pub graph: GraphState,
    pub scaler: FeatureScaler,
    opt: Optimizer,
    hops: usize,
    objective: Objective,
    batch_size: usize,
    batch: Vec<DeliveredSample<'a>>,
    samples: Vec<NeighborSample>,
    window: VecDeque<EvalRecord>,
    pub steps: Vec<StepMetrics>,
    /// `(time, mean low-pass weight)` of every training forward with edges.
    pub filter_log: Vec<(f64, f64)>,
    pub trained: usize,
    pub loss_sum: f64,
}

impl<'a, 'm> Learner<'a, 'm> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'m Model,
        params: ParamSet,
        opt: Optimizer,
        graph: GraphState,
        scaler: FeatureScaler,
        hops: usize,
        objective: Objective,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if hops == 0 {
            return Err(Error::Config("hops must be >= 1".into()));
        }
        Ok(Self {
            model,
            params,
            graph,
            scaler,
            opt,
            hops,
            objective,
            batch_size,
            batch: Vec::with_capacity(batch_size),
            samples: Vec::with_capacity(batch_size),
            window: VecDeque::with_capacity(METRIC_WINDOW),
            steps: Vec::new(),
            filter_log: Vec::new(),
            trained: 0,
            loss_sum: 0.0,
        })
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn deliver(&mut self, d: DeliveredSample<'a>) -> Result<()> {
        let r = routing(&d);
        if r.to_trainer {
            self.samples
                .push(training_sample(&self.graph, &d, self.hops)?);
            self.batch.push(d);
        }
        if r.to_graph {
            self.apply_graph(&d)?;
        }
        if self.batch.len() >= self.batch_size {
            self.flush()?;
        }
        Ok(())
    }

    /// Trains on any pending batch.
    pub fn flush(&mut self) -> Result<()> {
        if self.batch.is_empty() {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.batch);
        let samples = std::mem::take(&mut self.samples);
        let out = train_on_samples(
            self.model,
            &mut self.params,
            &mut self.opt,
            &self.scaler,
            &batch,
            &samples,
            self.objective,
        )?;
        self.record(&batch, out);
        self.batch = batch;
        self.batch.clear();
        self.samples = samples;
        self.samples.clear();
        Ok(())
    }

    fn record(&mut self, batch: &[DeliveredSample<'_>], out: StepOutcome) {
        for (d, &(score, label)) in batch.iter().zip(&out.predictions) {
            if self.window.len() == METRIC_WINDOW {
                self.window.pop_front();
            }
            self.window
                .push_back(EvalRecord::new(score, label, d.delivery_time));
        }
        let w: Vec<EvalRecord> = self.window.iter().copied().collect();
        self.trained += batch.len();
        self.loss_sum += out.loss;
        self.filter_log.extend(out.filter_weights);
        self.steps.push(StepMetrics {
            step: self.steps.len(),
            ts: batch.last().map_or(0.0, |d| d.delivery_time),
            loss: out.loss,
            auc_window: metrics::auc(&w).ok(),
            nll_window: metrics::nll(&w).ok(),
            clamp_count: out.clamp_count,
            mode: self.objective.as_str(),
        });
    }

    fn apply_graph(&mut self, d: &DeliveredSample<'_>) -> Result<()> {
        apply_graph_event(&mut self.graph, &mut self.scaler, d)
    }
}

/// Graph side of a delivery: an unlabeled click writes both node attributes
/// and an unlabeled edge; a positive upgrades (or adds) the pair's edge,
/// creating endpoints the graph has not seen. The scaler observes both.
pub fn apply_graph_event(
    graph: &mut GraphState,
    scaler: &mut FeatureScaler,
    d: &DeliveredSample<'_>,
) -> Result<()> {
    let s = d.sample;
    let t = d.delivery_time;
    let user = NodeKey::user(s.user_id);
    let item = NodeKey::item(s.item_id);
    match d.label {
        Label::Unlabeled => {
            scaler.observe(s);
            graph.apply_node_event(user, s.user_features.clone(), t)?;
            graph.apply_node_event(item, s.item_features.clone(), t)?;
            graph.apply_edge_event(user, item, EdgeLabel::Unlabeled, t)
        }
        Label::Positive => {
            scaler.observe(s);
            if !graph.contains(user) {
                graph.apply_node_event(user, s.user_features.clone(), t)?;
            }
            if !graph.contains(item) {
                graph.apply_node_event(item, s.item_features.clone(), t)?;
            }
            graph.apply_edge_event(user, item, EdgeLabel::Positive, t)
        }
        Label::Negative => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hops: usize,
    pub edge_cap: usize,
    pub attribute_versions: usize,
}

/// State handed from the offline phase to the online phase.
#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: ParamSet,
    pub graph: GraphState,
    pub scaler: FeatureScaler,
    /// Mean per-delivery loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepMetrics>,
}

/// Warm start: streams the offline clicks through the DGDFEM pipeline,
/// keeping deliveries before `split_time`, and fits all heads with plain
/// BCE. The graph and scaler are rebuilt every epoch; the last epoch's are
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn offline_pretrain(
    model: &Model,
    mut params: ParamSet,
    opt: &mut Optimizer,
    offline: &[ClickSample],
    pipeline: &PipelineConfig,
    split_time: f64,
    cfg: &PretrainConfig,
) -> Result<PretrainResult> {
    let cfg_dg = pipeline.with_policy(Policy::Dgdfem);
    let deliveries: Vec<DeliveredSample<'_>> = replay(offline, &cfg_dg)?
        .filter(|d| d.delivery_time < split_time)
        .collect();
    if !deliveries.iter().any(|d| routing(d).to_trainer) {
        return Err(Error::Config(
            "offline split has no labeled deliveries to pretrain on".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("pretrain needs at least one epoch".into()));
    }
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut last = None;
    for _ in 0..cfg.epochs {
        let mut learner = Learner::new(
            model,
            params,
            opt.clone(),
            GraphState::with_attribute_versions(cfg.edge_cap, cfg.attribute_versions)?,
            FeatureScaler::new(&model.schema),
            cfg.hops,
            Objective::Pretrain,
            cfg.batch_size,
        )?;
        for d in &deliveries {
            learner.deliver(*d)?;
        }
        learner.flush()?;
        epoch_losses.push(learner.loss_sum / learner.trained.max(1) as f64);
        *opt = learner.opt.clone();
        steps.append(&mut learner.steps);
        params = learner.params.clone();
        last = Some((learner.graph, learner.scaler));
    }
    // renumber the steps of all epochs consecutively
    for (i, s) in steps.iter_mut().enumerate() {
        s.step = i;
    }
    let (graph, scaler) = last.expect("epochs >= 1");
    Ok(PretrainResult {
        params,
        graph,
        scaler,
        epoch_losses,
        steps,
    })
}

/// Mean plain BCE of the CVR head over labeled deliveries, scored against
/// a graph replayed up to each delivery. Used to compare snapshots.
pub fn replay_bce(
    model: &Model,
    params: &ParamSet,
    deliveries: &[DeliveredSample<'_>],
    hops: usize,
    edge_cap: usize,
) -> Result<f64> {
    let mut graph = GraphState::new(edge_cap)?;
    let mut scaler = FeatureScaler::new(&model.schema);
    let (mut total, mut n) = (0.0, 0usize);
    for d in deliveries {
        let r = routing(d);
        if r.to_trainer {
            let (h, _) = predict(
                model,
                params,
                &graph,
                &scaler,
                d.sample,
                hops,
                d.delivery_time,
            )?;
            let c = h.y_cvr_hat.clamp(NLL_FLOOR, 1.0 - NLL_FLOOR);
            total -= if d.label == Label::Positive {
                c.ln()
            } else {
                (1.0 - c).ln()
            };
            n += 1;
        }
        if r.to_graph {
            apply_graph_event(&mut graph, &mut scaler, d)?;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no labeled deliveries".into()));
    }
    Ok(total / n as f64)
}
