//! Ranking and calibration metrics, per-slot evaluation and the sliding
//! window correlation used by the case study.

use std::io::Write;

use crate::error::{Error, Result};
use crate::pipeline::{routing, DeliveredSample, Label, SECONDS_PER_HOUR};

/// Log arguments are clamped to `[NLL_FLOOR, 1 - NLL_FLOOR]`.
pub const NLL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub score: f64,
    pub label: bool,
    pub time: f64,
}

impl EvalRecord {
    pub fn new(score: f64, label: bool, time: f64) -> Self {
        Self { score, label, time }
    }
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score {} at t={}",
            r.score, r.time
        )));
    }
    let pos = records.iter().filter(|r| r.label).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // sum of positive ranks, tied groups sharing their mean rank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|r| r.label).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean negative log-likelihood with clamped probabilities.
pub fn nll(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("NLL of an empty record set".into()));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let s = r.score.clamp(NLL_FLOOR, 1.0 - NLL_FLOOR);
            if r.label {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Share of the gap between the pretrained and the no-delay model that
/// `model` closes, in percent.
pub fn improv(model: f64, pretrain: f64, nodelay: f64) -> Result<f64> {
    let denom = nodelay - pretrain;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "improvement undefined: no-delay metric {nodelay} equals pretrain metric {pretrain}"
        )));
    }
    Ok((model - pretrain) / denom * 100.0)
}

/// Pearson correlation; undefined for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson", &[xs.len()], &[ys.len()]));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("correlation of {n} points")));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // rounding noise of averaged constants counts as zero variance
    let flat = |ss: f64, m: f64| ss <= 1e-24 * n as f64 * (m * m).max(f64::MIN_POSITIVE);
    if flat(sxx, mx) || flat(syy, my) {
        return Err(Error::UndefinedMetric(
            "correlation with a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Two moving averages on a shared hourly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingSeries {
    pub grid: Vec<f64>,
    pub cvr: Vec<f64>,
    pub filter_weight: Vec<f64>,
    /// `None` when either series is constant.
    pub correlation: Option<f64>,
}

fn centered_means(events: &[(f64, f64)], grid: &[f64], half: f64) -> Vec<Option<f64>> {
    // prefix sums over time-sorted events
    let mut ev: Vec<(f64, f64)> = events.to_vec();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prefix = Vec::with_capacity(ev.len() + 1);
    prefix.push(0.0);
    for (_, v) in &ev {
        prefix.push(prefix.last().unwrap() + v);
    }
    grid.iter()
        .map(|&g| {
            let lo = ev.partition_point(|e| e.0 < g - half);
            let hi = ev.partition_point(|e| e.0 <= g + half);
            (hi > lo).then(|| (prefix[hi] - prefix[lo]) / (hi - lo) as f64)
        })
        .collect()
}

/// Centered moving averages of `(time, cvr indicator)` and
/// `(time, mean filter weight)` events over windows of `window_len`
/// seconds, evaluated every hour where both series have support.
pub fn sliding_window_series(
    cvr_events: &[(f64, f64)],
    weight_events: &[(f64, f64)],
    window_len: f64,
) -> Result<SlidingSeries> {
    if !(window_len > 0.0) {
        return Err(Error::Config(format!(
            "window length must be positive, got {window_len}"
        )));
    }
    let bounds = |ev: &[(f64, f64)]| {
        ev.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.0), hi.max(e.0))
            })
    };
    let (a0, a1) = bounds(cvr_events);
    let (b0, b1) = bounds(weight_events);
    let (start, end) = (a0.max(b0), a1.min(b1));
    let mut grid = Vec::new();
    if start.is_finite() && end.is_finite() {
        let mut g = (start / SECONDS_PER_HOUR).ceil() * SECONDS_PER_HOUR;
        while g <= end {
            grid.push(g);
            g += SECONDS_PER_HOUR;
        }
    }
    let half = window_len / 2.0;
    let cv = centered_means(cvr_events, &grid, half);
    let wv = centered_means(weight_events, &grid, half);
    let mut out = SlidingSeries {
        grid: Vec::new(),
        cvr: Vec::new(),
        filter_weight: Vec::new(),
        correlation: None,
    };
    for ((g, c), w) in grid.iter().zip(cv).zip(wv) {
        if let (Some(c), Some(w)) = (c, w) {
            out.grid.push(*g);
            out.cvr.push(c);
            out.filter_weight.push(w);
        }
    }
    if out.grid.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "sliding window series has {} grid points, need at least 3",
            out.grid.len()
        )));
    }
    out.correlation = pearson(&out.cvr, &out.filter_weight).ok();
    Ok(out)
}

pub fn write_case_study_csv<W: Write>(mut out: W, s: &SlidingSeries) -> Result<()> {
    writeln!(out, "t,mean_cvr,mean_filter_weight")?;
    for ((t, c), w) in s.grid.iter().zip(&s.cvr).zip(&s.filter_weight) {
        writeln!(out, "{t},{c},{w}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineStats {
    pub label_accuracy: f64,
    pub mean_delivery_lag: f64,
    pub trainer_deliveries: usize,
}

/// Label accuracy and freshness of the deliveries a trainer sees.
/// Ground truth is conversion within `attribution_len`.
pub fn pipeline_stats<'a>(
    deliveries: impl IntoIterator<Item = &'a DeliveredSample<'a>>,
    attribution_len: f64,
) -> PipelineStats {
    let (mut n, mut correct, mut lag) = (0usize, 0usize, 0.0);
    for d in deliveries {
        if !routing(d).to_trainer {
            continue;
        }
        n += 1;
        let truth = d.sample.converts_within(attribution_len);
        if (d.label == Label::Positive) == truth {
            correct += 1;
        }
        lag += d.delivery_time - d.sample.click_time;
    }
    let denom = n.max(1) as f64;
    PipelineStats {
        label_accuracy: if n == 0 { 1.0 } else { correct as f64 / denom },
        mean_delivery_lag: lag / denom,
        trainer_deliveries: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotMetric {
    pub slot_start: f64,
    pub records: usize,
    /// `None` for single-class slots.
    pub auc: Option<f64>,
    pub nll: f64,
}

/// Splits records into slots `[origin + j·width, origin + (j+1)·width)` and
/// scores each non-empty slot.
pub fn slot_metrics(records: &[EvalRecord], origin: f64, width: f64) -> Result<Vec<SlotMetric>> {
    if !(width > 0.0) {
        return Err(Error::Config(format!(
            "slot width must be positive, got {width}"
        )));
    }
    let mut sorted: Vec<EvalRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let slot = ((sorted[i].time - origin) / width).floor();
        let mut j = i;
        while j < sorted.len() && ((sorted[j].time - origin) / width).floor() == slot {
            j += 1;
        }
        let chunk = &sorted[i..j];
        out.push(SlotMetric {
            slot_start: origin + slot * width,
            records: chunk.len(),
            auc: auc(chunk).ok(),
            nll: nll(chunk)?,
        });
        i = j;
    }
    Ok(out)
}

/// Mean AUC and NLL over slots with a defined AUC. With `weighted`, slots
/// count in proportion to their record count.
pub fn slot_mean(slots: &[SlotMetric], weighted: bool) -> Result<(f64, f64)> {
    let defined: Vec<&SlotMetric> = slots.iter().filter(|s| s.auc.is_some()).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no slot has both classes".into()));
    }
    let w = |s: &SlotMetric| if weighted { s.records as f64 } else { 1.0 };
    let total: f64 = defined.iter().map(|s| w(s)).sum();
    let a = defined.iter().map(|s| w(s) * s.auc.unwrap()).sum::<f64>() / total;
    let n = defined.iter().map(|s| w(s) * s.nll).sum::<f64>() / total;
    Ok((a, n))
}

/// Sentinel-aware formatting for CSV cells.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.6}"))
}

pub fn write_results_csv<W: Write>(mut out: W, rows: &[(String, Vec<SlotMetric>)]) -> Result<()> {
    writeln!(out, "slot_start,policy,auc,nll")?;
    for (policy, slots) in rows {
        for s in slots {
            writeln!(
                out,
                "{},{},{},{:.6}",
                s.slot_start,
                policy,
                fmt_metric(s.auc),
                s.nll
            )?;
        }
    }
    Ok(())
}
