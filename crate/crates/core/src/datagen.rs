//! Synthetic click logs with delayed conversions, delay-mixture calibration
//! and the click-log CSV format.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ClickSample, Features, SECONDS_PER_HOUR};
use crate::rng::{substream, Rng};

/// Two-component exponential delay distribution; rates are per hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayMixture {
    /// Weight of the first component; the second gets `1 - weight`.
    pub weight: f64,
    pub rates: [f64; 2],
}

impl DelayMixture {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::Config(format!(
                "mixture weight {} outside [0, 1]",
                self.weight
            )));
        }
        if self.rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!(
                "mixture rates must be positive, got {:?}",
                self.rates
            )));
        }
        Ok(())
    }

    /// `P(delay <= hours)`.
    pub fn cdf(&self, hours: f64) -> f64 {
        if hours <= 0.0 {
            return 0.0;
        }
        1.0 - self.survival(hours)
    }

    pub fn survival(&self, hours: f64) -> f64 {
        let [a, b] = self.rates;
        self.weight * (-a * hours).exp() + (1.0 - self.weight) * (-b * hours).exp()
    }

    /// Delay in hours with `cdf = u`, by bisection.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0 - 1e-15);
        let slow = self.rates[0].min(self.rates[1]);
        let mut hi = 1.0 / slow;
        while self.cdf(hi) < u {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.max(1e-12) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// A point `(hours, cdf)` the delay distribution must pass through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayTarget {
    pub hours: f64,
    pub cdf: f64,
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let f_lo = f(lo);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-component mixture through both targets.
///
/// The fast component's weight is fixed at the midpoint of the two target
/// probabilities; the slow rate is found by bisection, with the fast rate
/// solved from the first target at each step.
pub fn calibrate_delay_mixture(first: DelayTarget, second: DelayTarget) -> Result<DelayMixture> {
    let (t1, f1, t2, f2) = (first.hours, first.cdf, second.hours, second.cdf);
    if !(t1 > 0.0 && t2 > t1) {
        return Err(Error::Config(format!(
            "target times must satisfy 0 < t1 < t2, got {t1}, {t2}"
        )));
    }
    if !(f1 > 0.0 && f1 < f2 && f2 < 1.0) {
        return Err(Error::Config(format!(
            "target probabilities must satisfy 0 < F1 < F2 < 1, got {f1}, {f2}"
        )));
    }
    let (s1, s2) = (1.0 - f1, 1.0 - f2);
    let floor = s1.powf(t2 / t1);
    if s2 < floor * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "no exponential mixture reaches CDF {f2} at {t2}h after {f1} at {t1}h: \
             a mixture tail is at least as heavy as a single exponential (CDF <= {:.6})",
            1.0 - floor
        )));
    }
    let lambda0 = -s1.ln() / t1;
    if (s2 - floor).abs() <= 1e-12 {
        return Ok(DelayMixture {
            weight: 1.0,
            rates: [lambda0, lambda0],
        });
    }
    let w = 0.5 * (f1 + f2);
    // fast rate matching the first target for a given slow rate
    let fast = |slow: f64| {
        let rest = (s1 - (1.0 - w) * (-slow * t1).exp()) / w;
        -rest.ln() / t1
    };
    let s2_of = |slow: f64| w * (-fast(slow) * t2).exp() + (1.0 - w) * (-slow * t2).exp();
    let lo = 1e-12;
    if s2_of(lo) < s2 {
        return Err(Error::Config(format!(
            "targets ({t1}h, {f1}), ({t2}h, {f2}) need a tail heavier than weight {w:.4} allows"
        )));
    }
    let slow = bisect(lo, lambda0, |l| s2_of(l) - s2);
    let mix = DelayMixture {
        weight: w,
        rates: [fast(slow), slow],
    };
    let err = (mix.cdf(t1) - f1).abs().max((mix.cdf(t2) - f2).abs());
    if !(err < 1e-6) {
        return Err(Error::Numeric(format!(
            "delay calibration residual {err:e}"
        )));
    }
    Ok(mix)
}

/// Published hour-scale delay quantiles of two public datasets.
pub mod presets {
    use super::DelayTarget;

    pub const CRITEO2: [DelayTarget; 2] = [
        DelayTarget {
            hours: 0.25,
            cdf: 0.2954,
        },
        DelayTarget {
            hours: 24.0,
            cdf: 0.6050,
        },
    ];
    pub const TENCENT: [DelayTarget; 2] = [
        DelayTarget {
            hours: 0.25,
            cdf: 0.6177,
        },
        DelayTarget {
            hours: 24.0,
            cdf: 0.9283,
        },
    ];

    /// Two weeks of drifting CVR with CRITEO2-calibrated delays. Dense
    /// features are weak views of the latents and clicks follow affinity
    /// closely, so the click graph carries preference signal.
    pub fn drifted() -> super::GeneratorConfig {
        super::GeneratorConfig {
            n_users: 5000,
            n_items: 500,
            n_clicks: 50_000,
            click_affinity: 3.0,
            feature_noise: 0.8,
            drift: Some(super::Drift::default()),
            ..super::GeneratorConfig::default()
        }
    }
}

/// Stratified delays: one uniform per equal-probability stratum, pushed
/// through the mixture quantile and shuffled.
pub fn sample_delays(mix: &DelayMixture, n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n)
        .map(|j| {
            let u = (j as f64 + rng.random::<f64>()) / n as f64;
            mix.quantile(u)
        })
        .collect();
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Drift {
    /// Logit amplitude of the market-wide cycle.
    pub amplitude: f64,
    pub period_hours: f64,
    /// Logit amplitude of each item's own cycle (random phase per item).
    pub item_amplitude: f64,
    pub item_period_hours: f64,
}

impl Default for Drift {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            period_hours: 24.0,
            item_amplitude: 1.0,
            item_period_hours: 72.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_clicks: usize,
    pub duration_hours: f64,
    pub base_cvr: f64,
    /// Scale of the user-item affinity in the conversion logit.
    pub signal_scale: f64,
    /// Scale of the affinity in the click choice.
    pub click_affinity: f64,
    /// Exponent of the item popularity power law.
    pub popularity_exponent: f64,
    pub n_user_clusters: usize,
    pub n_item_categories: usize,
    /// Share of latent variance explained by the cluster / category.
    pub cluster_share: f64,
    /// Std-dev of the noise on dense feature views.
    pub feature_noise: f64,
    pub delay_mixture: DelayMixture,
    pub drift: Option<Drift>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mix = calibrate_delay_mixture(presets::CRITEO2[0], presets::CRITEO2[1])
            .expect("feasible preset");
        Self {
            n_users: 1000,
            n_items: 200,
            latent_dim: 8,
            n_clicks: 10_000,
            duration_hours: 14.0 * 24.0,
            base_cvr: 0.1,
            signal_scale: 1.5,
            click_affinity: 1.0,
            popularity_exponent: 0.8,
            n_user_clusters: 20,
            n_item_categories: 20,
            cluster_share: 0.5,
            feature_noise: 0.3,
            delay_mixture: mix,
            drift: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return bad("n_users, n_items and latent_dim must be positive".into());
        }
        if self.n_user_clusters == 0 || self.n_item_categories == 0 {
            return bad("cluster and category counts must be positive".into());
        }
        if !(self.base_cvr > 0.0 && self.base_cvr < 1.0) {
            return bad(format!("base_cvr must be in (0, 1), got {}", self.base_cvr));
        }
        if !(self.duration_hours > 0.0 && self.duration_hours.is_finite()) {
            return bad(format!(
                "duration_hours must be positive, got {}",
                self.duration_hours
            ));
        }
        if !(0.0..=1.0).contains(&self.cluster_share) || self.feature_noise < 0.0 {
            return bad("cluster_share must be in [0, 1] and feature_noise >= 0".into());
        }
        if let Some(d) = &self.drift {
            if !(d.period_hours > 0.0 && d.item_period_hours > 0.0) {
                return bad("drift periods must be positive".into());
            }
        }
        self.delay_mixture.validate()
    }
}

fn gaussian_rows(rng: &mut Rng, n: usize, dim: usize, sd: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// Logit shift of the drift terms for `item` at time `t` (seconds).
fn drift_at(drift: &Option<Drift>, phase: f64, t: f64) -> f64 {
    let Some(d) = drift else { return 0.0 };
    let h = t / SECONDS_PER_HOUR;
    let tau = std::f64::consts::TAU;
    d.amplitude * (tau * h / d.period_hours).sin()
        + d.item_amplitude * (tau * h / d.item_period_hours + phase).sin()
}

/// Samples a click log sorted by click time.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<ClickSample>> {
    cfg.validate()?;
    let dim = cfg.latent_dim;
    let sd = (dim as f64).powf(-0.25);
    let mut rng = substream(cfg.seed, "datagen.latent");
    let share = cfg.cluster_share.sqrt();
    let rest = (1.0 - cfg.cluster_share).sqrt();
    let centroids = gaussian_rows(&mut rng, cfg.n_user_clusters, dim, sd);
    let categories = gaussian_rows(&mut rng, cfg.n_item_categories, dim, sd);
    let mix_rows = |rng: &mut Rng, n: usize, groups: &[Vec<f64>]| -> (Vec<usize>, Vec<Vec<f64>>) {
        let own = gaussian_rows(rng, n, dim, sd);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups.len())).collect();
        let rows = own
            .iter()
            .zip(&ids)
            .map(|(o, &g)| {
                o.iter()
                    .zip(&groups[g])
                    .map(|(a, b)| share * b + rest * a)
                    .collect()
            })
            .collect();
        (ids, rows)
    };
    let (user_cluster, users) = mix_rows(&mut rng, cfg.n_users, &centroids);
    let (item_category, items) = mix_rows(&mut rng, cfg.n_items, &categories);
    let phases: Vec<f64> = (0..cfg.n_items)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let popularity: Vec<f64> = {
        let mut ranks: Vec<usize> = (0..cfg.n_items).collect();
        ranks.shuffle(&mut rng);
        ranks
            .iter()
            .map(|&r| -cfg.popularity_exponent * ((r + 1) as f64).ln())
            .collect()
    };

    let mut rng = substream(cfg.seed, "datagen.clicks");
    let horizon = cfg.duration_hours * SECONDS_PER_HOUR;
    let mut times: Vec<f64> = (0..cfg.n_clicks)
        .map(|_| rng.random::<f64>() * horizon)
        .collect();
    times.sort_by(f64::total_cmp);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut weights = vec![0.0; cfg.n_items];
    let mut pairs = Vec::with_capacity(cfg.n_clicks);
    for _ in 0..cfg.n_clicks {
        let u = rng.random_range(0..cfg.n_users);
        let mut max = f64::NEG_INFINITY;
        for (i, w) in weights.iter_mut().enumerate() {
            *w = popularity[i] + cfg.click_affinity * dot(&users[u], &items[i]);
            max = max.max(*w);
        }
        let mut total = 0.0;
        for w in weights.iter_mut() {
            total += (*w - max).exp();
            *w = total;
        }
        let r = rng.random::<f64>() * total;
        let i = weights.partition_point(|&c| c <= r).min(cfg.n_items - 1);
        pairs.push((u, i));
    }

    // intercept so the mean conversion probability is exactly base_cvr
    let shifts: Vec<f64> = pairs
        .iter()
        .zip(&times)
        .map(|(&(u, i), &t)| {
            cfg.signal_scale * dot(&users[u], &items[i]) + drift_at(&cfg.drift, phases[i], t)
        })
        .collect();
    let mean_p =
        |a: f64| shifts.iter().map(|s| sigmoid(a + s)).sum::<f64>() / shifts.len().max(1) as f64;
    let intercept = bisect(-40.0, 40.0, |a| mean_p(a) - cfg.base_cvr);

    let mut rng = substream(cfg.seed, "datagen.conversions");
    let converts: Vec<bool> = shifts
        .iter()
        .map(|s| rng.random::<f64>() < sigmoid(intercept + s))
        .collect();
    let n_conv = converts.iter().filter(|&&c| c).count();
    let mut delays = sample_delays(
        &cfg.delay_mixture,
        n_conv,
        &mut substream(cfg.seed, "datagen.delays"),
    )
    .into_iter();

    let mut rng = substream(cfg.seed, "datagen.features");
    let mut noisy = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| x + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut out = Vec::with_capacity(cfg.n_clicks);
    for (k, ((&(u, i), &t), &c)) in pairs.iter().zip(&times).zip(&converts).enumerate() {
        let conversion_time =
            c.then(|| t + delays.next().expect("one delay per conversion") * SECONDS_PER_HOUR);
        out.push(ClickSample {
            sample_id: k as u64,
            user_id: u as u64,
            item_id: i as u64,
            click_time: t,
            conversion_time,
            user_features: Features::new(noisy(&users[u]), vec![user_cluster[u] as u32]),
            item_features: Features::new(noisy(&items[i]), vec![i as u32, item_category[i] as u32]),
        });
    }
    Ok(out)
}

/// Headline statistics of a click log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSummary {
    pub n_clicks: usize,
    /// Share of clicks that ever convert.
    pub cvr: f64,
    /// Share of conversions with delay at most the given hour marks.
    pub delay_quantiles: [(f64, f64); 2],
}

pub fn summarize(samples: &[ClickSample], marks: [f64; 2]) -> LogSummary {
    let delays: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.conversion_time.map(|c| c - s.click_time))
        .collect();
    let share = |h: f64| {
        let n = delays
            .iter()
            .filter(|&&d| d <= h * SECONDS_PER_HOUR)
            .count();
        n as f64 / delays.len().max(1) as f64
    };
    LogSummary {
        n_clicks: samples.len(),
        cvr: delays.len() as f64 / samples.len().max(1) as f64,
        delay_quantiles: [(marks[0], share(marks[0])), (marks[1], share(marks[1]))],
    }
}

/// Writes the click-log CSV. Dense and categorical widths are taken from the
/// first sample.
pub fn write_csv<W: Write>(out: W, samples: &[ClickSample]) -> Result<()> {
    let (ud, id, uc, ic) = samples.first().map_or((0, 0, 0, 0), |s| {
        (
            s.user_features.dense.len(),
            s.item_features.dense.len(),
            s.user_features.categorical.len(),
            s.item_features.categorical.len(),
        )
    });
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "sample_id",
        "user_id",
        "item_id",
        "click_ts",
        "conversion_ts",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for (prefix, n) in [("uf", ud), ("if", id), ("uc", uc), ("ic", ic)] {
        header.extend((0..n).map(|k| format!("{prefix}_{k}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in samples {
        row.clear();
        row.push(s.sample_id.to_string());
        row.push(s.user_id.to_string());
        row.push(s.item_id.to_string());
        row.push(s.click_time.to_string());
        row.push(s.conversion_time.map(|c| c.to_string()).unwrap_or_default());
        row.extend(s.user_features.dense.iter().map(f64::to_string));
        row.extend(s.item_features.dense.iter().map(f64::to_string));
        row.extend(s.user_features.categorical.iter().map(u32::to_string));
        row.extend(s.item_features.categorical.iter().map(u32::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data {
            line,
            msg: format!("{other:?}"),
        },
    }
}

struct Columns {
    groups: [Vec<usize>; 4],
}

fn parse_header(header: &csv::StringRecord) -> Result<Columns> {
    let required = [
        "sample_id",
        "user_id",
        "item_id",
        "click_ts",
        "conversion_ts",
    ];
    for (k, name) in required.iter().enumerate() {
        if header.get(k) != Some(name) {
            return Err(Error::Data {
                line: 1,
                msg: format!(
                    "column {} must be `{name}`, found {:?}",
                    k + 1,
                    header.get(k)
                ),
            });
        }
    }
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (k, name) in header.iter().enumerate().skip(required.len()) {
        let slot = ["uf_", "if_", "uc_", "ic_"]
            .iter()
            .position(|p| name.starts_with(p));
        match slot {
            Some(g) => groups[g].push(k),
            None => {
                return Err(Error::Data {
                    line: 1,
                    msg: format!("unknown column `{name}`"),
                })
            }
        }
    }
    Ok(Columns { groups })
}

/// Parses and validates a click-log CSV.
pub fn ingest_csv<R: Read>(input: R) -> Result<Vec<ClickSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.is_empty() {
        return Err(Error::Data {
            line: 1,
            msg: "missing header row".into(),
        });
    }
    let cols = parse_header(&header)?;
    let mut out: Vec<ClickSample> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let data_err = |msg: String| Error::Data { line, msg };
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let num = |k: usize| -> Result<f64> {
            let v: f64 = field(k).parse().map_err(|_| {
                data_err(format!(
                    "column `{}`: `{}` is not a number",
                    &header[k],
                    field(k)
                ))
            })?;
            if !v.is_finite() {
                return Err(data_err(format!("column `{}` is not finite", &header[k])));
            }
            Ok(v)
        };
        let int = |k: usize| -> Result<u64> {
            field(k).parse().map_err(|_| {
                data_err(format!(
                    "column `{}`: `{}` is not an integer",
                    &header[k],
                    field(k)
                ))
            })
        };
        let cat = |k: usize| -> Result<u32> {
            field(k).parse().map_err(|_| {
                data_err(format!(
                    "column `{}`: `{}` is not a category id",
                    &header[k],
                    field(k)
                ))
            })
        };
        let click_time = num(3)?;
        let conversion_time = if field(4).is_empty() {
            None
        } else {
            Some(num(4)?)
        };
        if let Some(c) = conversion_time {
            if c < click_time {
                return Err(data_err(format!(
                    "conversion_ts {c} precedes click_ts {click_time}"
                )));
            }
        }
        let sample = ClickSample {
            sample_id: int(0)?,
            user_id: int(1)?,
            item_id: int(2)?,
            click_time,
            conversion_time,
            user_features: Features::new(
                cols.groups[0]
                    .iter()
                    .map(|&k| num(k))
                    .collect::<Result<_>>()?,
                cols.groups[2]
                    .iter()
                    .map(|&k| cat(k))
                    .collect::<Result<_>>()?,
            ),
            item_features: Features::new(
                cols.groups[1]
                    .iter()
                    .map(|&k| num(k))
                    .collect::<Result<_>>()?,
                cols.groups[3]
                    .iter()
                    .map(|&k| cat(k))
                    .collect::<Result<_>>()?,
            ),
        };
        if let Some(prev) = out.last() {
            if sample.click_time < prev.click_time {
                return Err(Error::Unsorted(format!(
                    "line {line} (sample_id={}) has click_ts {} before the previous row's {}",
                    sample.sample_id, sample.click_time, prev.click_time
                )));
            }
        }
        if !ids.insert(sample.sample_id) {
            return Err(data_err(format!(
                "duplicate sample_id {}",
                sample.sample_id
            )));
        }
        out.push(sample);
    }
    Ok(out)
}
