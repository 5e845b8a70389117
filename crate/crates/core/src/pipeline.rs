//! Stage-1 data pipeline.
//!
//! A raw click log is turned into an event-time ordered stream of
//! [`DeliveredSample`]s. The DGDFEM policy delivers every click instantly
//! (unlabeled, for the graph), again when its time window closes (labeled,
//! for training), and once more as a calibration positive when a fake
//! negative finally converts. The competitor policies are simplified
//! stand-ins used for ablations.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Dense values plus categorical ids attached to a user or an item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    pub dense: Vec<f64>,
    pub categorical: Vec<u32>,
}

impl Features {
    pub fn new(dense: Vec<f64>, categorical: Vec<u32>) -> Self {
        Self { dense, categorical }
    }
}

/// One user-item click with its (optional) conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickSample {
    pub sample_id: u64,
    pub user_id: u64,
    pub item_id: u64,
    /// Seconds since epoch.
    pub click_time: f64,
    /// Seconds since epoch; `None` when the click never converted.
    pub conversion_time: Option<f64>,
    pub user_features: Features,
    pub item_features: Features,
}

impl ClickSample {
    /// Conversion delay in seconds, `f64::INFINITY` when absent.
    pub fn delay(&self) -> f64 {
        match self.conversion_time {
            Some(c) => c - self.click_time,
            None => f64::INFINITY,
        }
    }

    /// Ground truth: the click converted inside the attribution window.
    pub fn converts_within(&self, attribution_len: f64) -> bool {
        self.delay() <= attribution_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    Dgdfem,
    Fnw,
    Esdfm,
    Oracle,
    PretrainStatic,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Dgdfem,
        Policy::Fnw,
        Policy::Esdfm,
        Policy::Oracle,
        Policy::PretrainStatic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Dgdfem => "DGDFEM",
            Policy::Fnw => "FNW",
            Policy::Esdfm => "ESDFM",
            Policy::Oracle => "ORACLE",
            Policy::PretrainStatic => "PRETRAIN_STATIC",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// Window semantics shared by every policy. Lengths are in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub window_len: f64,
    pub attribution_len: f64,
    pub policy: Policy,
}

impl PipelineConfig {
    pub fn new(window_len: f64, attribution_len: f64, policy: Policy) -> Result<Self> {
        if !(window_len > 0.0 && window_len <= attribution_len && attribution_len.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < l_w <= l_a, got l_w={window_len}s l_a={attribution_len}s"
            )));
        }
        Ok(Self {
            window_len,
            attribution_len,
            policy,
        })
    }

    pub fn from_hours(window_hours: f64, attribution_hours: f64, policy: Policy) -> Result<Self> {
        Self::new(
            window_hours * SECONDS_PER_HOUR,
            attribution_hours * SECONDS_PER_HOUR,
            policy,
        )
    }

    pub fn with_policy(self, policy: Policy) -> Self {
        Self { policy, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleClass {
    Positive,
    FakeNegative,
    RealNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Unlabeled = -1,
    Negative = 0,
    Positive = 1,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        self as i8
    }
}

/// How a record entered the stream. The declaration order is the
/// tie-break order for simultaneous deliveries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeliveryKind {
    /// Unlabeled delivery at click time (graph only).
    Instant,
    /// Labeled delivery at click time (FNW negatives, ORACLE records).
    AtClick,
    /// Labeled delivery when the time window closes.
    WindowEnd,
    /// Positive re-delivery at conversion time.
    Calibration,
}

impl DeliveryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryKind::Instant => "INSTANT",
            DeliveryKind::AtClick => "CLICK",
            DeliveryKind::WindowEnd => "WINDOW_END",
            DeliveryKind::Calibration => "CALIBRATION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveredSample<'a> {
    pub sample: &'a ClickSample,
    pub label: Label,
    pub delivery_time: f64,
    pub kind: DeliveryKind,
}

impl<'a> DeliveredSample<'a> {
    fn new(sample: &'a ClickSample, label: Label, delivery_time: f64, kind: DeliveryKind) -> Self {
        Self {
            sample,
            label,
            delivery_time,
            kind,
        }
    }

    fn order_key(&self) -> (f64, DeliveryKind, u64) {
        (self.delivery_time, self.kind, self.sample.sample_id)
    }

    /// Total order used by [`replay`]: time, then kind, then sample id.
    pub fn replay_cmp(&self, other: &Self) -> Ordering {
        let (ta, ka, ia) = self.order_key();
        let (tb, kb, ib) = other.order_key();
        ta.total_cmp(&tb).then(ka.cmp(&kb)).then(ia.cmp(&ib))
    }
}

pub fn classify(sample: &ClickSample, cfg: &PipelineConfig) -> SampleClass {
    let delay = sample.delay();
    if delay < cfg.window_len {
        SampleClass::Positive
    } else if delay <= cfg.attribution_len {
        SampleClass::FakeNegative
    } else {
        SampleClass::RealNegative
    }
}

/// Every delivery a single click produces under `cfg.policy`.
pub fn schedule<'a>(sample: &'a ClickSample, cfg: &PipelineConfig) -> Vec<DeliveredSample<'a>> {
    use DeliveryKind::*;

    let class = classify(sample, cfg);
    let click = sample.click_time;
    let window_end = click + cfg.window_len;
    let window_record = || {
        let label = if class == SampleClass::Positive {
            Label::Positive
        } else {
            Label::Negative
        };
        DeliveredSample::new(sample, label, window_end, WindowEnd)
    };
    let calibration = || {
        // Only reached for fake negatives, which always carry a conversion.
        let at = sample.conversion_time.unwrap_or(window_end);
        DeliveredSample::new(sample, Label::Positive, at, Calibration)
    };

    let mut out = Vec::with_capacity(3);
    match cfg.policy {
        Policy::Dgdfem => {
            out.push(DeliveredSample::new(
                sample,
                Label::Unlabeled,
                click,
                Instant,
            ));
            out.push(window_record());
            if class == SampleClass::FakeNegative {
                out.push(calibration());
            }
        }
        Policy::Fnw => {
            out.push(DeliveredSample::new(
                sample,
                Label::Negative,
                click,
                AtClick,
            ));
            match sample.conversion_time {
                Some(conv) if sample.converts_within(cfg.attribution_len) => {
                    out.push(DeliveredSample::new(
                        sample,
                        Label::Positive,
                        conv,
                        Calibration,
                    ));
                }
                _ => {}
            }
        }
        Policy::Esdfm => {
            out.push(window_record());
            if class == SampleClass::FakeNegative {
                out.push(calibration());
            }
        }
        Policy::Oracle => {
            let label = if sample.converts_within(cfg.attribution_len) {
                Label::Positive
            } else {
                Label::Negative
            };
            out.push(DeliveredSample::new(sample, label, click, AtClick));
        }
        Policy::PretrainStatic => {}
    }
    out
}

/// Checks the replay preconditions: nondecreasing click times, unique ids,
/// conversions not before clicks.
pub fn validate_stream(stream: &[ClickSample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(stream.len());
    for (idx, s) in stream.iter().enumerate() {
        if !s.click_time.is_finite() {
            return Err(Error::Unsorted(format!(
                "record #{idx} (sample_id={}) has a non-finite click time",
                s.sample_id
            )));
        }
        if idx > 0 && s.click_time < stream[idx - 1].click_time {
            return Err(Error::Unsorted(format!(
                "record #{idx} (sample_id={}) clicks at {} before its predecessor at {}",
                s.sample_id,
                s.click_time,
                stream[idx - 1].click_time
            )));
        }
        if let Some(c) = s.conversion_time {
            if !(c >= s.click_time) {
                return Err(Error::Contract(format!(
                    "sample_id={} converts at {c} before its click at {}",
                    s.sample_id, s.click_time
                )));
            }
        }
        if !seen.insert(s.sample_id) {
            return Err(Error::Contract(format!(
                "duplicate sample_id={}",
                s.sample_id
            )));
        }
    }
    Ok(())
}

struct Pending<'a>(DeliveredSample<'a>);

impl PartialEq for Pending<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending<'_> {}

impl PartialOrd for Pending<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.replay_cmp(&other.0)
    }
}

/// Event-time merge of all schedules. Clicks are admitted lazily: a pending
/// delivery is released once the next unread click is strictly later, since
/// every delivery of a click happens at or after its click time.
pub struct Replay<'a> {
    stream: &'a [ClickSample],
    next: usize,
    cfg: PipelineConfig,
    heap: BinaryHeap<Reverse<Pending<'a>>>,
}

impl<'a> Replay<'a> {
    /// Stream time up to which all deliveries have been released.
    pub fn watermark(&self) -> f64 {
        self.stream
            .get(self.next)
            .map_or(f64::INFINITY, |s| s.click_time)
    }
}

impl<'a> Iterator for Replay<'a> {
    type Item = DeliveredSample<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        while let Some(s) = self.stream.get(self.next) {
            let admit = match self.heap.peek() {
                Some(Reverse(top)) => s.click_time <= top.0.delivery_time,
                None => true,
            };
            if !admit {
                break;
            }
            self.heap.extend(
                schedule(s, &self.cfg)
                    .into_iter()
                    .map(|d| Reverse(Pending(d))),
            );
            self.next += 1;
        }
        self.heap.pop().map(|Reverse(p)| p.0)
    }
}

/// Replays `stream` (sorted by click time) as one ordered delivery stream.
pub fn replay<'a>(stream: &'a [ClickSample], cfg: &PipelineConfig) -> Result<Replay<'a>> {
    validate_stream(stream)?;
    Ok(Replay {
        stream,
        next: 0,
        cfg: *cfg,
        heap: BinaryHeap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Routes {
    pub to_graph: bool,
    pub to_trainer: bool,
}

pub fn routing(d: &DeliveredSample<'_>) -> Routes {
    match d.label {
        Label::Unlabeled => Routes {
            to_graph: true,
            to_trainer: false,
        },
        Label::Negative => Routes {
            to_graph: false,
            to_trainer: true,
        },
        Label::Positive => Routes {
            to_graph: true,
            to_trainer: true,
        },
    }
}

/// Writes `delivery_ts,sample_id,label,kind`.
pub fn write_delivery_log<'a, W: Write>(
    mut out: W,
    deliveries: impl IntoIterator<Item = DeliveredSample<'a>>,
) -> Result<()> {
    writeln!(out, "delivery_ts,sample_id,label,kind")?;
    for d in deliveries {
        writeln!(
            out,
            "{},{},{},{}",
            d.delivery_time,
            d.sample.sample_id,
            d.label.as_i8(),
            d.kind.as_str()
        )?;
    }
    Ok(())
}
