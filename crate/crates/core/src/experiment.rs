//! Run configuration and the offline → online experiment protocol.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{presets, GeneratorConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord, PipelineStats, SlidingSeries, SlotMetric};
use crate::model::{FeatureSchema, Model, ModelConfig, Vocabulary};
use crate::pipeline::{
    replay, ClickSample, DeliveredSample, DeliveryKind, PipelineConfig, Policy, SECONDS_PER_HOUR,
};
use crate::rng::substream;
use crate::tensor::ParamSet;
use crate::train::{
    self, offline_pretrain, Learner, Objective, Optimizer, OptimizerConfig, OptimizerKind,
    PretrainConfig, PretrainResult, RatioMode, StepMetrics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DataSection {
    pub generator: GeneratorConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub window_hours: f64,
    pub attribution_hours: f64,
    pub policies: Vec<Policy>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            window_hours: 0.25,
            attribution_hours: 24.0,
            policies: Policy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub hops: usize,
    pub edge_cap: usize,
    pub attribute_versions: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            hops: 2,
            edge_cap: 5,
            attribute_versions: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: OptimizerConfig,
    pub online_batch: usize,
    pub offline_batch: usize,
    pub offline_epochs: usize,
    pub ratio_mode: RatioMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            online_batch: 32,
            offline_batch: 1024,
            offline_epochs: 1,
            ratio_mode: RatioMode::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub slot_hours: f64,
    /// Weight slots by record count when averaging.
    pub weighted_slots: bool,
    pub case_study_window_hours: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            slot_hours: 1.0,
            weighted_slots: false,
            case_study_window_hours: 8.0,
        }
    }
}

/// Full description of an experiment; every section has defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub pipeline: PipelineSection,
    pub graph: GraphSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// The drifted synthetic preset with the training settings used for the
    /// policy comparison.
    pub fn drifted_preset(seed: u64) -> Self {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        cfg.data.generator = presets::drifted();
        cfg.train.optimizer = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        };
        cfg.train.offline_batch = 64;
        cfg.train.offline_epochs = 2;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_config(Policy::Dgdfem)?;
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.generator().validate()?;
        if self.graph.hops == 0 || self.graph.edge_cap == 0 || self.graph.attribute_versions == 0 {
            return Err(Error::Config(
                "graph hops, edge_cap and attribute_versions must be >= 1".into(),
            ));
        }
        if self.train.online_batch == 0
            || self.train.offline_batch == 0
            || self.train.offline_epochs == 0
        {
            return Err(Error::Config(
                "batch sizes and offline_epochs must be >= 1".into(),
            ));
        }
        if !(self.eval.slot_hours > 0.0) || !(self.eval.case_study_window_hours > 0.0) {
            return Err(Error::Config(
                "slot_hours and case_study_window_hours must be positive".into(),
            ));
        }
        if self.pipeline.policies.is_empty() {
            return Err(Error::Config("pipeline.policies is empty".into()));
        }
        Ok(())
    }

    pub fn pipeline_config(&self, policy: Policy) -> Result<PipelineConfig> {
        PipelineConfig::from_hours(
            self.pipeline.window_hours,
            self.pipeline.attribution_hours,
            policy,
        )
    }

    /// Generator settings with the run seed.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.data.generator.clone()
        }
    }
}

/// Offline half, online half and the time that separates them.
pub struct Split<'a> {
    pub offline: &'a [ClickSample],
    pub online: &'a [ClickSample],
    pub split_time: f64,
}

/// Halves a click-time-sorted log by count.
pub fn split_half(clicks: &[ClickSample]) -> Result<Split<'_>> {
    if clicks.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 clicks to split, got {}",
            clicks.len()
        )));
    }
    let split_time = clicks[clicks.len() / 2].click_time;
    let cut = clicks.partition_point(|c| c.click_time < split_time);
    if cut == 0 {
        return Err(Error::Config(
            "all clicks share one timestamp; cannot split".into(),
        ));
    }
    Ok(Split {
        offline: &clicks[..cut],
        online: &clicks[cut..],
        split_time,
    })
}

/// Shared state after the offline phase.
pub struct Prepared {
    pub model: Model,
    pub pretrain: PretrainResult,
    pub split_time: f64,
    pub optimizer: Optimizer,
}

pub fn prepare(cfg: &RunConfig, split: &Split<'_>) -> Result<Prepared> {
    let schema = FeatureSchema::of(&split.offline[0]);
    let vocab = Vocabulary::build(&schema, split.offline);
    let mut rng = substream(cfg.seed, "init");
    let (model, params) = Model::new(cfg.model.clone(), schema, vocab, &mut rng)?;
    let mut opt = Optimizer::new(cfg.train.optimizer)?;
    let pre_cfg = PretrainConfig {
        epochs: cfg.train.offline_epochs,
        batch_size: cfg.train.offline_batch,
        hops: cfg.graph.hops,
        edge_cap: cfg.graph.edge_cap,
        attribute_versions: cfg.graph.attribute_versions,
    };
    let pretrain = offline_pretrain(
        &model,
        params,
        &mut opt,
        split.offline,
        &cfg.pipeline_config(Policy::Dgdfem)?,
        split.split_time,
        &pre_cfg,
    )?;
    Ok(Prepared {
        model,
        pretrain,
        split_time: split.split_time,
        optimizer: opt,
    })
}

/// Everything one policy's online phase produced.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub policy: Policy,
    pub records: Vec<EvalRecord>,
    pub slots: Vec<SlotMetric>,
    /// Unweighted (or weighted, per config) slot-mean AUC and NLL.
    pub mean_auc: Option<f64>,
    pub mean_nll: Option<f64>,
    pub steps: Vec<StepMetrics>,
    /// `(time, mean low-pass weight)` of training forwards.
    pub filter_log: Vec<(f64, f64)>,
    pub stats: PipelineStats,
    pub params: ParamSet,
}

/// The online delivery stream of a policy. The oracle's graph is built
/// from every click like the DGDFEM graph, so its stream also carries the
/// unlabeled click records; they precede its labeled click-time records.
pub fn online_deliveries<'a>(
    online: &'a [ClickSample],
    pcfg: &PipelineConfig,
) -> Result<Vec<DeliveredSample<'a>>> {
    let mut out: Vec<DeliveredSample<'a>> = replay(online, pcfg)?.collect();
    if pcfg.policy == Policy::Oracle {
        let clicks = replay(online, &pcfg.with_policy(Policy::Dgdfem))?
            .filter(|d| d.kind == DeliveryKind::Instant);
        out.extend(clicks);
        out.sort_by(|a, b| a.replay_cmp(b));
    }
    Ok(out)
}

/// Online phase for one policy from the shared pretrained state.
///
/// Every online click is scored at its click time by the parameters frozen
/// at the start of its slot, against the learner's current graph. Only
/// deliveries before the click, plus unlabeled click records at that same
/// instant (its own edge included), are visible.
pub fn run_policy(
    cfg: &RunConfig,
    prep: &Prepared,
    online: &[ClickSample],
    policy: Policy,
) -> Result<PolicyRun> {
    let pcfg = cfg.pipeline_config(policy)?;
    let hops = cfg.graph.hops;
    let slot_width = cfg.eval.slot_hours * SECONDS_PER_HOUR;
    let origin = prep.split_time;
    let slot_of = |t: f64| ((t - origin) / slot_width).floor() as i64;

    let mut learner = Learner::new(
        &prep.model,
        prep.pretrain.params.clone(),
        prep.optimizer.clone(),
        prep.pretrain.graph.clone(),
        prep.pretrain.scaler.clone(),
        hops,
        Objective::for_policy(policy, cfg.train.ratio_mode),
        cfg.train.online_batch,
    )?;
    let mut deliveries = online_deliveries(online, &pcfg)?.into_iter().peekable();
    let mut trainer_log: Vec<DeliveredSample<'_>> = Vec::new();
    let mut snapshot = learner.params.clone();
    let mut slot = slot_of(origin);
    let mut records = Vec::with_capacity(online.len());

    let advance_slot = |learner: &mut Learner<'_, '_>,
                        snapshot: &mut ParamSet,
                        slot: &mut i64,
                        t: f64|
     -> Result<()> {
        let s = slot_of(t);
        if s > *slot {
            learner.flush()?;
            *snapshot = learner.params.clone();
            *slot = s;
        }
        Ok(())
    };

    for click in online {
        while let Some(d) = deliveries.next_if(|d| {
            d.delivery_time < click.click_time
                || (d.delivery_time == click.click_time && d.kind == DeliveryKind::Instant)
        }) {
            advance_slot(&mut learner, &mut snapshot, &mut slot, d.delivery_time)?;
            if crate::pipeline::routing(&d).to_trainer {
                trainer_log.push(d);
            }
            learner.deliver(d)?;
        }
        advance_slot(&mut learner, &mut snapshot, &mut slot, click.click_time)?;
        let (heads, _) = train::predict(
            &prep.model,
            &snapshot,
            &learner.graph,
            &learner.scaler,
            click,
            hops,
            click.click_time,
        )?;
        records.push(EvalRecord::new(
            heads.y_cvr_hat,
            click.converts_within(pcfg.attribution_len),
            click.click_time,
        ));
    }
    learner.flush()?;

    let slots = metrics::slot_metrics(&records, origin, slot_width)?;
    let (mean_auc, mean_nll) = match metrics::slot_mean(&slots, cfg.eval.weighted_slots) {
        Ok((a, n)) => (Some(a), Some(n)),
        Err(_) => (None, None),
    };
    let stats = metrics::pipeline_stats(trainer_log.iter(), pcfg.attribution_len);
    Ok(PolicyRun {
        policy,
        records,
        slots,
        mean_auc,
        mean_nll,
        steps: std::mem::take(&mut learner.steps),
        filter_log: std::mem::take(&mut learner.filter_log),
        stats,
        params: learner.params,
    })
}

/// Shared offline phase, then every requested policy on the same online
/// stream and evaluation slots.
/// With `parallel`, policies run on scoped threads; their states are
/// disjoint so results are identical to the sequential order.
pub fn compare(
    cfg: &RunConfig,
    clicks: &[ClickSample],
    policies: &[Policy],
    parallel: bool,
) -> Result<(Prepared, Vec<PolicyRun>)> {
    let split = split_half(clicks)?;
    let prep = prepare(cfg, &split)?;
    let runs = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = policies
                .iter()
                .map(|&p| {
                    let prep = &prep;
                    let online = split.online;
                    scope.spawn(move || run_policy(cfg, prep, online, p))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("policy thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        policies
            .iter()
            .map(|&p| run_policy(cfg, &prep, split.online, p))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((prep, runs))
}

/// `(click time, converted within the attribution window)` per online click.
pub fn conversion_events(online: &[ClickSample], attribution_len: f64) -> Vec<(f64, f64)> {
    online
        .iter()
        .map(|c| {
            (
                c.click_time,
                f64::from(u8::from(c.converts_within(attribution_len))),
            )
        })
        .collect()
}

/// Sliding-window CVR vs. filter weight for one run.
pub fn case_study(
    cvr_events: &[(f64, f64)],
    filter_log: &[(f64, f64)],
    window_hours: f64,
) -> Result<SlidingSeries> {
    metrics::sliding_window_series(cvr_events, filter_log, window_hours * SECONDS_PER_HOUR)
}

fn write_pairs(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for (a, b) in rows {
        writeln!(w, "{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let f = File::open(path).map_err(|e| Error::Data {
        line: 0,
        msg: format!("cannot open {}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line?;
        let bad = || Error::Data {
            line: k + 1,
            msg: format!("{}: expected two numbers, got `{line}`", path.display()),
        };
        let (a, b) = line.split_once(',').ok_or_else(bad)?;
        out.push((
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

pub const FILTER_LOG: &str = "filter_weights.csv";
pub const CONVERSION_LOG: &str = "conversions.csv";

/// Writes a policy run's artifacts into `dir`.
pub fn write_run(
    dir: &Path,
    run: &PolicyRun,
    online: &[ClickSample],
    attribution_len: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.params
        .save(BufWriter::new(File::create(dir.join("params.bin"))?))?;
    train::write_step_metrics(
        BufWriter::new(File::create(dir.join("step_metrics.csv"))?),
        &run.steps,
    )?;
    metrics::write_results_csv(
        BufWriter::new(File::create(dir.join("slot_metrics.csv"))?),
        &[(run.policy.to_string(), run.slots.clone())],
    )?;
    write_pairs(
        &dir.join(FILTER_LOG),
        "t,mean_filter_weight",
        &run.filter_log,
    )?;
    write_pairs(
        &dir.join(CONVERSION_LOG),
        "t,converted",
        &conversion_events(online, attribution_len),
    )?;
    Ok(())
}
