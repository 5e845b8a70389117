use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dgdf_core::datagen::{self, presets};
use dgdf_core::experiment::{self, PolicyRun, RunConfig};
use dgdf_core::metrics::{self, fmt_metric};
use dgdf_core::pipeline::{ClickSample, Policy, SECONDS_PER_HOUR};
use dgdf_core::train::RatioMode;
use dgdf_core::Error;

/// `println!` that reports a closed stdout instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(io::stdout(), $($arg)*).map_err(Error::Io)?
    };
}

#[derive(Parser)]
#[command(
    name = "dgdf",
    version,
    about = "Streaming delayed-feedback CVR training on dynamic graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click log.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clicks: Option<usize>,
    },
    /// Pretrain on the first half of a log and train online on the second.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "DGDFEM")]
        policy: Policy,
    },
    /// Run several pipelines on the same stream and rank them.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated; defaults to the config's policy list.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
        /// Directory for per-slot results.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Correlate sliding-window CVR with the logged filter weight.
    CaseStudy {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        window_hours: f64,
        /// Write the aligned series here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus flags that override individual keys.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_hours: Option<f64>,
    #[arg(long)]
    attribution_hours: Option<f64>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    edge_cap: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    ratio_mode: Option<RatioMode>,
}

impl Common {
    fn load(&self) -> dgdf_core::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.window_hours {
            cfg.pipeline.window_hours = v;
        }
        if let Some(v) = self.attribution_hours {
            cfg.pipeline.attribution_hours = v;
        }
        if let Some(v) = self.hops {
            cfg.graph.hops = v;
        }
        if let Some(v) = self.edge_cap {
            cfg.graph.edge_cap = v;
        }
        if let Some(v) = self.epsilon {
            cfg.model.epsilon = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.model.embed_dim = v;
        }
        if let Some(v) = self.ratio_mode {
            cfg.train.ratio_mode = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_log(path: &Path) -> anyhow::Result<Vec<ClickSample>> {
    let f = File::open(path).map_err(|e| Error::Data {
        line: 0,
        msg: format!("cannot open {}: {e}", path.display()),
    })?;
    Ok(datagen::ingest_csv(BufReader::new(f))?)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn generate(common: &Common, out: &Path, n_clicks: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    if let Some(n) = n_clicks {
        cfg.data.generator.n_clicks = n;
        cfg.validate()?;
    }
    let samples = datagen::generate(&cfg.generator())?;
    let mut w = create(out)?;
    datagen::write_csv(&mut w, &samples)?;
    w.flush().map_err(Error::Io)?;
    let marks = [presets::CRITEO2[0].hours, presets::CRITEO2[1].hours];
    let s = datagen::summarize(&samples, marks);
    outln!("n_clicks={}", s.n_clicks);
    outln!("cvr={:.4}", s.cvr);
    for (h, q) in s.delay_quantiles {
        outln!("delay_cdf@{h}h={q:.4}");
    }
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, policy: Policy) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let clicks = read_log(data)?;
    let (prep, runs) = experiment::compare(&cfg, &clicks, &[policy], false)?;
    let run = &runs[0];
    let split = experiment::split_half(&clicks)?;
    experiment::write_run(
        out,
        run,
        split.online,
        cfg.pipeline.attribution_hours * SECONDS_PER_HOUR,
    )?;
    dgdf_core::train::write_step_metrics(
        create(&out.join("pretrain_steps.csv"))?,
        &prep.pretrain.steps,
    )?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?).map_err(Error::Io)?;
    outln!(
        "policy={} slots={} auc={} nll={} steps={}",
        run.policy,
        run.slots.len(),
        fmt_metric(run.mean_auc),
        fmt_metric(run.mean_nll),
        run.steps.len()
    );
    Ok(())
}

fn ranking_table(runs: &[PolicyRun]) -> String {
    let mut order: Vec<&PolicyRun> = runs.iter().collect();
    order.sort_by(|a, b| {
        let key = |r: &PolicyRun| r.mean_auc.unwrap_or(f64::NEG_INFINITY);
        key(b)
            .total_cmp(&key(a))
            .then(a.policy.as_str().cmp(b.policy.as_str()))
    });
    let find = |p: Policy| runs.iter().find(|r| r.policy == p).and_then(|r| r.mean_auc);
    let (base, ideal) = (find(Policy::PretrainStatic), find(Policy::Oracle));
    let mut s = String::from(
        "rank  policy           auc      nll      improv   label_acc  lag_h   trainer_n\n",
    );
    for (i, r) in order.iter().enumerate() {
        let improv = match (r.mean_auc, base, ideal) {
            (Some(m), Some(b), Some(o)) => metrics::improv(m, b, o).ok(),
            _ => None,
        };
        s.push_str(&format!(
            "{:<5} {:<16} {:<8} {:<8} {:<8} {:<10.4} {:<7.3} {}\n",
            i + 1,
            r.policy.as_str(),
            fmt4(r.mean_auc),
            fmt4(r.mean_nll),
            improv.map_or("-".into(), |v| format!("{v:.2}%")),
            r.stats.label_accuracy,
            r.stats.mean_delivery_lag / SECONDS_PER_HOUR,
            r.stats.trainer_deliveries
        ));
    }
    s
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or("NaN".into(), |x| format!("{x:.4}"))
}

fn compare(
    common: &Common,
    data: &Path,
    policies: &[Policy],
    out: Option<&Path>,
    parallel: bool,
) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let policies = if policies.is_empty() {
        cfg.pipeline.policies.clone()
    } else {
        policies.to_vec()
    };
    let clicks = read_log(data)?;
    let (_, runs) = experiment::compare(&cfg, &clicks, &policies, parallel)?;
    write!(io::stdout(), "{}", ranking_table(&runs)).map_err(Error::Io)?;
    let rows: Vec<(String, Vec<_>)> = runs
        .iter()
        .map(|r| (r.policy.to_string(), r.slots.clone()))
        .collect();
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::Io)?;
            metrics::write_results_csv(create(&dir.join("slot_metrics.csv"))?, &rows)?;
            fs::write(dir.join("ranking.txt"), ranking_table(&runs)).map_err(Error::Io)?;
        }
        None => metrics::write_results_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn case_study(run: &Path, window_hours: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let weights = experiment::read_pairs(&run.join(experiment::FILTER_LOG))?;
    let conversions = experiment::read_pairs(&run.join(experiment::CONVERSION_LOG))?;
    let series = experiment::case_study(&conversions, &weights, window_hours)?;
    match out {
        Some(p) => metrics::write_case_study_csv(create(p)?, &series)?,
        None => metrics::write_case_study_csv(io::stdout().lock(), &series)?,
    }
    outln!("pearson_r={}", fmt_metric(series.correlation));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            common,
            out,
            n_clicks,
        } => generate(&common, &out, n_clicks),
        Command::Train {
            common,
            data,
            out,
            policy,
        } => train(&common, &data, &out, policy),
        Command::Compare {
            common,
            data,
            policies,
            out,
            parallel,
        } => compare(&common, &data, &policies, out.as_deref(), parallel),
        Command::CaseStudy {
            run,
            window_hours,
            out,
        } => case_study(&run, window_hours, out.as_deref()),
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<io::Error>()
            .or(match c.downcast_ref::<Error>() {
                Some(Error::Io(x)) => Some(x),
                _ => None,
            });
        io.is_some_and(|x| x.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
