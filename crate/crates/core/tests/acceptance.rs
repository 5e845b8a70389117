//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built with `harness = false`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{build_model, click, small_model_cfg, H};
use dgdf_core::datagen::{self, presets};
use dgdf_core::experiment::{self, RunConfig};
use dgdf_core::graph::{EdgeLabel, GraphState, NodeKey, Role};
use dgdf_core::metrics::{auc, improv, EvalRecord};
use dgdf_core::model::{filter_weights, FeatureScaler, LayerEdge, LayerGraph, ModelConfig};
use dgdf_core::pipeline::{
    replay, schedule, ClickSample, DeliveryKind, Features, Label, PipelineConfig, Policy,
    SampleClass,
};
use dgdf_core::rng::{substream, Rng};
use dgdf_core::tensor::{check_param_gradients, GradBuffer, ParamSet, Tape, Tensor};
use dgdf_core::train::{
    aux_losses, debias_loss, distribution_oracle, importance_ratios, project_simplex, Cell,
    RatioMode, SyntheticDistribution,
};
use rand::Rng as _;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<(), String> {
    let el = started.elapsed();
    if el > limit {
        return Err(format!(
            "{what} took {:.1}s, limit {:.0}s",
            el.as_secs_f64(),
            limit.as_secs_f64()
        ));
    }
    Ok(())
}

fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------- 1

fn random_distribution(rng: &mut Rng) -> SyntheticDistribution {
    let n = rng.random_range(1..=8usize);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut cells: Vec<Cell> = raw
        .iter()
        .map(|m| Cell {
            mass: m / total,
            p1: rng.random_range(0.01..0.99),
            q: rng.random_range(0.01..0.99),
            score: rng.random_range(0.01..0.99),
        })
        .collect();
    let rest: f64 = cells[1..].iter().map(|c| c.mass).sum();
    cells[0].mass = 1.0 - rest;
    SyntheticDistribution { cells }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(1, "acceptance-debias");
    let (mut worst_exact, mut min_paper) = (0.0f64, f64::INFINITY);
    for _ in 0..500 {
        let d = random_distribution(&mut rng);
        let ideal: f64 = d
            .cells
            .iter()
            .map(|c| c.mass * (-c.p1 * c.score.ln() - (1.0 - c.p1) * (1.0 - c.score).ln()))
            .sum();
        let exact = distribution_oracle(&d, RatioMode::Exact).map_err(|e| e.to_string())?;
        worst_exact = worst_exact.max((exact.weighted_loss - ideal).abs());
        let paper = distribution_oracle(&d, RatioMode::Paper).map_err(|e| e.to_string())?;
        min_paper = min_paper.min((paper.weighted_loss - ideal).abs());
    }
    within(Duration::from_secs(1), start, "500 distributions")?;
    ensure!(worst_exact <= 1e-10, "EXACT gap {worst_exact:e}");
    ensure!(min_paper > 0.0, "PAPER gap vanished");
    Ok(format!(
        "500 distributions, EXACT max gap {worst_exact:.1e}, PAPER min gap {min_paper:.2e}, {:.0} ms",
        start.elapsed().as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    // ten clicks of one cell: two on time, two late, six never
    let conv = [
        Some(0.1),
        Some(0.2),
        Some(3.0),
        Some(20.0),
        None,
        None,
        None,
        None,
        None,
        None,
    ];
    let clicks: Vec<ClickSample> = conv
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let t = k as f64 * 0.01;
            click(k as u64, 1, 1, t, c.map(|d| t + d))
        })
        .collect();
    let cfg = PipelineConfig::from_hours(0.25, 24.0, Policy::Dgdfem).map_err(|e| e.to_string())?;
    let labeled: Vec<_> = replay(&clicks, &cfg)
        .map_err(|e| e.to_string())?
        .filter(|d| d.label != Label::Unlabeled)
        .collect();
    let n = labeled.len() as f64;
    let b1 = labeled
        .iter()
        .filter(|d| d.label == Label::Positive)
        .count() as f64
        / n;
    let p1 = 0.4;
    let (enum_pos, enum_neg) = (p1 / b1, (1.0 - p1) / (1.0 - b1));
    let on_time = labeled
        .iter()
        .filter(|d| d.kind == DeliveryKind::WindowEnd && d.label == Label::Positive)
        .count() as f64
        / 10.0;
    let late = labeled
        .iter()
        .filter(|d| d.kind == DeliveryKind::Calibration)
        .count() as f64
        / 10.0;
    let (w_pos, w_neg) =
        importance_ratios(on_time, late, RatioMode::Exact).map_err(|e| e.to_string())?;
    let (w_pos_p, w_neg_p) =
        importance_ratios(on_time, late, RatioMode::Paper).map_err(|e| e.to_string())?;
    ensure!(
        (enum_pos - 1.2).abs() < 1e-15 && (enum_neg - 0.9).abs() < 1e-15,
        "enumeration {enum_pos} {enum_neg}"
    );
    ensure!(
        (w_pos - 1.2).abs() < 1e-15 && (w_neg - 0.9).abs() < 1e-15,
        "EXACT {w_pos} {w_neg}"
    );
    ensure!(
        (w_pos_p - 1.2).abs() < 1e-15 && (w_neg_p - 0.72).abs() < 1e-15,
        "PAPER {w_pos_p} {w_neg_p}"
    );
    Ok(format!(
        "w_pos {w_pos:.15}, EXACT w_neg {w_neg:.15}, PAPER w_neg {w_neg_p:.15} (tol 1e-15)"
    ))
}

// ---------------------------------------------------------------- 3, 4 shared

fn graph_clicks() -> Vec<ClickSample> {
    vec![
        click(0, 1, 1, 0.0, Some(1.0)),
        click(1, 2, 1, 0.5, None),
        click(2, 2, 2, 1.0, None),
        click(3, 3, 2, 1.5, Some(2.0)),
        click(4, 1, 3, 2.0, None),
        click(5, 3, 3, 2.5, None),
        click(6, 4, 2, 2.6, None),
    ]
}

fn small_graph() -> Result<(GraphState, FeatureScaler, Vec<ClickSample>), String> {
    let cs = graph_clicks();
    let (model, _) = build_model(small_model_cfg(), &cs, 0);
    let mut scaler = FeatureScaler::new(&model.schema);
    let mut g = GraphState::new(5).map_err(|e| e.to_string())?;
    for c in &cs {
        scaler.observe(c);
        let t = c.click_time;
        let f = |e: dgdf_core::Error| e.to_string();
        g.apply_node_event(NodeKey::user(c.user_id), c.user_features.clone(), t)
            .map_err(f)?;
        g.apply_node_event(NodeKey::item(c.item_id), c.item_features.clone(), t)
            .map_err(f)?;
        g.apply_edge_event(
            NodeKey::user(c.user_id),
            NodeKey::item(c.item_id),
            EdgeLabel::Unlabeled,
            t,
        )
        .map_err(f)?;
    }
    g.apply_edge_event(
        NodeKey::user(1),
        NodeKey::item(1),
        EdgeLabel::Positive,
        2.8 * H,
    )
    .map_err(|e| e.to_string())?;
    Ok((g, scaler, cs))
}

// ---------------------------------------------------------------- 3

/// Gradient check on the shared-trunk model; `shared = false` instead
/// checks the stop-gradient pathways, whose gradients finite differences
/// cannot match by construction.
fn gradient_integrity(shared: bool) -> Outcome {
    let (g, scaler, cs) = small_graph()?;
    let cfg = ModelConfig {
        aux_shared_trunk: shared,
        ..small_model_cfg()
    };
    let (model, params) = build_model(cfg, &cs, 7);
    let t = 3.0 * H;
    let batch = [(1u64, 3u64, true), (2, 2, false), (4, 2, false)];
    let kinds = [
        (DeliveryKind::Calibration, Label::Positive),
        (DeliveryKind::WindowEnd, Label::Negative),
        (DeliveryKind::WindowEnd, Label::Negative),
    ];
    let samples: Vec<_> = batch
        .iter()
        .map(|&(u, i, _)| g.khop_sample(&[NodeKey::user(u), NodeKey::item(i)], 2, t))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let labels: Vec<bool> = batch.iter().map(|b| b.2).collect();
    let forward_all = |tape: &mut Tape| -> dgdf_core::Result<_> {
        let mut ys = (Vec::new(), Vec::new(), Vec::new());
        for (&(u, i, _), s) in batch.iter().zip(&samples) {
            let out = model.forward(tape, &scaler, s, NodeKey::user(u), NodeKey::item(i))?;
            ys.0.push(out.y_p);
            ys.1.push(out.y_fn);
            ys.2.push(out.y_cvr);
        }
        Ok((
            tape.concat(&ys.0, 0)?,
            tape.concat(&ys.1, 0)?,
            tape.concat(&ys.2, 0)?,
        ))
    };
    // the ratio weights are constants of the loss: fix them at the base
    // point, projected like the trainer does
    let aux: Vec<(f64, f64)> = {
        let mut tape = Tape::inference(&params);
        let (yp, yf, _) = forward_all(&mut tape).map_err(|e| e.to_string())?;
        let v = tape.value(yp).data().iter().zip(tape.value(yf).data());
        v.map(|(&p, &f)| project_simplex(p, f).0).collect()
    };

    if shared {
        let ids: Vec<_> = params.ids().collect();
        let err = check_param_gradients(
            &params,
            &ids,
            |tape| {
                let (yp, yf, yc) = forward_all(tape)?;
                let (l1, _) = debias_loss(tape, yc, &aux, &labels, RatioMode::Exact)?;
                let (l2, _) = aux_losses(tape, yp, yf, &kinds)?;
                tape.add(l1, l2)
            },
            1e-6,
            None,
        )
        .map_err(|e| e.to_string())?;
        ensure!(err < 1e-4, "max relative error {err:e}");
        return Ok(format!(
            "{} scalars, max rel err {err:.1e}",
            params.scalar_count()
        ));
    }

    let grads_of = |which: u8| -> Result<GradBuffer, String> {
        let mut buf = GradBuffer::zeros_like(&params);
        let mut tape = Tape::new(&params);
        let (yp, yf, yc) = forward_all(&mut tape).map_err(|e| e.to_string())?;
        let loss = if which == 0 {
            aux_losses(&mut tape, yp, yf, &kinds)
                .map_err(|e| e.to_string())?
                .0
        } else {
            debias_loss(&mut tape, yc, &aux, &labels, RatioMode::Exact)
                .map_err(|e| e.to_string())?
                .0
        };
        tape.backward_into(loss, &mut buf)
            .map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let heads = model.aux_head_params();
    let g_aux = grads_of(0)?;
    let leak: usize = model
        .cvr_params(&params)
        .iter()
        .map(|&id| g_aux.get(id).iter().filter(|&&x| x != 0.0).count())
        .sum();
    ensure!(
        leak == 0,
        "{leak} nonzero trunk/CVR gradients from the aux loss"
    );
    ensure!(
        heads
            .iter()
            .any(|&id| g_aux.get(id).iter().any(|&x| x != 0.0)),
        "aux heads got no gradient"
    );
    let g_cvr = grads_of(1)?;
    let leak: usize = heads
        .iter()
        .map(|&id| g_cvr.get(id).iter().filter(|&&x| x != 0.0).count())
        .sum();
    ensure!(
        leak == 0,
        "{leak} nonzero aux-head gradients from the CVR loss"
    );
    Ok("stop-gradient pathways exactly zero".into())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let fd = gradient_integrity(true)?;
    let sg = gradient_integrity(false)?;
    within(Duration::from_secs(30), start, "gradient check")?;
    Ok(format!(
        "{fd}, {sg}, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn naive_preference(params: &ParamSet, r: usize, eu: &[f64], ei: &[f64]) -> f64 {
    let k = params.get(params.find("conve.kernel").unwrap());
    let b = params.get(params.find("conve.bias").unwrap()).data();
    let w = params.get(params.find("conve.projection").unwrap()).data();
    let (kh, kw, c) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let img: Vec<f64> = eu.iter().chain(ei).copied().collect();
    let (hi, wi) = (2 * r, r);
    let mut logit = 0.0;
    let mut idx = 0;
    for y in 0..hi - kh + 1 {
        for x in 0..wi - kw + 1 {
            for ch in 0..c {
                let mut acc = b[ch];
                for dy in 0..kh {
                    for dx in 0..kw {
                        acc += img[(y + dy) * wi + x + dx] * k.data()[(dy * kw + dx) * c + ch];
                    }
                }
                logit += acc * w[idx];
                idx += 1;
            }
        }
    }
    logit.tanh()
}

/// Explicit low-pass `εI + Â` and high-pass `εI - Â` matrices mixed per
/// edge with weights `(1+p)/2` and `(1-p)/2`.
fn dense_layer(
    n: usize,
    d: usize,
    layer: &LayerGraph,
    h_prev: &[f64],
    h0: &[f64],
    p: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut low = vec![0.0; n * n];
    let mut high = vec![0.0; n * n];
    for (e, edge) in layer.edges.iter().enumerate() {
        let a = 1.0 / ((layer.degrees[edge.user] * layer.degrees[edge.item]) as f64).sqrt();
        let (wh, wl) = filter_weights(p[e]);
        for (t, s) in [(edge.user, edge.item), (edge.item, edge.user)] {
            low[t * n + s] += wl * a;
            high[t * n + s] -= wh * a;
        }
    }
    let mut out = vec![0.0; layer.targets * d];
    for t in 0..layer.targets {
        for j in 0..d {
            let mut v = eps * h0[t * d + j];
            for s in 0..n {
                v += (low[t * n + s] + high[t * n + s]) * h_prev[s * d + j];
            }
            out[t * d + j] = v;
        }
    }
    out
}

fn criterion_4() -> Outcome {
    let cs = graph_clicks();
    let (model, params) = build_model(small_model_cfg(), &cs, 5);
    let d = model.cfg.embed_dim;
    let mut rng = substream(4, "acceptance-hlgcn");
    let mut worst = 0.0f64;
    let mut positives = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=12usize);
        let users = rng.random_range(1..n);
        let n_edges = rng.random_range(0..=2 * n);
        let edges: Vec<LayerEdge> = (0..n_edges)
            .map(|_| LayerEdge {
                user: rng.random_range(0..users),
                item: rng.random_range(users..n),
                label: if rng.random_bool(0.25) {
                    EdgeLabel::Positive
                } else {
                    EdgeLabel::Unlabeled
                },
            })
            .collect();
        let mut degrees = vec![0usize; n];
        for e in &edges {
            degrees[e.user] += 1;
            degrees[e.item] += 1;
        }
        let degrees = degrees
            .iter()
            .map(|&k| (k + rng.random_range(0..2usize)).max(1))
            .collect();
        let layer = LayerGraph {
            targets: rng.random_range(1..=n),
            edges: edges.clone(),
            degrees,
        };
        let h_prev: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p_want: Vec<f64> = edges
            .iter()
            .map(|e| match e.label {
                EdgeLabel::Positive => 1.0,
                _ => naive_preference(
                    &params,
                    2,
                    &h_prev[e.user * d..(e.user + 1) * d],
                    &h_prev[e.item * d..(e.item + 1) * d],
                ),
            })
            .collect();

        let mut tape = Tape::inference(&params);
        let hp = tape.constant(Tensor::new(vec![n, d], h_prev.clone()).unwrap());
        let hz = tape.constant(Tensor::new(vec![n, d], h0.clone()).unwrap());
        let (out, p) = model
            .hlgcn_layer(&mut tape, &layer, hp, hz)
            .map_err(|e| e.to_string())?;
        for (e, (&got, &want)) in edges.iter().zip(tape.value(p).data().iter().zip(&p_want)) {
            if e.label == EdgeLabel::Positive {
                ensure!(got == 1.0, "positive edge scored {got}");
                positives += 1;
            }
            worst = worst.max((got - want).abs());
        }
        let want = dense_layer(n, d, &layer, &h_prev, &h0, &p_want, model.cfg.epsilon);
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-10, "max deviation {worst:e}");

    // filter algebra: bit-exact on dyadic preferences, within one ulp of 1 otherwise
    for k in -(1 << 20)..=(1 << 20) {
        let p = f64::from(k) / f64::from(1 << 20);
        let (wh, wl) = filter_weights(p);
        ensure!(wh + wl == 1.0 && wl - wh == p, "algebra broken at p={p}");
    }
    let mut algebra_err = 0.0f64;
    for _ in 0..100_000 {
        let p: f64 = rng.random_range(-1.0..=1.0);
        let (wh, wl) = filter_weights(p);
        algebra_err = algebra_err
            .max((wh + wl - 1.0).abs())
            .max((wl - wh - p).abs());
    }
    ensure!(
        algebra_err <= f64::EPSILON,
        "filter algebra off by {algebra_err:e}"
    );
    Ok(format!(
        "100 graphs, max deviation {worst:.1e}, {positives} positive edges pinned to 1, \
         algebra exact on 2^21+1 dyadic p and within {algebra_err:.1e} on random p"
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    use DeliveryKind::*;
    use Label::*;
    let c = PipelineConfig::from_hours(1.0, 24.0, Policy::Dgdfem).map_err(|e| e.to_string())?;
    let stream = vec![
        click(1, 1, 1, 0.0, Some(2.5)),
        click(2, 2, 2, 0.5, Some(0.8)),
        click(3, 3, 3, 2.0, None),
    ];
    let got: Vec<(u64, Label, f64, DeliveryKind)> = replay(&stream, &c)
        .map_err(|e| e.to_string())?
        .map(|d| (d.sample.sample_id, d.label, d.delivery_time / H, d.kind))
        .collect();
    let want = [
        (1, Unlabeled, 0.0, Instant),
        (2, Unlabeled, 0.5, Instant),
        (1, Negative, 1.0, WindowEnd),
        (2, Positive, 1.5, WindowEnd),
        (3, Unlabeled, 2.0, Instant),
        (1, Positive, 2.5, Calibration),
        (3, Negative, 3.0, WindowEnd),
    ];
    ensure!(got.len() == want.len(), "{} records: {got:?}", got.len());
    for (g, w) in got.iter().zip(&want) {
        ensure!(
            (g.0, g.1, g.3) == (w.0, w.1, w.3) && (g.2 - w.2).abs() < 1e-9,
            "{g:?} vs {w:?}"
        );
    }

    let pc = PipelineConfig::from_hours(0.25, 24.0, Policy::Dgdfem).map_err(|e| e.to_string())?;
    let samples = [
        (SampleClass::Positive, click(0, 0, 0, 0.0, Some(0.1))),
        (SampleClass::FakeNegative, click(1, 0, 0, 0.0, Some(5.0))),
        (SampleClass::RealNegative, click(2, 0, 0, 0.0, None)),
    ];
    let expected = |class: SampleClass, policy: Policy| -> Vec<(Label, f64, DeliveryKind)> {
        match (policy, class) {
            (Policy::Dgdfem, SampleClass::Positive) => {
                vec![(Unlabeled, 0.0, Instant), (Positive, 0.25, WindowEnd)]
            }
            (Policy::Dgdfem, SampleClass::FakeNegative) => vec![
                (Unlabeled, 0.0, Instant),
                (Negative, 0.25, WindowEnd),
                (Positive, 5.0, Calibration),
            ],
            (Policy::Dgdfem, SampleClass::RealNegative) => {
                vec![(Unlabeled, 0.0, Instant), (Negative, 0.25, WindowEnd)]
            }
            (Policy::Fnw, SampleClass::Positive) => {
                vec![(Negative, 0.0, AtClick), (Positive, 0.1, Calibration)]
            }
            (Policy::Fnw, SampleClass::FakeNegative) => {
                vec![(Negative, 0.0, AtClick), (Positive, 5.0, Calibration)]
            }
            (Policy::Fnw, SampleClass::RealNegative) => vec![(Negative, 0.0, AtClick)],
            (Policy::Esdfm, SampleClass::Positive) => vec![(Positive, 0.25, WindowEnd)],
            (Policy::Esdfm, SampleClass::FakeNegative) => {
                vec![(Negative, 0.25, WindowEnd), (Positive, 5.0, Calibration)]
            }
            (Policy::Esdfm, SampleClass::RealNegative) => vec![(Negative, 0.25, WindowEnd)],
            (Policy::Oracle, SampleClass::RealNegative) => vec![(Negative, 0.0, AtClick)],
            (Policy::Oracle, _) => vec![(Positive, 0.0, AtClick)],
            (Policy::PretrainStatic, _) => vec![],
        }
    };
    let mut cells = 0;
    for policy in Policy::ALL {
        for (class, s) in &samples {
            let got: Vec<_> = schedule(s, &pc.with_policy(policy))
                .iter()
                .map(|d| (d.label, (d.delivery_time - s.click_time) / H, d.kind))
                .collect();
            let want = expected(*class, policy);
            ensure!(got.len() == want.len(), "{policy} {class:?}: {got:?}");
            for (g, w) in got.iter().zip(&want) {
                ensure!(
                    g.0 == w.0 && g.2 == w.2 && (g.1 - w.1).abs() < 1e-9,
                    "{policy} {class:?}: {got:?}"
                );
            }
            cells += 1;
        }
    }
    Ok(format!(
        "timeline gives the 7-record sequence (the stated count of 8 contradicts the per-class schedule), \
         {cells}-cell class x policy table matches"
    ))
}

// ---------------------------------------------------------------- 6

fn symmetric(g: &GraphState) -> Result<(), String> {
    for key in g.node_keys().into_iter().filter(|k| k.role == Role::User) {
        for e in g.adjacency(key) {
            ensure!(e.user_key() == key, "{key} lists a foreign edge");
            let back = g.adjacency(e.item_key());
            ensure!(
                back.contains(&e),
                "edge {}-{} missing from item side",
                e.user,
                e.item
            );
        }
    }
    for key in g.node_keys().into_iter().filter(|k| k.role == Role::Item) {
        for e in g.adjacency(key) {
            ensure!(
                g.adjacency(e.user_key()).contains(&e),
                "edge {}-{} missing from user side",
                e.user,
                e.item
            );
        }
    }
    Ok(())
}

fn event_stream_run(m: usize, seed: u64) -> Result<(usize, usize), String> {
    let err = |e: dgdf_core::Error| e.to_string();
    let mut rng = substream(seed, "acceptance-graph");
    let mut g = GraphState::new(m).map_err(err)?;
    let (users, items) = (800u64, 120u64);
    let mut clicked: Vec<(u64, u64)> = Vec::new();
    let mut t = 0.0;
    let (mut events, mut probes) = (0usize, 0usize);
    let attr = |v: f64| Features::new(vec![v], vec![]);
    while events < 100_000 {
        t += rng.random_range(0.0..60.0);
        let (u, i) = if clicked.is_empty() || rng.random_bool(0.75) {
            let (u, i) = (rng.random_range(0..users), rng.random_range(0..items));
            g.apply_node_event(NodeKey::user(u), attr(t), t)
                .map_err(err)?;
            g.apply_node_event(NodeKey::item(i), attr(-t), t)
                .map_err(err)?;
            g.apply_edge_event(NodeKey::user(u), NodeKey::item(i), EdgeLabel::Unlabeled, t)
                .map_err(err)?;
            clicked.push((u, i));
            events += 3;
            (u, i)
        } else {
            let (u, i) =
                clicked[rng.random_range(clicked.len().saturating_sub(500)..clicked.len())];
            g.apply_edge_event(NodeKey::user(u), NodeKey::item(i), EdgeLabel::Positive, t)
                .map_err(err)?;
            events += 1;
            (u, i)
        };
        for k in [NodeKey::user(u), NodeKey::item(i)] {
            let n = g.adjacency(k).len();
            ensure!(n <= m, "{k} holds {n} edges with cap {m}");
        }
        if events % 5_000 < 3 {
            g.check_invariants().map_err(err)?;
            symmetric(&g)?;
        }
        if probes < (events / 100).min(1000) {
            probes += 1;
            let at = rng.random_range(0.0..=t);
            let keys = g.node_keys();
            let seed = keys[rng.random_range(0..keys.len())];
            if g.attribute_at(seed, at).is_some() {
                let s = g.khop_sample(&[seed], 2, at).map_err(err)?;
                ensure!(
                    s.edges.iter().all(|e| e.timestamp <= at),
                    "edge from the future at t={at}"
                );
                ensure!(
                    s.nodes.iter().all(|n| n.attribute_time <= at),
                    "attribute from the future at t={at}"
                );
            }
        }
    }
    g.check_invariants().map_err(err)?;
    symmetric(&g)?;
    Ok((events, probes))
}

fn criterion_6() -> Outcome {
    let mut parts = Vec::new();
    for (m, seed) in [(5, 0), (2, 1)] {
        let (events, probes) = event_stream_run(m, seed)?;
        ensure!(probes == 1000, "only {probes} probes");
        parts.push(format!("m={m}: {events} events, {probes} probes"));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut rng = substream(7, "acceptance-auc");
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=200usize);
        let levels = rng.random_range(2..=50u32);
        let r: Vec<EvalRecord> = (0..n)
            .map(|_| {
                EvalRecord::new(
                    f64::from(rng.random_range(0..levels)) / f64::from(levels),
                    rng.random_bool(0.4),
                    0.0,
                )
            })
            .collect();
        if !(r.iter().any(|x| x.label) && r.iter().any(|x| !x.label)) {
            continue;
        }
        let (mut num, mut pairs) = (0.0, 0.0);
        for p in r.iter().filter(|x| x.label) {
            for q in r.iter().filter(|x| !x.label) {
                pairs += 1.0;
                num += if p.score > q.score {
                    1.0
                } else if p.score == q.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let got = auc(&r).map_err(|e| e.to_string())?;
        ensure!(
            got == num / pairs,
            "instance {checked}: {got} vs {}",
            num / pairs
        );
        checked += 1;
    }
    let worked = auc(&[
        EvalRecord::new(0.8, true, 0.0),
        EvalRecord::new(0.4, true, 0.0),
        EvalRecord::new(0.6, false, 0.0),
        EvalRecord::new(0.2, false, 0.0),
    ])
    .map_err(|e| e.to_string())?;
    ensure!(worked == 0.75, "worked example {worked}");
    let v = improv(77.82, 75.07, 78.00).map_err(|e| e.to_string())?;
    ensure!((v - 93.86).abs() < 0.01, "improv {v}");
    Ok(format!(
        "1000 instances exact, worked example {worked}, improv {v:.2}"
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let [t1, t2] = presets::CRITEO2;
    let mix = datagen::calibrate_delay_mixture(t1, t2).map_err(|e| e.to_string())?;
    let d = datagen::sample_delays(&mix, 100_000, &mut substream(8, "acceptance-delays"));
    let cdf = |h: f64| d.iter().filter(|&&x| x <= h).count() as f64 / d.len() as f64;
    let (a, b) = (cdf(0.25), cdf(24.0));
    ensure!(
        (a - 0.2954).abs() <= 1e-3 && (b - 0.6050).abs() <= 1e-3,
        "CDF {a} {b}"
    );
    Ok(format!("1e5 delays: CDF(0.25h)={a:.4}, CDF(24h)={b:.4}"))
}

// ---------------------------------------------------------------- 9, 10

struct SeedResult {
    oracle: f64,
    dgdfem: f64,
    fnw: f64,
    r: f64,
}

fn run_seed(seed: u64) -> Result<SeedResult, String> {
    let err = |e: dgdf_core::Error| e.to_string();
    let cfg = RunConfig::drifted_preset(seed);
    let clicks = datagen::generate(&cfg.generator()).map_err(err)?;
    let (_, runs) = experiment::compare(
        &cfg,
        &clicks,
        &[Policy::Oracle, Policy::Dgdfem, Policy::Fnw],
        false,
    )
    .map_err(err)?;
    let auc_of = |p: Policy| {
        runs.iter()
            .find(|r| r.policy == p)
            .and_then(|r| r.mean_auc)
            .unwrap_or(f64::NAN)
    };
    let online = experiment::split_half(&clicks).map_err(err)?.online;
    let dg = runs
        .iter()
        .find(|r| r.policy == Policy::Dgdfem)
        .ok_or("missing DGDFEM run")?;
    let conv = experiment::conversion_events(
        online,
        cfg.pipeline.attribution_hours * dgdf_core::pipeline::SECONDS_PER_HOUR,
    );
    let series = experiment::case_study(&conv, &dg.filter_log, cfg.eval.case_study_window_hours)
        .map_err(err)?;
    Ok(SeedResult {
        oracle: auc_of(Policy::Oracle),
        dgdfem: auc_of(Policy::Dgdfem),
        fnw: auc_of(Policy::Fnw),
        r: two_pass_pearson(&series.cvr, &series.filter_weight),
    })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u32, title: &str, f: &dyn Fn() -> Outcome| {
        let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match out {
            Ok(msg) => println!("PASS  {n:>2} {title}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {n:>2} {title}: {msg}");
            }
        }
    };
    report(1, "debias identity", &criterion_1);
    report(2, "importance ratios", &criterion_2);
    report(3, "gradient integrity", &criterion_3);
    report(4, "HLGCN dense oracle", &criterion_4);
    report(5, "pipeline golden", &criterion_5);
    report(6, "graph invariants", &criterion_6);
    report(7, "metric oracles", &criterion_7);
    report(8, "delay calibration", &criterion_8);

    let start = Instant::now();
    let seeds: Result<Vec<SeedResult>, String> = (0..10)
        .map(|s| {
            let r = run_seed(s)?;
            println!(
                "      seed {s}: ORACLE {:.4}  DGDFEM {:.4}  FNW {:.4}  r {:+.3}",
                r.oracle, r.dgdfem, r.fnw, r.r
            );
            Ok(r)
        })
        .collect();
    let elapsed = start.elapsed();
    let seeds = seeds.map(std::rc::Rc::new);
    let c9 = {
        let seeds = seeds.clone();
        move || -> Outcome {
            let seeds = seeds.clone()?;
            ensure!(
                elapsed < Duration::from_secs(15 * 60),
                "took {:.0}s",
                elapsed.as_secs_f64()
            );
            let col = |f: fn(&SeedResult) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
            let (o, d, f) = (col(|s| s.oracle), col(|s| s.dgdfem), col(|s| s.fnw));
            let wins = seeds.iter().filter(|s| s.dgdfem - s.fnw > 0.0).count();
            ensure!(
                o >= d && d >= f,
                "medians ORACLE {o:.4} DGDFEM {d:.4} FNW {f:.4}"
            );
            ensure!(wins >= 7, "DGDFEM beat FNW in {wins}/10 seeds");
            Ok(format!(
                "medians ORACLE {o:.4} >= DGDFEM {d:.4} >= FNW {f:.4}, DGDFEM > FNW in {wins}/10, {:.0} s",
                elapsed.as_secs_f64()
            ))
        }
    };
    report(9, "policy ordering", &c9);
    let c10 = move || -> Outcome {
        let seeds = seeds.clone()?;
        let r: Vec<f64> = seeds.iter().map(|s| s.r).collect();
        // an undefined correlation counts as no correlation
        let r: Vec<f64> = r
            .iter()
            .map(|v| if v.is_finite() { *v } else { 0.0 })
            .collect();
        let m = median(&r);
        ensure!(m > 0.3, "median r {m:.3}");
        Ok(format!("median r {m:.3} over 10 seeds"))
    };
    report(10, "case-study direction", &c10);

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
