mod common;

use common::H;
use dgdf_core::datagen::{
    calibrate_delay_mixture, generate, ingest_csv, presets, sample_delays, summarize, write_csv,
    DelayMixture, DelayTarget, Drift, GeneratorConfig,
};
use dgdf_core::pipeline::{classify, PipelineConfig, Policy, SampleClass};
use dgdf_core::rng::substream;
use dgdf_core::Error;

fn cfg(n: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_clicks: n,
        seed,
        ..GeneratorConfig::default()
    }
}

fn csv_bytes(c: &GeneratorConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, &generate(c).unwrap()).unwrap();
    buf
}

#[test]
fn empirical_cvr_matches_base_rate() {
    for seed in [0, 1] {
        let s = generate(&cfg(100_000, seed)).unwrap();
        let sum = summarize(&s, [0.25, 24.0]);
        assert_eq!(sum.n_clicks, 100_000);
        assert!(
            (sum.cvr - 0.1).abs() <= 0.01,
            "seed {seed}: cvr {}",
            sum.cvr
        );
    }
}

#[test]
fn generated_delays_hit_calibration_points() {
    let s = generate(&cfg(100_000, 5)).unwrap();
    let [(_, a), (_, b)] = summarize(&s, [0.25, 24.0]).delay_quantiles;
    // ~1e4 conversions; the stratified sampler keeps the CDF error tiny
    assert!((a - 0.2954).abs() < 1e-3, "{a}");
    assert!((b - 0.6050).abs() < 1e-3, "{b}");
}

#[test]
fn stratified_delays_at_1e5() {
    let mix = calibrate_delay_mixture(presets::CRITEO2[0], presets::CRITEO2[1]).unwrap();
    let d = sample_delays(&mix, 100_000, &mut substream(0, "delays"));
    let cdf = |h: f64| d.iter().filter(|&&x| x <= h).count() as f64 / d.len() as f64;
    assert!((cdf(0.25) - 0.2954).abs() < 1e-3);
    assert!((cdf(24.0) - 0.6050).abs() < 1e-3);
}

#[test]
fn calibration_reproduces_targets() {
    for [t1, t2] in [presets::CRITEO2, presets::TENCENT] {
        let m = calibrate_delay_mixture(t1, t2).unwrap();
        m.validate().unwrap();
        // direct evaluation of the mixture CDF
        let f = |t: f64| {
            m.weight * (1.0 - (-m.rates[0] * t).exp())
                + (1.0 - m.weight) * (1.0 - (-m.rates[1] * t).exp())
        };
        assert!((f(t1.hours) - t1.cdf).abs() < 1e-4);
        assert!((f(t2.hours) - t2.cdf).abs() < 1e-4);
    }
}

#[test]
fn pure_exponential_targets_collapse_to_one_component() {
    let lambda: f64 = 0.3;
    let f = |t: f64| 1.0 - (-lambda * t).exp();
    let m = calibrate_delay_mixture(
        DelayTarget {
            hours: 1.0,
            cdf: f(1.0),
        },
        DelayTarget {
            hours: 5.0,
            cdf: f(5.0),
        },
    )
    .unwrap();
    for t in [0.5, 1.0, 5.0, 20.0] {
        assert!((m.cdf(t) - f(t)).abs() < 1e-6, "t={t}");
    }
}

#[test]
fn infeasible_targets_are_diagnosed() {
    // lighter tail than any single exponential through the first point
    let err = calibrate_delay_mixture(
        DelayTarget {
            hours: 1.0,
            cdf: 0.5,
        },
        DelayTarget {
            hours: 2.0,
            cdf: 0.9,
        },
    )
    .unwrap_err();
    match err {
        Error::Config(msg) => assert!(msg.contains("exponential"), "{msg}"),
        e => panic!("{e}"),
    }
    assert!(calibrate_delay_mixture(
        DelayTarget {
            hours: 2.0,
            cdf: 0.5
        },
        DelayTarget {
            hours: 1.0,
            cdf: 0.6
        }
    )
    .is_err());
}

#[test]
fn quantile_inverts_cdf() {
    let m = DelayMixture {
        weight: 0.4,
        rates: [5.0, 0.01],
    };
    for u in [0.01, 0.3, 0.5, 0.9, 0.999] {
        assert!((m.cdf(m.quantile(u)) - u).abs() < 1e-9);
    }
}

#[test]
fn same_seed_same_bytes() {
    let c = cfg(2000, 9);
    assert_eq!(csv_bytes(&c), csv_bytes(&c));
    assert_ne!(csv_bytes(&c), csv_bytes(&cfg(2000, 10)));
}

#[test]
fn csv_round_trip() {
    let s = generate(&cfg(3000, 1)).unwrap();
    assert!(s.windows(2).all(|w| w[0].click_time <= w[1].click_time));
    let mut buf = Vec::new();
    write_csv(&mut buf, &s).unwrap();
    let back = ingest_csv(buf.as_slice()).unwrap();
    assert_eq!(back, s);
    assert!(back.iter().any(|c| c.conversion_time.is_none()));
}

fn log(rows: &str) -> String {
    format!("sample_id,user_id,item_id,click_ts,conversion_ts,uf_0,if_0,uc_0,ic_0\n{rows}")
}

#[test]
fn ingest_handles_absent_conversion() {
    let s = ingest_csv(log("0,1,2,10,,0.5,0.1,3,4\n1,1,3,11,20,0.5,0.2,3,5\n").as_bytes()).unwrap();
    assert_eq!(s[0].conversion_time, None);
    assert_eq!(s[1].conversion_time, Some(20.0));
    assert_eq!(s[1].item_features.categorical, vec![5]);
}

#[test]
fn ingest_rejects_conversion_before_click_with_line() {
    let err =
        ingest_csv(log("0,1,2,10,,0.5,0.1,3,4\n1,1,3,11,5,0.5,0.2,3,5\n").as_bytes()).unwrap_err();
    match err {
        Error::Data { line, msg } => {
            assert_eq!(line, 3);
            assert!(msg.contains("precedes"), "{msg}");
        }
        e => panic!("{e}"),
    }
}

#[test]
fn ingest_rejects_malformed_and_unsorted_rows() {
    let err = ingest_csv(log("0,1,2,abc,,0.5,0.1,3,4\n").as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Data { line: 2, .. }), "{err}");
    let err =
        ingest_csv(log("0,1,2,10,,0.5,0.1,3,4\n1,1,2,9,,0.5,0.1,3,4\n").as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Unsorted(_)), "{err}");
}

/// Hourly CVR by click hour; with no drift it only carries sampling noise.
fn hourly_cvr_spread(drift: Option<Drift>) -> f64 {
    let c = GeneratorConfig {
        n_clicks: 60_000,
        duration_hours: 48.0,
        drift,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let s = generate(&c).unwrap();
    let mut n = [0f64; 48];
    let mut k = [0f64; 48];
    for c in &s {
        let h = ((c.click_time / H) as usize).min(47);
        n[h] += 1.0;
        k[h] += f64::from(u8::from(c.conversion_time.is_some()));
    }
    let rates: Vec<f64> = n.iter().zip(&k).map(|(n, k)| k / n).collect();
    let mean = rates.iter().sum::<f64>() / 48.0;
    (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 48.0).sqrt()
}

#[test]
fn drift_moves_hourly_cvr() {
    let flat = hourly_cvr_spread(None);
    let binomial_sd = (0.1f64 * 0.9 / 1250.0).sqrt();
    assert!(flat < 2.0 * binomial_sd, "flat spread {flat}");
    let drifting = hourly_cvr_spread(Some(Drift {
        amplitude: 1.0,
        ..Drift::default()
    }));
    assert!(drifting > 2.0 * flat, "{drifting} vs {flat}");
}

#[test]
fn class_shares_move_monotonically_with_window() {
    let s = generate(&cfg(20_000, 2)).unwrap();
    let mut prev = (0usize, usize::MAX);
    for lw in [0.05, 0.25, 1.0, 6.0, 24.0] {
        let pc = PipelineConfig::from_hours(lw, 24.0, Policy::Dgdfem).unwrap();
        let count = |k: SampleClass| s.iter().filter(|c| classify(c, &pc) == k).count();
        let (pos, fake) = (
            count(SampleClass::Positive),
            count(SampleClass::FakeNegative),
        );
        assert!(pos >= prev.0 && fake <= prev.1, "l_w={lw}");
        prev = (pos, fake);
    }
    assert_eq!(prev.1, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        GeneratorConfig {
            base_cvr: 1.0,
            ..cfg(10, 0)
        },
        GeneratorConfig {
            n_users: 0,
            ..cfg(10, 0)
        },
        GeneratorConfig {
            delay_mixture: DelayMixture {
                weight: 1.2,
                rates: [1.0, 1.0],
            },
            ..cfg(10, 0)
        },
    ] {
        assert!(matches!(generate(&c), Err(Error::Config(_))));
    }
}
