#![allow(dead_code)]

use dgdf_core::pipeline::{ClickSample, Features, SECONDS_PER_HOUR};

pub const H: f64 = SECONDS_PER_HOUR;

/// Click with small fixed features; times in hours.
pub fn click(id: u64, user: u64, item: u64, click_h: f64, conv_h: Option<f64>) -> ClickSample {
    ClickSample {
        sample_id: id,
        user_id: user,
        item_id: item,
        click_time: click_h * H,
        conversion_time: conv_h.map(|c| c * H),
        user_features: Features::new(vec![user as f64 * 0.1, 1.0], vec![(user % 3) as u32]),
        item_features: Features::new(
            vec![item as f64 * 0.2, -1.0],
            vec![item as u32, (item % 2) as u32],
        ),
    }
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// 4-dimensional model, small enough for finite differences.
pub fn small_model_cfg() -> dgdf_core::model::ModelConfig {
    dgdf_core::model::ModelConfig {
        embed_dim: 4,
        reshape_side: 2,
        categorical_dim: 2,
        conv_kernel: [2, 2],
        conv_channels: 2,
        ..Default::default()
    }
}

pub fn build_model(
    cfg: dgdf_core::model::ModelConfig,
    clicks: &[ClickSample],
    seed: u64,
) -> (dgdf_core::model::Model, dgdf_core::tensor::ParamSet) {
    use dgdf_core::model::{FeatureSchema, Model, Vocabulary};
    let schema = FeatureSchema::of(&clicks[0]);
    let vocab = Vocabulary::build(&schema, clicks);
    Model::new(
        cfg,
        schema,
        vocab,
        &mut dgdf_core::rng::substream(seed, "init"),
    )
    .unwrap()
}
