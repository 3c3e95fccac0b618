//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Each export returns a flat `Vec<f64>` of y-values for one curve; failures
//! surface as a JS exception carrying the error text.

use tamm_core::datagen::{generate, heldout_alignment, DatasetSpec, ShiftSetting, Split, TripletSet};
use tamm_core::losses::{contrastive_loss, LossConfig};
use tamm_core::numkit::{normalize_rows, Matrix};
use tamm_core::rng::{normal_vec, seeded};
use tamm_core::train::{Stage, TammModel, TrainConfig, Trainer};
use tamm_core::Result;
use wasm_bindgen::prelude::*;

/// Small enough to regenerate on every slider move.
pub fn demo_spec(seed: u64, shift: f64) -> DatasetSpec {
    DatasetSpec {
        classes: 12,
        heldout_classes: 4,
        samples_per_class: 40,
        eval_seen_per_class: 8,
        points: 16,
        shift: ShiftSetting::Fixed(shift),
        seed,
        ..DatasetSpec::default()
    }
}

fn pre_adapter_accuracy(set: &TripletSet) -> Result<f64> {
    heldout_alignment(&set.images, &set.texts, &set.indices(Split::EvalHeldout))
}

/// Held-out image-text accuracy before any adaptation, at `steps + 1` evenly
/// spaced shift strengths in [0, 1].
pub fn shift_curve(seed: u64, steps: usize) -> Result<Vec<f64>> {
    (0..=steps)
        .map(|i| pre_adapter_accuracy(&generate(&demo_spec(seed, i as f64 / steps.max(1) as f64))?))
        .collect()
}

/// Held-out accuracy after each epoch of image-adapter training, starting
/// with the untrained value.
pub fn realign_curve(seed: u64, shift: f64, epochs: usize) -> Result<Vec<f64>> {
    let set = generate(&demo_spec(seed, shift))?;
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: 1.min(epochs.saturating_sub(1)),
        batch_size: 32,
        base_lr: 2e-3,
        seed,
        ..TrainConfig::default()
    };
    let model = TammModel::init(cfg.model_dims(set.feature_dim()), seed)?;
    let mut t = Trainer::new(&set, model, Stage::Realign, cfg)?;
    t.run()?;
    Ok(t
        .take_metrics()
        .into_iter()
        .filter(|r| r.metric == "heldout_acc")
        .map(|r| r.value)
        .collect())
}

/// Contrastive loss of one batch of `n` noisy pairs at each temperature.
pub fn temperature_curve(seed: u64, n: usize, noise: f64, taus: &[f64]) -> Result<Vec<f64>> {
    let mut rng = seeded(seed, 0);
    let d = 16;
    let a: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|r| r.iter().zip(normal_vec(&mut rng, d)).map(|(x, e)| x + noise * e).collect())
        .collect();
    let a = normalize_rows(&Matrix::from_rows(&a)?)?.0;
    let b = normalize_rows(&Matrix::from_rows(&b)?)?.0;
    taus.iter()
        .map(|&tau| Ok(contrastive_loss(&a, &b, &LossConfig::new(tau)?)?.loss))
        .collect()
}

fn js(r: Result<Vec<f64>>) -> std::result::Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = shiftCurve)]
pub fn shift_curve_js(seed: u32, steps: u32) -> std::result::Result<Vec<f64>, JsError> {
    js(shift_curve(seed.into(), steps as usize))
}

#[wasm_bindgen(js_name = realignCurve)]
pub fn realign_curve_js(seed: u32, shift: f64, epochs: u32) -> std::result::Result<Vec<f64>, JsError> {
    js(realign_curve(seed.into(), shift, epochs as usize))
}

#[wasm_bindgen(js_name = temperatureCurve)]
pub fn temperature_curve_js(seed: u32, n: u32, noise: f64, taus: Vec<f64>) -> std::result::Result<Vec<f64>, JsError> {
    js(temperature_curve(seed.into(), n as usize, noise, &taus))
}
