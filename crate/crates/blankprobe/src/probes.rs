//! The probing experiments: expectation over random masks, progressive
//! non-overlapping filling, consistency scoring of the generated
//! prototypes, and the masking-parameter ablation sweep.

use crate::error::{Error, Result};
use crate::masking::{sample_uniform_mask, Mask, MaskSequence};
use crate::models::Model;
use crate::parallel::{map_indices, thread_cap};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::update::{
    bfgs_direction, compose_fill, first_order_update, threshold_t, UpdateField, UpdateOrder,
};

/// Whether per-sample updates are averaged raw or after complement-masking
/// by their own mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AverageStage {
    Raw,
    Masked,
}

impl AverageStage {
    pub fn label(&self) -> &'static str {
        match self {
            AverageStage::Raw => "raw",
            AverageStage::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Random,
    Progressive,
}

impl Mechanism {
    pub fn tag(&self) -> &'static str {
        match self {
            Mechanism::Random => "random",
            Mechanism::Progressive => "progressive",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    /// Masking ratio.
    pub eta: f64,
    /// Superpixel edge length.
    pub patch: usize,
    /// Mask sample budget N.
    pub samples: usize,
    /// Required correct-prediction count N*.
    pub min_correct: usize,
    /// First-order step scale.
    pub gamma: f32,
    pub order: UpdateOrder,
    pub binarize: bool,
    pub average_stage: AverageStage,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            eta: 0.25,
            patch: 2,
            samples: 4096,
            min_correct: 1024,
            gamma: 1e-2,
            order: UpdateOrder::First,
            binarize: true,
            average_stage: AverageStage::Raw,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// High-fidelity budget: push the accepted-sample requirement past
    /// ten thousand.
    pub fn paper_fidelity(mut self) -> Self {
        self.min_correct = 10_240;
        self.samples = self.samples.max(4 * self.min_correct);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Range(format!(
                "masking ratio must lie in (0,1), got {}",
                self.eta
            )));
        }
        if self.min_correct < 1 || self.samples < self.min_correct {
            return Err(Error::Config(format!(
                "need samples >= min_correct >= 1, got {} and {}",
                self.samples, self.min_correct
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Range(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// One masked draw handed to the update producer.
pub struct ProbeSample<'a> {
    pub index: usize,
    pub mask: &'a Mask,
    pub masked_image: &'a Tensor,
    pub label: usize,
}

/// Expectation-over-random-masks prototype for one image.
#[derive(Debug, Clone)]
pub struct PrototypeResult {
    pub image_id: usize,
    /// Ground-truth label y.
    pub label: usize,
    /// Label the consistency evaluation scores against; for the random
    /// mechanism acceptance forces this to equal `label`.
    pub predicted_label: usize,
    /// Mean accepted update, pre-threshold.
    pub mean_update: Tensor,
    /// `T(mean_update)` against the reference mask.
    pub thresholded_mean: Tensor,
    /// `M_ref(x) + T(mean_update)`.
    pub prototype: Tensor,
    pub reference_mask: Mask,
    /// N*.
    pub accepted: usize,
    pub rejected: usize,
    /// Samples visited before the budget or the acceptance target hit.
    pub drawn: usize,
}

fn default_update(
    model: &Model,
    sample: &ProbeSample<'_>,
    cfg: &ProbeConfig,
) -> Result<UpdateField> {
    match cfg.order {
        UpdateOrder::First => first_order_update(model, sample.masked_image, sample.label, cfg.gamma),
        UpdateOrder::Bfgs { iters } => {
            bfgs_direction(model, sample.masked_image, sample.label, iters)
        }
    }
}

/// [`random_mask_probe`] with an injectable update producer; the default
/// wires in the configured update order.
pub fn random_mask_probe_with<F>(
    model: &Model,
    image: &Tensor,
    label: usize,
    cfg: &ProbeConfig,
    update_fn: F,
) -> Result<PrototypeResult>
where
    F: Fn(&Model, &ProbeSample<'_>) -> Result<Tensor> + Sync,
{
    cfg.validate()?;
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension {
            context: "random_mask_probe image",
            expected: "trailing (H, W) axes".into(),
            found: format!("{shape:?}"),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);

    // Per-sample work is independent; samples are scanned in index order so
    // the accepted set and counts never depend on the thread cap.
    let chunk = if thread_cap() <= 1 {
        1
    } else {
        (thread_cap() * 32).min(256)
    };
    let mut acc = vec![0f64; image.len()];
    let mut accepted = 0usize;
    let mut drawn = 0usize;
    let mut start = 0usize;
    'outer: while start < cfg.samples {
        let len = chunk.min(cfg.samples - start);
        let results = map_indices(len, |j| -> Result<Option<Vec<f32>>> {
            let index = start + j;
            let mask = sample_uniform_mask(h, w, cfg.eta, cfg.patch, derive_seed(cfg.seed, "mask", index as u64))?;
            let masked = mask.apply(image)?;
            let predicted = model.predict_class(&masked)?;
            if predicted != label {
                return Ok(None);
            }
            let sample = ProbeSample {
                index,
                mask: &mask,
                masked_image: &masked,
                label,
            };
            let mut delta = update_fn(model, &sample)?;
            if cfg.average_stage == AverageStage::Masked {
                delta = mask.complement().apply(&delta)?;
            }
            Ok(Some(delta.into_data()))
        });
        for result in results {
            drawn += 1;
            if let Some(delta) = result? {
                for (a, v) in acc.iter_mut().zip(&delta) {
                    *a += *v as f64;
                }
                accepted += 1;
                if accepted == cfg.min_correct {
                    break 'outer;
                }
            }
        }
        start += len;
    }
    if accepted < cfg.min_correct {
        return Err(Error::InsufficientSignal {
            achieved: accepted,
            required: cfg.min_correct,
            drawn,
        });
    }

    let mean_update = Tensor::from_parts(
        shape.to_vec(),
        acc.iter().map(|&v| (v / accepted as f64) as f32).collect(),
    );
    let reference_mask = sample_uniform_mask(
        h,
        w,
        cfg.eta,
        cfg.patch,
        derive_seed(cfg.seed, "reference-mask", 0),
    )?;
    let mut field = UpdateField {
        raw: mean_update.clone(),
        order: cfg.order,
        gamma: cfg.gamma,
        mask: None,
        thresholded: None,
    };
    let thresholded_mean = threshold_t(&mut field, &reference_mask, cfg.binarize)?;
    let prototype = compose_fill(&reference_mask.apply(image)?, &thresholded_mean)?;
    Ok(PrototypeResult {
        image_id: 0,
        label,
        predicted_label: label,
        mean_update,
        thresholded_mean,
        prototype,
        reference_mask,
        accepted,
        rejected: drawn - accepted,
        drawn,
    })
}

/// Sample uniform masks until `min_correct` of them classify correctly (or
/// the budget runs out), average the accepted updates uniformly, and
/// threshold the mean against a reference mask.
pub fn random_mask_probe(
    model: &Model,
    image: &Tensor,
    label: usize,
    cfg: &ProbeConfig,
) -> Result<PrototypeResult> {
    random_mask_probe_with(model, image, label, cfg, |m, sample| {
        default_update(m, sample, cfg).map(|u| u.raw)
    })
}

/// One step of the progressive fill.
#[derive(Debug, Clone)]
pub struct ProgressiveStep {
    pub step: usize,
    /// Composite with the step's region hidden, as fed to the model.
    pub masked_input: Tensor,
    /// Composite after substituting the thresholded update.
    pub filled: Tensor,
    pub prediction: usize,
    pub prediction_correct: bool,
}

#[derive(Debug, Clone)]
pub struct ProgressiveResult {
    pub label: usize,
    /// Prediction for the first masked input; the consistency label.
    pub first_prediction: usize,
    pub steps: Vec<ProgressiveStep>,
    /// Composite after the final step: every pixel model-predicted.
    pub final_image: Tensor,
    /// Per-pixel provenance: 0 = original, i = replaced at step i (1-based).
    pub provenance: Vec<u8>,
}

/// Iteratively fill each region of a non-overlapping mask sequence,
/// conditioning every step on the previously predicted pixels. The loss
/// label is the ground-truth `label` at every step; per-step prediction
/// correctness is reported, never enforced.
pub fn progressive_probe(
    model: &Model,
    image: &Tensor,
    label: usize,
    seq: &MaskSequence,
    cfg: &ProbeConfig,
) -> Result<ProgressiveResult> {
    if seq.is_empty() {
        return Err(Error::Config("mask sequence is empty".into()));
    }
    let plane = seq.masks()[0].height() * seq.masks()[0].width();
    if seq.len() > u8::MAX as usize {
        return Err(Error::Config("mask sequence too long".into()));
    }
    let mut provenance = vec![0u8; image.len()];
    let mut current = image.clone();
    let mut steps = Vec::with_capacity(seq.len());
    let mut first_prediction = 0usize;
    for (i, mask) in seq.masks().iter().enumerate() {
        let masked_input = mask.apply(&current)?;
        let prediction = model.predict_class(&masked_input)?;
        if i == 0 {
            first_prediction = prediction;
        }
        let mut update = match cfg.order {
            UpdateOrder::First => first_order_update(model, &masked_input, label, cfg.gamma),
            UpdateOrder::Bfgs { iters } => bfgs_direction(model, &masked_input, label, iters),
        }
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {i}: {msg}")),
            other => other,
        })?;
        let thresholded = threshold_t(&mut update, mask, cfg.binarize)?;
        let filled = compose_fill(&masked_input, &thresholded)?;
        for (j, &kept) in mask.field().iter().enumerate() {
            if kept == 0 {
                for c in 0..image.len() / plane {
                    provenance[c * plane + j] = (i + 1) as u8;
                }
            }
        }
        steps.push(ProgressiveStep {
            step: i,
            masked_input,
            filled: filled.clone(),
            prediction,
            prediction_correct: prediction == label,
        });
        current = filled;
    }
    Ok(ProgressiveResult {
        label,
        first_prediction,
        final_image: current,
        steps,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Consistency metrics.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Percent.
    pub precision: f64,
    /// Percent.
    pub recall: f64,
    /// Percent.
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub mechanism: String,
    /// Percent.
    pub accuracy: f64,
    /// Percent, unweighted mean of per-class F1.
    pub macro_f1: f64,
    /// Percent, support-weighted mean of per-class F1.
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Summary row plus a per-class table; metrics at one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,accuracy,macro_f1,weighted_f1\n");
        out.push_str(&format!(
            "{},{:.1},{:.1},{:.1}\n\n",
            self.mechanism, self.accuracy, self.macro_f1, self.weighted_f1
        ));
        out.push_str("class,precision,recall,f1,support\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{:.1},{:.1},{:.1},{}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accuracy, macro-F1, and weighted-F1 (all percent) from a square
/// confusion matrix with rows = true class, columns = predicted class.
pub fn f1_scores(confusion: &[Vec<u64>]) -> Result<(f64, f64, f64, Vec<ClassMetrics>)> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|row| row.len() != k) {
        return Err(Error::Config("confusion matrix must be square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Config("confusion matrix is all zero".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut trace = 0u64;
    for c in 0..k {
        let tp = confusion[c][c];
        trace += tp;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: c,
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
            support: support as usize,
        });
    }
    let accuracy = 100.0 * trace as f64 / total as f64;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    let weighted_f1 = per_class
        .iter()
        .map(|c| c.f1 * c.support as f64)
        .sum::<f64>()
        / total as f64;
    Ok((accuracy, macro_f1, weighted_f1, per_class))
}

/// Classify every prototype with the model that generated it and score
/// against the prototypes' own labels.
pub fn consistency_eval(
    model: &Model,
    prototypes: &[(Tensor, usize)],
    mechanism: Mechanism,
) -> Result<MetricsReport> {
    if prototypes.is_empty() {
        return Err(Error::Config("consistency evaluation needs prototypes".into()));
    }
    let k = model.spec().classes;
    let predictions = map_indices(prototypes.len(), |i| model.predict_class(&prototypes[i].0));
    let mut confusion = vec![vec![0u64; k]; k];
    for ((_, want), got) in prototypes.iter().zip(predictions) {
        let got = got?;
        if *want >= k {
            return Err(Error::Index {
                context: "prototype label",
                index: *want,
                len: k,
            });
        }
        confusion[*want][got] += 1;
    }
    let (accuracy, macro_f1, weighted_f1, per_class) = f1_scores(&confusion)?;
    Ok(MetricsReport {
        mechanism: mechanism.tag().to_string(),
        accuracy,
        macro_f1,
        weighted_f1,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Ablation sweep.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub etas: Vec<f64>,
    pub patches: Vec<usize>,
    /// Row-major: cell (i, j) probes `etas[i]` with `patches[j]`.
    pub cells: Vec<PrototypeResult>,
}

impl AblationGrid {
    pub fn cell(&self, eta_idx: usize, patch_idx: usize) -> &PrototypeResult {
        &self.cells[eta_idx * self.patches.len() + patch_idx]
    }
}

/// One prototype per (eta, patch) combination; every cell reuses the same
/// root seed, so a single-cell sweep reproduces `random_mask_probe`
/// exactly.
pub fn ablation_sweep(
    model: &Model,
    image: &Tensor,
    label: usize,
    etas: &[f64],
    patches: &[usize],
    cfg: &ProbeConfig,
) -> Result<AblationGrid> {
    if etas.is_empty() || patches.is_empty() {
        return Err(Error::Config("ablation lists must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(etas.len() * patches.len());
    for &eta in etas {
        for &patch in patches {
            let cell_cfg = ProbeConfig {
                eta,
                patch,
                ..*cfg
            };
            cells.push(random_mask_probe(model, image, label, &cell_cfg)?);
        }
    }
    Ok(AblationGrid {
        etas: etas.to_vec(),
        patches: patches.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, Model, ModelSpec};
    use crate::rng::Rng;

    fn spec() -> ModelSpec {
        ModelSpec::new(Arch::SimpleCnn3, [1, 28, 28], 10).unwrap()
    }

    /// Constant-output model that always predicts `class` with zero input
    /// gradient everywhere.
    fn rigged_model(class: usize) -> Model {
        let mut model = Model::build(spec(), 0).unwrap();
        let mut params: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let k = 10;
        let mut bias = vec![0.0f32; k];
        bias[class] = 5.0;
        let last = params.len() - 1;
        params[last] = Tensor::new(vec![k], bias).unwrap();
        model.set_params(params).unwrap();
        model
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f32()).collect()).unwrap()
    }

    fn small_cfg() -> ProbeConfig {
        ProbeConfig {
            samples: 16,
            min_correct: 3,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn always_correct_zero_gradient_model_yields_masked_reference() {
        let model = rigged_model(4);
        let image = random_image(1);
        let result = random_mask_probe(&model, &image, 4, &small_cfg()).unwrap();
        assert!(result.mean_update.data().iter().all(|&v| v == 0.0));
        assert!(result.thresholded_mean.data().iter().all(|&v| v == 0.0));
        let reference = result.reference_mask.apply(&image).unwrap();
        assert_eq!(result.prototype.data(), reference.data());
        assert_eq!(result.accepted, 3);
        assert_eq!(result.rejected, 0);
    }

    #[test]
    fn stubbed_updates_average_exactly() {
        let model = rigged_model(7);
        let image = random_image(2);
        let stubs: Vec<Tensor> = (0..3)
            .map(|s| {
                let mut rng = Rng::new(900 + s);
                Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_range(-1.0, 1.0)).collect())
                    .unwrap()
            })
            .collect();
        let cfg = ProbeConfig {
            samples: 3,
            min_correct: 3,
            ..ProbeConfig::default()
        };
        let result = random_mask_probe_with(&model, &image, 7, &cfg, |_, sample| {
            Ok(stubs[sample.index].clone())
        })
        .unwrap();
        for i in 0..784 {
            let hand = ((stubs[0].data()[i] as f64
                + stubs[1].data()[i] as f64
                + stubs[2].data()[i] as f64)
                / 3.0) as f32;
            assert_eq!(result.mean_update.data()[i], hand, "pixel {i}");
        }
    }

    #[test]
    fn streaming_mean_matches_batch_mean() {
        let model = rigged_model(1);
        let image = random_image(3);
        let n = 17usize;
        let stubs: Vec<Tensor> = (0..n)
            .map(|s| {
                let mut rng = Rng::new(2000 + s as u64);
                Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_range(-2.0, 2.0)).collect())
                    .unwrap()
            })
            .collect();
        let cfg = ProbeConfig {
            samples: n,
            min_correct: n,
            ..ProbeConfig::default()
        };
        let result = random_mask_probe_with(&model, &image, 1, &cfg, |_, sample| {
            Ok(stubs[sample.index].clone())
        })
        .unwrap();
        for i in 0..784 {
            let batch: f64 = stubs.iter().map(|u| u.data()[i] as f64).sum::<f64>() / n as f64;
            assert_eq!(result.mean_update.data()[i], batch as f32);
        }
    }

    #[test]
    fn insufficient_signal_reports_achieved_count() {
        // Model predicts class 2; we probe for class 5.
        let model = rigged_model(2);
        let image = random_image(4);
        let err = random_mask_probe(&model, &image, 5, &small_cfg()).unwrap_err();
        match err {
            Error::InsufficientSignal {
                achieved,
                required,
                drawn,
            } => {
                assert_eq!(achieved, 0);
                assert_eq!(required, 3);
                assert_eq!(drawn, 16);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn acceptance_accounting_holds() {
        let model = Model::build(spec(), 5).unwrap();
        let image = random_image(5);
        // Untrained model: find its favorite class for this image family.
        let label = model.predict_class(&image).unwrap();
        let cfg = ProbeConfig {
            samples: 64,
            min_correct: 4,
            ..ProbeConfig::default()
        };
        match random_mask_probe(&model, &image, label, &cfg) {
            Ok(result) => {
                assert!(result.accepted <= result.drawn);
                assert!(result.drawn <= cfg.samples);
                assert_eq!(result.accepted + result.rejected, result.drawn);
                assert_eq!(result.accepted, cfg.min_correct);
                assert!(result
                    .prototype
                    .data()
                    .iter()
                    .all(|&v| (0.0..=1.0).contains(&v)));
            }
            Err(Error::InsufficientSignal {
                achieved, drawn, ..
            }) => {
                assert!(achieved < cfg.min_correct);
                assert_eq!(drawn, cfg.samples);
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn probe_is_deterministic_for_a_seed() {
        let model = rigged_model(3);
        let image = random_image(6);
        let a = random_mask_probe(&model, &image, 3, &small_cfg()).unwrap();
        let b = random_mask_probe(&model, &image, 3, &small_cfg()).unwrap();
        assert_eq!(a.prototype.data(), b.prototype.data());
        assert_eq!(a.reference_mask, b.reference_mask);
    }

    #[test]
    fn progressive_provenance_advances_by_quarter() {
        use crate::masking::make_progressive_sequence;
        let model = Model::build(spec(), 7).unwrap();
        let image = random_image(7);
        let seq = make_progressive_sequence(28, 28, 4, 2, 11).unwrap();
        let result = progressive_probe(&model, &image, 3, &seq, &ProbeConfig::default()).unwrap();
        assert_eq!(result.steps.len(), 4);
        // After step i (1-based), i*196 pixels carry predicted provenance.
        for (i, step) in result.steps.iter().enumerate() {
            let replaced = result
                .provenance
                .iter()
                .filter(|&&p| p != 0 && (p as usize) <= i + 1)
                .count();
            assert_eq!(replaced, (i + 1) * 196);
            // Pixels outside the union of masks processed so far are
            // bit-identical to the original.
            let mut outside_union = vec![true; 784];
            for mask in seq.masks().iter().take(i + 1) {
                for (j, &kept) in mask.field().iter().enumerate() {
                    if kept == 0 {
                        outside_union[j] = false;
                    }
                }
            }
            for j in 0..784 {
                if outside_union[j] {
                    assert_eq!(step.filled.data()[j], image.data()[j], "pixel {j} at step {i}");
                }
            }
        }
        assert!(result.provenance.iter().all(|&p| p != 0));
        assert_eq!(
            result.final_image.data(),
            result.steps.last().unwrap().filled.data()
        );
    }

    #[test]
    fn progressive_k1_fills_everything_from_blank_context() {
        use crate::masking::make_progressive_sequence;
        let model = Model::build(spec(), 8).unwrap();
        let image = random_image(8);
        let seq = make_progressive_sequence(28, 28, 1, 2, 3).unwrap();
        let result = progressive_probe(&model, &image, 0, &seq, &ProbeConfig::default()).unwrap();
        assert!(result.provenance.iter().all(|&p| p == 1));
        assert!(result.steps[0]
            .masked_input
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn f1_perfect_diagonal_scores_100() {
        let confusion = vec![
            vec![5, 0, 0],
            vec![0, 7, 0],
            vec![0, 0, 3],
        ];
        let (acc, macro_f1, weighted_f1, per_class) = f1_scores(&confusion).unwrap();
        assert_eq!(acc, 100.0);
        assert_eq!(macro_f1, 100.0);
        assert_eq!(weighted_f1, 100.0);
        assert!(per_class.iter().all(|c| c.f1 == 100.0));
    }

    #[test]
    fn f1_all_misclassified_class_scores_zero() {
        let confusion = vec![vec![0, 4], vec![0, 6]];
        let (acc, _, _, per_class) = f1_scores(&confusion).unwrap();
        assert_eq!(per_class[0].f1, 0.0);
        assert!((acc - 60.0).abs() < 1e-9);
    }

    #[test]
    fn f1_hand_computed_half_right() {
        // 2 right, 2 wrong across 2 classes.
        let confusion = vec![vec![1, 1], vec![1, 1]];
        let (acc, macro_f1, weighted_f1, _) = f1_scores(&confusion).unwrap();
        assert!((acc - 50.0).abs() < 1e-9);
        assert!((macro_f1 - 50.0).abs() < 1e-9);
        assert!((weighted_f1 - 50.0).abs() < 1e-9);
    }

    #[test]
    fn f1_matches_direct_recomputation_on_random_matrix() {
        let mut rng = Rng::new(33);
        for _ in 0..20 {
            let k = 3;
            let confusion: Vec<Vec<u64>> = (0..k)
                .map(|_| (0..k).map(|_| rng.next_below(20)).collect())
                .collect();
            if confusion.iter().flatten().sum::<u64>() == 0 {
                continue;
            }
            let (acc, macro_f1, weighted_f1, _) = f1_scores(&confusion).unwrap();
            // Independent scalar recomputation.
            let total: u64 = confusion.iter().flatten().sum();
            let mut f1s = Vec::new();
            let mut supports = Vec::new();
            for c in 0..k {
                let tp = confusion[c][c] as f64;
                let pred: u64 = (0..k).map(|r| confusion[r][c]).sum();
                let supp: u64 = confusion[c].iter().sum();
                let p = if pred > 0 { tp / pred as f64 } else { 0.0 };
                let r = if supp > 0 { tp / supp as f64 } else { 0.0 };
                f1s.push(if p + r > 0.0 { 200.0 * p * r / (p + r) } else { 0.0 });
                supports.push(supp as f64);
            }
            let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
            assert!((acc - 100.0 * trace as f64 / total as f64).abs() < 1e-9);
            assert!((macro_f1 - f1s.iter().sum::<f64>() / k as f64).abs() < 1e-9);
            let weighted: f64 =
                f1s.iter().zip(&supports).map(|(f, s)| f * s).sum::<f64>() / total as f64;
            assert!((weighted_f1 - weighted).abs() < 1e-9);
        }
    }

    #[test]
    fn f1_rejects_all_zero_matrix() {
        let confusion = vec![vec![0u64; 2]; 2];
        assert!(matches!(f1_scores(&confusion), Err(Error::Config(_))));
    }

    #[test]
    fn consistency_of_self_labeled_images_is_perfect() {
        let model = Model::build(spec(), 9).unwrap();
        let prototypes: Vec<(Tensor, usize)> = (0..12)
            .map(|i| {
                let image = random_image(100 + i);
                let label = model.predict_class(&image).unwrap();
                (image, label)
            })
            .collect();
        let report = consistency_eval(&model, &prototypes, Mechanism::Random).unwrap();
        assert_eq!(report.accuracy, 100.0);
        assert_eq!(report.mechanism, "random");
        let support: usize = report.per_class.iter().map(|c| c.support).sum();
        assert_eq!(support, 12);
    }

    #[test]
    fn consistency_rejects_empty_input() {
        let model = rigged_model(0);
        assert!(matches!(
            consistency_eval(&model, &[], Mechanism::Random),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_report_shape() {
        let confusion = vec![vec![2u64, 0], vec![0, 2]];
        let (accuracy, macro_f1, weighted_f1, per_class) = f1_scores(&confusion).unwrap();
        let report = MetricsReport {
            mechanism: "random".into(),
            accuracy,
            macro_f1,
            weighted_f1,
            per_class,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("mechanism,accuracy,macro_f1,weighted_f1\nrandom,100.0,100.0,100.0\n"));
        assert!(csv.contains("class,precision,recall,f1,support"));
        assert!(csv.contains("0,100.0,100.0,100.0,2"));
        let json = report.to_json();
        assert!(json.contains("\"mechanism\": \"random\""));
    }

    #[test]
    fn single_cell_sweep_equals_plain_probe() {
        let model = rigged_model(6);
        let image = random_image(10);
        let cfg = small_cfg();
        let grid = ablation_sweep(&model, &image, 6, &[0.25], &[2], &cfg).unwrap();
        assert_eq!(grid.cells.len(), 1);
        let direct = random_mask_probe(&model, &image, 6, &cfg).unwrap();
        assert_eq!(grid.cell(0, 0).prototype.data(), direct.prototype.data());
        assert_eq!(grid.cell(0, 0).drawn, direct.drawn);
    }

    #[test]
    fn sweep_grid_dimensions_match_lists() {
        let model = rigged_model(2);
        let image = random_image(11);
        let cfg = small_cfg();
        let grid =
            ablation_sweep(&model, &image, 2, &[0.1, 0.25, 0.5], &[2, 4], &cfg).unwrap();
        assert_eq!(grid.cells.len(), 6);
        assert_eq!(grid.cell(2, 1).reference_mask.patch(), 4);
        assert!(matches!(
            ablation_sweep(&model, &image, 2, &[], &[2], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn probe_config_validation() {
        let mut cfg = ProbeConfig::default();
        cfg.min_correct = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ProbeConfig::default();
        cfg.samples = 10;
        cfg.min_correct = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = ProbeConfig::default();
        cfg.eta = 1.0;
        assert!(cfg.validate().is_err());
        assert!(ProbeConfig::default().validate().is_ok());
        assert!(ProbeConfig::default().paper_fidelity().min_correct > 10_000);
    }
}
