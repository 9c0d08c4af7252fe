//! Stress protocols for a trained detector: Gaussian weight perturbation
//! sweeps, input distortions, and prediction-score histograms.
//!
//! Everything here evaluates copies — the parameter store handed in is never
//! mutated — and every sweep is a pure function of its seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{
    evaluate, predictions_from_candidates, ClassSplit, EvalConfig, EvalImage, EvalReport, Metric,
};
use crate::model::{forward, image_tensor, DetectorConfig, ModelError};
use crate::ndtensor::{no_grad, ParamStore, Tensor, TensorError};
use crate::util::{stream_rng, Stream};
use crate::worldgen::Record;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("bad robustness spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// weight perturbation

/// A perturbation sweep: every listed noise level is tried `trials` times
/// with independent Gaussian draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    /// Noise standard deviations, non-negative and ascending.
    pub stds: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec { stds: vec![0.0, 0.001, 0.003, 0.01, 0.03], trials: 5, seed: 0 }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<(), RobustError> {
        if self.trials == 0 {
            return Err(RobustError::Spec("trials must be positive".into()));
        }
        if self.stds.is_empty() {
            return Err(RobustError::Spec("stds must name at least one level".into()));
        }
        if self.stds.iter().any(|&s| !(s >= 0.0)) {
            return Err(RobustError::Spec(format!("stds must be non-negative: {:?}", self.stds)));
        }
        if self.stds.windows(2).any(|w| w[0] > w[1]) {
            return Err(RobustError::Spec(format!("stds must be ascending: {:?}", self.stds)));
        }
        Ok(())
    }
}

/// One evaluated trial of one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbRow {
    pub std: f64,
    pub trial: usize,
    pub ar10_box: f64,
    pub ar10_mask: f64,
}

/// Copies `params` and adds iid Gaussian noise of the given std to every
/// value. The draw sequence is fixed by (seed, index), and the original
/// store is untouched.
pub fn perturb_params(
    params: &ParamStore,
    std: f64,
    seed: u64,
    index: u64,
) -> Result<ParamStore, RobustError> {
    let mut rng = stream_rng(seed, Stream::Perturbation, index);
    let mut out = params.deep_clone(false);
    let names: Vec<String> = out.names().map(str::to_string).collect();
    for name in names {
        let t = out.get(&name)?;
        let shape = t.shape().to_vec();
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        out.set(&name, Tensor::new(data, &shape)?)?;
    }
    Ok(out)
}

/// Runs the full sweep: for each (std, trial) the weights are independently
/// perturbed and AR@10 is measured on `records`.
pub fn perturb_eval(
    params: &ParamStore,
    det: &DetectorConfig,
    records: &[Record],
    spec: &PerturbSpec,
) -> Result<Vec<PerturbRow>, RobustError> {
    spec.validate()?;
    let cfg = EvalConfig { ks: vec![10] };
    let mut rows = Vec::with_capacity(spec.stds.len() * spec.trials);
    for (si, &std) in spec.stds.iter().enumerate() {
        for trial in 0..spec.trials {
            let index = (si * spec.trials + trial) as u64;
            let noisy = perturb_params(params, std, spec.seed, index)?;
            let report = evaluate(&eval_images(&noisy, det, records, None, 0)?, &cfg);
            rows.push(PerturbRow {
                std,
                trial,
                ar10_box: overall(&report, Metric::Box),
                ar10_mask: overall(&report, Metric::Mask),
            });
        }
    }
    Ok(rows)
}

fn overall(report: &EvalReport, metric: Metric) -> f64 {
    report
        .get(ClassSplit::All, metric, 10, "overall")
        .expect("records carry at least one annotated object")
}

/// `std,trial,ar10_box,ar10_mask` — one row per trial.
pub fn perturb_csv(rows: &[PerturbRow]) -> String {
    let mut csv = String::from("std,trial,ar10_box,ar10_mask\n");
    for r in rows {
        csv.push_str(&format!("{},{},{:.6},{:.6}\n", r.std, r.trial, r.ar10_box, r.ar10_mask));
    }
    csv
}

// ---------------------------------------------------------------------------
// input distortions

/// A pixel-space corruption of the natural view. All variants keep the image
/// in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distortion {
    /// x ← mean + c·(x − mean); c = 1 is the identity.
    Contrast { c: f64 },
    /// x ← x + N(0, σ²), clipped; σ = 0 is the identity.
    GaussianNoise { sigma: f64 },
    /// Pastes `patches` random 8×8 uniform-noise squares (local appearance
    /// corruption in the spirit of weather particles).
    Occlusion { patches: usize },
}

const OCCLUSION_PATCH: usize = 8;

impl Distortion {
    pub const CONTRAST_LEVELS: [f64; 3] = [0.6, 0.4, 0.2];
    pub const NOISE_SIGMAS: [f64; 3] = [0.05, 0.1, 0.2];
    pub const OCCLUSION_COUNTS: [usize; 3] = [2, 4, 8];

    /// The nine standard conditions, mildest first within each kind.
    pub fn ladder() -> Vec<Distortion> {
        let mut all = Vec::with_capacity(9);
        all.extend(Self::CONTRAST_LEVELS.iter().map(|&c| Distortion::Contrast { c }));
        all.extend(Self::NOISE_SIGMAS.iter().map(|&sigma| Distortion::GaussianNoise { sigma }));
        all.extend(Self::OCCLUSION_COUNTS.iter().map(|&patches| Distortion::Occlusion { patches }));
        all
    }

    /// Short condition name for tables, e.g. `contrast_0.4` or `occlude_8`.
    pub fn label(&self) -> String {
        match self {
            Distortion::Contrast { c } => format!("contrast_{c}"),
            Distortion::GaussianNoise { sigma } => format!("noise_{sigma}"),
            Distortion::Occlusion { patches } => format!("occlude_{patches}"),
        }
    }
}

/// Applies `d` to a `[0,1]` HWC image buffer.
pub fn distort(view: &[f32], d: Distortion, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = view.to_vec();
    match d {
        Distortion::Contrast { c } => {
            let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len().max(1) as f64;
            for v in &mut out {
                *v = (mean + c * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
            }
        }
        Distortion::GaussianNoise { sigma } => {
            for v in &mut out {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + sigma * noise).clamp(0.0, 1.0) as f32;
            }
        }
        Distortion::Occlusion { patches } => {
            let side = ((out.len() / 3) as f64).sqrt().round() as usize;
            assert_eq!(side * side * 3, out.len(), "occlusion expects a square HWC image");
            for _ in 0..patches {
                let y0 = rng.gen_range(0..=side - OCCLUSION_PATCH);
                let x0 = rng.gen_range(0..=side - OCCLUSION_PATCH);
                for y in y0..y0 + OCCLUSION_PATCH {
                    for x in x0..x0 + OCCLUSION_PATCH {
                        for ch in 0..3 {
                            out[(y * side + x) * 3 + ch] = rng.gen_range(0.0f64..1.0) as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forwards every record's (optionally distorted) natural view. Image `i`
/// distorts under the `(seed, i)` substream, so a condition is reproducible
/// record by record.
pub fn eval_images(
    params: &ParamStore,
    det: &DetectorConfig,
    records: &[Record],
    distortion: Option<Distortion>,
    seed: u64,
) -> Result<Vec<EvalImage>, RobustError> {
    let mut images = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let view = match distortion {
            None => record.views.natural.clone(),
            Some(d) => {
                distort(&record.views.natural, d, &mut stream_rng(seed, Stream::Distortion, i as u64))
            }
        };
        let image = image_tensor(&view, det)?;
        let out = no_grad(|| forward(det, params, &image))?;
        images.push(EvalImage {
            preds: predictions_from_candidates(&out.candidates(), det.image_size, det.image_size),
            gt: record.gt.clone(),
        });
    }
    Ok(images)
}

/// AR@10 per condition: the clean run first, then the whole distortion
/// ladder. Returns `(condition, ar10_box, ar10_mask)` rows.
pub fn distortion_table(
    params: &ParamStore,
    det: &DetectorConfig,
    records: &[Record],
    seed: u64,
) -> Result<Vec<(String, f64, f64)>, RobustError> {
    let cfg = EvalConfig { ks: vec![10] };
    let mut rows = Vec::new();
    let clean = evaluate(&eval_images(params, det, records, None, seed)?, &cfg);
    rows.push(("clean".to_string(), overall(&clean, Metric::Box), overall(&clean, Metric::Mask)));
    for d in Distortion::ladder() {
        let report = evaluate(&eval_images(params, det, records, Some(d), seed)?, &cfg);
        rows.push((d.label(), overall(&report, Metric::Box), overall(&report, Metric::Mask)));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// score distribution

pub const SCORE_BINS: usize = 50;
/// Scores pooled per image before binning.
pub const TOP_SCORES: usize = 50;

/// Pooled histogram of per-image top scores under one input condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreHistogram {
    pub condition: String,
    /// `SCORE_BINS` equal-width bins on [0, 1].
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

/// Collects each image's top-50 prediction scores (all of them when the
/// detector has fewer queries) and bins the pool on [0, 1].
pub fn score_distribution(
    params: &ParamStore,
    det: &DetectorConfig,
    records: &[Record],
    distortion: Option<Distortion>,
    seed: u64,
) -> Result<ScoreHistogram, RobustError> {
    let condition = distortion.map_or_else(|| "clean".to_string(), |d| d.label());
    let mut pool: Vec<f64> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let view = match distortion {
            None => record.views.natural.clone(),
            Some(d) => {
                distort(&record.views.natural, d, &mut stream_rng(seed, Stream::Distortion, i as u64))
            }
        };
        let image = image_tensor(&view, det)?;
        let out = no_grad(|| forward(det, params, &image))?;
        let mut scores = out.candidates().scores;
        scores.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
        scores.truncate(TOP_SCORES);
        pool.extend(scores);
    }

    let mut counts = vec![0usize; SCORE_BINS];
    for &s in &pool {
        let bin = ((s * SCORE_BINS as f64) as usize).min(SCORE_BINS - 1);
        counts[bin] += 1;
    }
    let n = pool.len().max(1) as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let variance = pool.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(ScoreHistogram { condition, counts, mean, variance })
}

/// `bin_lo,bin_hi,count,condition` — 50 rows per histogram.
pub fn scores_csv(histograms: &[ScoreHistogram]) -> String {
    let mut csv = String::from("bin_lo,bin_hi,count,condition\n");
    for h in histograms {
        for (i, &count) in h.counts.iter().enumerate() {
            let lo = i as f64 / SCORE_BINS as f64;
            let hi = (i + 1) as f64 / SCORE_BINS as f64;
            csv.push_str(&format!("{lo:.2},{hi:.2},{count},{}\n", h.condition));
        }
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::util::{stream_rng, Stream};
    use crate::worldgen::{gt_objects, render_views, sample_scene};

    fn tiny_detector() -> DetectorConfig {
        DetectorConfig {
            image_size: 64,
            patch: 16,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            num_queries: 6,
        }
    }

    fn sample_records(count: u64, seed: u64) -> Vec<Record> {
        (0..count)
            .map(|i| {
                let scene = sample_scene(&mut stream_rng(seed, Stream::SceneLayout, i));
                Record {
                    index: i as usize,
                    views: render_views(&scene, &mut stream_rng(seed, Stream::Stylize, i)),
                    gt: gt_objects(&scene),
                    proposals: vec![],
                }
            })
            .collect()
    }

    fn store_bits(store: &ParamStore) -> Vec<u64> {
        store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn identity_severities_leave_pixels_untouched() {
        let records = sample_records(1, 4);
        let view = &records[0].views.natural;
        let mut rng = stream_rng(0, Stream::Distortion, 0);
        assert_eq!(&distort(view, Distortion::Contrast { c: 1.0 }, &mut rng), view);
        assert_eq!(&distort(view, Distortion::GaussianNoise { sigma: 0.0 }, &mut rng), view);
    }

    #[test]
    fn distortions_stay_in_unit_range_and_are_deterministic() {
        let records = sample_records(1, 5);
        let view = &records[0].views.natural;
        for d in Distortion::ladder() {
            let a = distort(view, d, &mut stream_rng(7, Stream::Distortion, 0));
            let b = distort(view, d, &mut stream_rng(7, Stream::Distortion, 0));
            assert_eq!(a, b, "{} not deterministic", d.label());
            assert!(
                a.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{} left the unit range",
                d.label()
            );
        }
    }

    #[test]
    fn occlusion_changes_at_most_the_pasted_area() {
        let records = sample_records(1, 6);
        let view = &records[0].views.natural;
        for &patches in &Distortion::OCCLUSION_COUNTS {
            let out = distort(
                view,
                Distortion::Occlusion { patches },
                &mut stream_rng(3, Stream::Distortion, 1),
            );
            let changed = (0..64 * 64)
                .filter(|&p| (0..3).any(|ch| out[p * 3 + ch] != view[p * 3 + ch]))
                .count();
            assert!(
                changed <= patches * OCCLUSION_PATCH * OCCLUSION_PATCH,
                "{patches} patches changed {changed} pixels"
            );
            assert!(changed > 0, "occlusion changed nothing");
        }
    }

    #[test]
    fn zero_std_reproduces_the_clean_evaluation_and_mutates_nothing() {
        let det = tiny_detector();
        let params = init_params(&det, 1);
        let before = store_bits(&params);
        let records = sample_records(3, 8);

        let spec = PerturbSpec { stds: vec![0.0, 0.05], trials: 2, seed: 9 };
        let rows = perturb_eval(&params, &det, &records, &spec).unwrap();
        assert_eq!(rows.len(), 4);

        let clean = evaluate(
            &eval_images(&params, &det, &records, None, 0).unwrap(),
            &EvalConfig { ks: vec![10] },
        );
        for row in &rows[..2] {
            assert_eq!(row.ar10_box, overall(&clean, Metric::Box));
            assert_eq!(row.ar10_mask, overall(&clean, Metric::Mask));
        }
        assert_eq!(store_bits(&params), before, "perturb_eval mutated the original weights");

        // the sweep itself is reproducible
        let again = perturb_eval(&params, &det, &records, &spec).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn nonzero_std_actually_moves_the_copy() {
        let det = tiny_detector();
        let params = init_params(&det, 2);
        let noisy = perturb_params(&params, 0.01, 4, 0).unwrap();
        assert_ne!(store_bits(&params), store_bits(&noisy));
        // distinct trial indices draw distinct noise
        let other = perturb_params(&params, 0.01, 4, 1).unwrap();
        assert_ne!(store_bits(&noisy), store_bits(&other));
    }

    #[test]
    fn spec_validation_rejects_malformed_sweeps() {
        let ok = PerturbSpec::default();
        ok.validate().unwrap();
        assert!(PerturbSpec { trials: 0, ..ok.clone() }.validate().is_err());
        assert!(PerturbSpec { stds: vec![], ..ok.clone() }.validate().is_err());
        assert!(PerturbSpec { stds: vec![-0.1], ..ok.clone() }.validate().is_err());
        assert!(PerturbSpec { stds: vec![0.01, 0.001], ..ok }.validate().is_err());
    }

    #[test]
    fn zeroed_weights_give_a_single_score_bin() {
        let det = tiny_detector();
        let mut params = init_params(&det, 0);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let shape = params.get(&name).unwrap().shape().to_vec();
            let numel: usize = shape.iter().product();
            params
                .set(&name, Tensor::new(vec![0.0; numel], &shape).unwrap())
                .unwrap();
        }
        let records = sample_records(2, 10);
        let hist = score_distribution(&params, &det, &records, None, 0).unwrap();
        assert_eq!(hist.condition, "clean");
        // sigmoid(0) = 0.5 falls in bin 25 of 50
        assert_eq!(hist.counts.iter().sum::<usize>(), 2 * det.num_queries);
        assert_eq!(hist.counts[25], 2 * det.num_queries);
        assert_eq!(hist.mean, 0.5);
        assert_eq!(hist.variance, 0.0);
    }

    #[test]
    fn score_csv_covers_every_bin_once_per_condition() {
        let det = tiny_detector();
        let params = init_params(&det, 3);
        let records = sample_records(2, 11);
        let clean = score_distribution(&params, &det, &records, None, 0).unwrap();
        let noisy = score_distribution(
            &params,
            &det,
            &records,
            Some(Distortion::GaussianNoise { sigma: 0.2 }),
            0,
        )
        .unwrap();
        let csv = scores_csv(&[clean.clone(), noisy]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count,condition");
        assert_eq!(lines.len(), 1 + 2 * SCORE_BINS);
        assert_eq!(lines[1].split(',').next(), Some("0.00"));
        assert!(lines[1].ends_with(",clean"));
        assert!(lines[SCORE_BINS + 1].ends_with(",noise_0.2"));

        // determinism across calls
        let again = score_distribution(&params, &det, &records, None, 0).unwrap();
        assert_eq!(clean, again);
    }

    #[test]
    fn distortion_table_lists_clean_plus_the_ladder() {
        let det = tiny_detector();
        let params = init_params(&det, 5);
        let records = sample_records(2, 12);
        let table = distortion_table(&params, &det, &records, 1).unwrap();
        assert_eq!(table.len(), 1 + 9);
        assert_eq!(table[0].0, "clean");
        let labels: Vec<&str> = table.iter().map(|(l, _, _)| l.as_str()).collect();
        assert!(labels.contains(&"contrast_0.2"));
        assert!(labels.contains(&"noise_0.1"));
        assert!(labels.contains(&"occlude_8"));
        for (label, b, m) in &table {
            assert!((0.0..=1.0).contains(b) && (0.0..=1.0).contains(m), "{label} out of range");
        }
    }
}
