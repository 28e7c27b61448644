//! Localization-accuracy evaluation of trained models.
//!
//! The headline accuracy is the width of the residual distribution
//! `dz_pred - dz_test` on the test split, estimated both by a Gaussian fit
//! to the residual histogram (Freedman-Diaconis binning, far outliers
//! excluded from the fit only) and by a robust percentile spread that keeps
//! every residual. The offset sweep repeats the full build/train/evaluate
//! cycle per plane offset on shared stacks so offsets compare paired.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::{child_seed, RunConfig};
use crate::error::{Error, Result};
use crate::gaussfit::{fit_gaussian, FitOptions};
use crate::nn::train::{train, Trained};
use crate::nn::{batch_input, Model};
use crate::pairs::{build_pairs, split_dataset, PairDataset, Split};
use crate::reference::ReferenceZ;
use crate::sim::ZStack;
use crate::stats;

/// Predicted-versus-reference defocus for one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub dz_test_nm: f64,
    pub dz_pred_nm: f64,
    pub residual_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub rows: Vec<ResidualRow>,
}

impl Residuals {
    pub fn residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.residual_nm).collect()
    }
}

/// Run the model over one split of a dataset; predictions rescaled to nm.
pub fn predict_dataset(
    model: &mut Model<f32>,
    ds: &PairDataset,
    split: Split,
) -> Result<Residuals> {
    let indices = ds.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (mean, std) = (model.spec.input_mean, model.spec.input_std);
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let x = batch_input::<f32>(ds, chunk, mean, std);
        let preds = model.predict_nm(x)?;
        for (&idx, pred) in chunk.iter().zip(preds) {
            let dz_test = f64::from(ds.samples[idx].dz_label_nm);
            rows.push(ResidualRow {
                dz_test_nm: dz_test,
                dz_pred_nm: pred,
                residual_nm: pred - dz_test,
            });
        }
    }
    Ok(Residuals { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyMethod {
    GaussianFit,
    SampleStd,
}

/// Width, bias, and standard error of a residual distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub sigma_loc_nm: f64,
    pub stderr_nm: f64,
    pub bias_nm: f64,
    /// Robust percentile width, always reported alongside the headline value.
    pub sigma_robust_nm: f64,
    /// Residuals beyond five robust sigma, excluded from the Gaussian fit
    /// only (they stay in the robust estimate).
    pub n_outliers_excluded: usize,
    /// Set when the Gaussian fit was requested but fell back to the robust
    /// estimate.
    pub fit_warning: bool,
}

/// Freedman-Diaconis histogram: `(bin centers, counts)`.
fn fd_histogram(xs: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = xs.len();
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
    let width = 2.0 * iqr / (n as f64).cbrt();
    if !(width > 0.0) {
        return None;
    }
    let lo = sorted[0];
    let hi = sorted[n - 1];
    let nbins = (((hi - lo) / width).ceil() as usize).clamp(5, 400);
    let width = (hi - lo) / nbins as f64;
    if !(width > 0.0) {
        return None;
    }
    let mut counts = vec![0.0; nbins];
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(nbins - 1);
        counts[b] += 1.0;
    }
    let centers = (0..nbins)
        .map(|b| lo + (b as f64 + 0.5) * width)
        .collect();
    Some((centers, counts))
}

/// Estimate the residual width. At least 30 residuals are required.
pub fn accuracy(res: &Residuals, method: AccuracyMethod) -> Result<Accuracy> {
    let values = res.residuals();
    if values.len() < 30 {
        return Err(Error::TooFewSamples {
            need: 30,
            got: values.len(),
        });
    }
    let bias = stats::mean(&values);
    let sigma_robust = stats::robust_sigma(&values);
    let center = stats::median(&values);

    let stderr_for = |sigma: f64, n: usize| sigma / (2.0 * (n as f64 - 1.0)).sqrt();

    let robust = Accuracy {
        sigma_loc_nm: sigma_robust,
        stderr_nm: stderr_for(sigma_robust, values.len()),
        bias_nm: bias,
        sigma_robust_nm: sigma_robust,
        n_outliers_excluded: 0,
        fit_warning: false,
    };
    match method {
        AccuracyMethod::SampleStd => Ok(robust),
        AccuracyMethod::GaussianFit => {
            let cut = 5.0 * sigma_robust;
            let kept: Vec<f64> = values
                .iter()
                .copied()
                .filter(|v| (v - center).abs() <= cut || cut == 0.0)
                .collect();
            let n_outliers = values.len() - kept.len();
            let fitted = fd_histogram(&kept).and_then(|(centers, counts)| {
                fit_gaussian(
                    &centers,
                    &counts,
                    &FitOptions {
                        fit_offset: false,
                        ..FitOptions::default()
                    },
                )
                .ok()
            });
            match fitted {
                Some(fit) if fit.sigma.is_finite() && fit.sigma > 0.0 => Ok(Accuracy {
                    sigma_loc_nm: fit.sigma,
                    stderr_nm: stderr_for(fit.sigma, kept.len()),
                    bias_nm: bias,
                    sigma_robust_nm: sigma_robust,
                    n_outliers_excluded: n_outliers,
                    fit_warning: false,
                }),
                // Degenerate histogram or diverged fit: robust value with a
                // warning flag.
                _ => Ok(Accuracy {
                    n_outliers_excluded: n_outliers,
                    fit_warning: true,
                    ..robust
                }),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropBin {
    pub center_nm: f64,
    pub mean_pred_nm: f64,
    pub n: usize,
}

/// Binned mean prediction versus reference defocus, plus a linear fit over
/// the raw pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionalityTable {
    pub bins: Vec<PropBin>,
    pub slope: f64,
    pub intercept: f64,
}

pub fn proportionality_table(res: &Residuals, n_bins: usize) -> Result<ProportionalityTable> {
    if res.rows.len() < 100 {
        return Err(Error::TooFewSamples {
            need: 100,
            got: res.rows.len(),
        });
    }
    let xs: Vec<f64> = res.rows.iter().map(|r| r.dz_test_nm).collect();
    let ys: Vec<f64> = res.rows.iter().map(|r| r.dz_pred_nm).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let width = span / n_bins as f64;

    let mut sums = vec![(0.0f64, 0usize); n_bins];
    for (&x, &y) in xs.iter().zip(&ys) {
        let b = (((x - lo) / width) as usize).min(n_bins - 1);
        sums[b].0 += y;
        sums[b].1 += 1;
    }
    let bins = sums
        .iter()
        .enumerate()
        .filter(|&(_, &(_, n))| n > 0)
        .map(|(b, &(sum, n))| PropBin {
            center_nm: lo + (b as f64 + 0.5) * width,
            mean_pred_nm: sum / n as f64,
            n,
        })
        .collect();
    let (slope, intercept) = stats::linear_fit(&xs, &ys);
    Ok(ProportionalityTable {
        bins,
        slope,
        intercept,
    })
}

/// Lag (nm) of the first local maximum in the autocorrelation of the binned
/// mean residuals; the acquisition grid shows up here as a peak near the
/// z-step.
pub fn periodicity_lag_nm(res: &Residuals, n_bins: usize) -> Option<f64> {
    let table = proportionality_table(res, n_bins).ok()?;
    if table.bins.len() < 12 {
        return None;
    }
    let mean_residuals: Vec<f64> = table
        .bins
        .iter()
        .map(|b| b.mean_pred_nm - b.center_nm)
        .collect();
    let bin_width = table.bins[1].center_nm - table.bins[0].center_nm;
    let ac = stats::autocorrelation(&mean_residuals, mean_residuals.len() / 2);
    for lag in 2..ac.len().saturating_sub(1) {
        if ac[lag] > ac[lag - 1] && ac[lag] >= ac[lag + 1] && ac[lag] > 0.0 {
            return Some(lag as f64 * bin_width);
        }
    }
    None
}

/// Accuracy and comparison numbers for one trained offset cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub delta_nm: f64,
    pub n_pairs_total: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub sigma_loc_nm: f64,
    pub sigma_stderr_nm: f64,
    pub bias_nm: f64,
    pub sigma_robust_nm: f64,
    pub n_outliers_excluded: usize,
    pub fit_warning: bool,
    pub sigma_single_baseline_nm: f64,
    pub improvement_factor: f64,
    pub slope: f64,
    pub intercept: f64,
    pub periodicity_lag_nm: Option<f64>,
    pub config_hash: String,
}

/// Everything one offset cycle produces.
pub struct CycleOutput {
    pub report: EvalReport,
    pub residuals: Residuals,
    pub proportionality: ProportionalityTable,
    pub trained: Trained,
    pub dataset: PairDataset,
    /// Pairs kept and rejected per particle, for the build log.
    pub build_counts: Vec<(u64, usize, usize)>,
}

/// Evaluate a trained model on a dataset's test split and assemble a report.
pub fn evaluate(
    model: &mut Model<f32>,
    ds: &PairDataset,
    baseline_sigma_nm: f64,
    n_bins: usize,
    config_hash: &str,
) -> Result<(EvalReport, Residuals, ProportionalityTable)> {
    let residuals = predict_dataset(model, ds, Split::Test)?;
    let acc = accuracy(&residuals, AccuracyMethod::GaussianFit)?;
    let prop = proportionality_table(&residuals, n_bins)?;
    let report = EvalReport {
        delta_nm: f64::from(ds.delta_nm),
        n_pairs_total: ds.len(),
        n_train: ds.count(Split::Train),
        n_test: ds.count(Split::Test),
        sigma_loc_nm: acc.sigma_loc_nm,
        sigma_stderr_nm: acc.stderr_nm,
        bias_nm: acc.bias_nm,
        sigma_robust_nm: acc.sigma_robust_nm,
        n_outliers_excluded: acc.n_outliers_excluded,
        fit_warning: acc.fit_warning,
        sigma_single_baseline_nm: baseline_sigma_nm,
        improvement_factor: baseline_sigma_nm / acc.sigma_loc_nm,
        slope: prop.slope,
        intercept: prop.intercept,
        periodicity_lag_nm: periodicity_lag_nm(&residuals, n_bins),
        config_hash: config_hash.to_string(),
    };
    Ok((report, residuals, prop))
}

/// Build, split, train, and evaluate one offset on a shared stack corpus.
pub fn run_offset_cycle(
    stacks: &[ZStack],
    refs: &[ReferenceZ],
    baseline_sigma_nm: f64,
    delta_nm: f64,
    rc: &RunConfig,
    split_seed: u64,
    train_seed: u64,
) -> Result<CycleOutput> {
    let optics = rc.optics();
    let by_id: HashMap<u64, &ReferenceZ> = refs.iter().map(|r| (r.particle_id, r)).collect();

    let mut samples = Vec::new();
    let mut build_counts = Vec::new();
    for stack in stacks {
        if !stack.usable {
            continue;
        }
        let Some(reference) = by_id.get(&stack.particle.id) else {
            continue;
        };
        let pairs = build_pairs(stack, reference, delta_nm, &optics)?;
        let candidates = stack
            .frames
            .len()
            .saturating_sub((delta_nm / optics.z_step_nm).round() as usize);
        build_counts.push((stack.particle.id, pairs.len(), candidates - pairs.len()));
        samples.extend(pairs);
    }

    let dataset = split_dataset(
        samples,
        delta_nm as f32,
        optics.crop_px,
        optics.pixel_size_nm as f32,
        rc.train_fraction,
        split_seed,
    )?;

    let trained = train(&dataset, &rc.train(train_seed))?;
    let mut trained = trained;
    let (report, residuals, proportionality) = evaluate(
        &mut trained.model,
        &dataset,
        baseline_sigma_nm,
        rc.proportionality_bins,
        &rc.hash(),
    )?;
    Ok(CycleOutput {
        report,
        residuals,
        proportionality,
        trained,
        dataset,
        build_counts,
    })
}

/// One full cycle per offset on shared stacks and seeds, sorted by offset.
pub fn offset_sweep(
    stacks: &[ZStack],
    refs: &[ReferenceZ],
    baseline_sigma_nm: f64,
    rc: &RunConfig,
    sweep_seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut deltas = rc.deltas_nm.clone();
    deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite deltas"));
    let mut reports = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let cycle = run_offset_cycle(
            stacks,
            refs,
            baseline_sigma_nm,
            delta,
            rc,
            child_seed(sweep_seed, 2 * k as u64),
            child_seed(sweep_seed, 2 * k as u64 + 1),
        )?;
        reports.push(cycle.report);
    }
    Ok(reports)
}

/// Per-offset aggregation over paired seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta_nm: f64,
    pub n_test_pairs: usize,
    pub sigma_nm: f64,
    pub stderr_nm: f64,
    pub bias_nm: f64,
}

pub const VERDICT_RESOLVED: &str = "optimum at middle offset";
pub const VERDICT_NOT_RESOLVED: &str = "optimum not resolved";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub per_cycle: Vec<EvalReport>,
    pub optimum_resolved: bool,
    pub verdict: String,
}

/// Aggregate per-cycle reports (multiple seeds per offset) and decide
/// whether the middle offset is the accuracy optimum within combined
/// standard errors.
pub fn summarize_sweep(per_cycle: Vec<EvalReport>) -> SweepSummary {
    let mut by_delta: HashMap<i64, Vec<&EvalReport>> = HashMap::new();
    for r in &per_cycle {
        by_delta.entry(r.delta_nm.round() as i64).or_default().push(r);
    }
    let mut keys: Vec<i64> = by_delta.keys().copied().collect();
    keys.sort_unstable();

    let rows: Vec<SweepRow> = keys
        .iter()
        .map(|k| {
            let group = &by_delta[k];
            let n = group.len() as f64;
            let sigma = group.iter().map(|r| r.sigma_loc_nm).sum::<f64>() / n;
            let bias = group.iter().map(|r| r.bias_nm).sum::<f64>() / n;
            let se = group
                .iter()
                .map(|r| r.sigma_stderr_nm * r.sigma_stderr_nm)
                .sum::<f64>()
                .sqrt()
                / n;
            SweepRow {
                delta_nm: *k as f64,
                n_test_pairs: group.iter().map(|r| r.n_test).sum(),
                sigma_nm: sigma,
                stderr_nm: se,
                bias_nm: bias,
            }
        })
        .collect();

    let (optimum_resolved, verdict) = if rows.len() < 3 {
        (false, VERDICT_NOT_RESOLVED.to_string())
    } else {
        let mid = &rows[rows.len() / 2];
        let resolved = rows.iter().all(|other| {
            let combined = (mid.stderr_nm * mid.stderr_nm + other.stderr_nm * other.stderr_nm)
                .sqrt();
            mid.sigma_nm <= other.sigma_nm + combined
        });
        if resolved {
            (true, VERDICT_RESOLVED.to_string())
        } else {
            (false, VERDICT_NOT_RESOLVED.to_string())
        }
    };

    SweepSummary {
        rows,
        per_cycle,
        optimum_resolved,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn rows_from(residuals: &[f64]) -> Residuals {
        Residuals {
            rows: residuals
                .iter()
                .enumerate()
                .map(|(i, &r)| ResidualRow {
                    dz_test_nm: i as f64,
                    dz_pred_nm: i as f64 + r,
                    residual_nm: r,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_residuals_mean_zero_width_and_bias() {
        let res = rows_from(&vec![0.0; 50]);
        let acc = accuracy(&res, AccuracyMethod::SampleStd).unwrap();
        assert_eq!(acc.sigma_loc_nm, 0.0);
        assert_eq!(acc.bias_nm, 0.0);
    }

    #[test]
    fn unit_normal_width_is_recovered_by_both_methods() {
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let res = rows_from(&draws);
        let robust = accuracy(&res, AccuracyMethod::SampleStd).unwrap();
        assert_relative_eq!(robust.sigma_loc_nm, 1.0, epsilon = 0.01);
        let fit = accuracy(&res, AccuracyMethod::GaussianFit).unwrap();
        assert!(!fit.fit_warning);
        assert_relative_eq!(fit.sigma_loc_nm, 1.0, epsilon = 0.01);
        assert!(fit.bias_nm.abs() < 0.01);
        // Standard error is sigma / sqrt(2 (n - 1)).
        assert_relative_eq!(
            robust.stderr_nm,
            robust.sigma_loc_nm / (2.0f64 * 99_999.0).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn translation_moves_bias_and_sign_flip_keeps_width() {
        let normal = rand_distr::Normal::new(0.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..5_000).map(|_| normal.sample(&mut rng)).collect();
        let base = accuracy(&rows_from(&draws), AccuracyMethod::SampleStd).unwrap();

        let shifted: Vec<f64> = draws.iter().map(|v| v + 13.5).collect();
        let acc = accuracy(&rows_from(&shifted), AccuracyMethod::SampleStd).unwrap();
        assert_relative_eq!(acc.bias_nm, base.bias_nm + 13.5, epsilon = 1e-9);
        assert_relative_eq!(acc.sigma_loc_nm, base.sigma_loc_nm, epsilon = 1e-9);

        let flipped: Vec<f64> = draws.iter().map(|v| -v).collect();
        let acc = accuracy(&rows_from(&flipped), AccuracyMethod::SampleStd).unwrap();
        assert_relative_eq!(acc.sigma_loc_nm, base.sigma_loc_nm, epsilon = 1e-9);
    }

    #[test]
    fn outliers_leave_the_fit_but_stay_in_the_robust_estimate() {
        let normal = rand_distr::Normal::new(0.0, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draws: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        for k in 0..40 {
            draws.push(500.0 + k as f64);
        }
        let acc = accuracy(&rows_from(&draws), AccuracyMethod::GaussianFit).unwrap();
        assert_eq!(acc.n_outliers_excluded, 40);
        assert_relative_eq!(acc.sigma_loc_nm, 5.0, max_relative = 0.05);
    }

    #[test]
    fn degenerate_residuals_fall_back_with_a_warning() {
        let res = rows_from(&vec![3.0; 40]);
        let acc = accuracy(&res, AccuracyMethod::GaussianFit).unwrap();
        assert!(acc.fit_warning);
        assert_eq!(acc.sigma_loc_nm, 0.0);
        assert_relative_eq!(acc.bias_nm, 3.0);
    }

    #[test]
    fn too_few_residuals_is_rejected() {
        let res = rows_from(&vec![0.0; 29]);
        assert!(matches!(
            accuracy(&res, AccuracyMethod::SampleStd),
            Err(Error::TooFewSamples { need: 30, got: 29 })
        ));
    }

    fn synthetic_predictions(f: impl Fn(f64) -> f64, n: usize) -> Residuals {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        Residuals {
            rows: (0..n)
                .map(|_| {
                    let dz = rng.random_range(-1000.0..1000.0);
                    let pred = f(dz);
                    ResidualRow {
                        dz_test_nm: dz,
                        dz_pred_nm: pred,
                        residual_nm: pred - dz,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_model_has_unit_slope() {
        let res = synthetic_predictions(|dz| dz, 2_000);
        let table = proportionality_table(&res, 50).unwrap();
        assert_relative_eq!(table.slope, 1.0, epsilon = 1e-9);
        assert!(table.intercept.abs() < 1e-6);
        for bin in &table.bins {
            assert_relative_eq!(bin.mean_pred_nm, bin.center_nm, epsilon = 25.0);
        }
    }

    #[test]
    fn constant_model_has_zero_slope() {
        let res = synthetic_predictions(|_| 42.0, 500);
        let table = proportionality_table(&res, 50).unwrap();
        assert!(table.slope.abs() < 1e-9);
        assert_relative_eq!(table.intercept, 42.0, epsilon = 1e-9);
    }

    #[test]
    fn proportionality_needs_a_hundred_rows() {
        let res = synthetic_predictions(|dz| dz, 99);
        assert!(matches!(
            proportionality_table(&res, 50),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn grid_periodicity_shows_up_in_binned_residual_autocorrelation() {
        // A 250 nm periodic artifact on top of a proportional response.
        let res = synthetic_predictions(
            |dz| dz + 30.0 * (2.0 * std::f64::consts::PI * dz / 250.0).sin(),
            20_000,
        );
        let lag = periodicity_lag_nm(&res, 50).expect("periodic signal detected");
        assert!(
            (lag - 250.0).abs() <= 40.0,
            "autocorrelation peak at {lag} nm, expected near 250"
        );
    }

    #[test]
    fn eval_report_round_trips_through_json() {
        let report = EvalReport {
            delta_nm: 500.0,
            n_pairs_total: 4200,
            n_train: 3360,
            n_test: 840,
            sigma_loc_nm: 41.25,
            sigma_stderr_nm: 1.01,
            bias_nm: -0.7,
            sigma_robust_nm: 43.9,
            n_outliers_excluded: 3,
            fit_warning: false,
            sigma_single_baseline_nm: 255.0,
            improvement_factor: 255.0 / 41.25,
            slope: 0.97,
            intercept: 2.5,
            periodicity_lag_nm: Some(250.0),
            config_hash: "0123456789abcdef".into(),
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn sweep_verdict_requires_middle_offset_to_win_within_errors() {
        let report = |delta: f64, sigma: f64, se: f64| EvalReport {
            delta_nm: delta,
            n_pairs_total: 100,
            n_train: 80,
            n_test: 20,
            sigma_loc_nm: sigma,
            sigma_stderr_nm: se,
            bias_nm: 0.0,
            sigma_robust_nm: sigma,
            n_outliers_excluded: 0,
            fit_warning: false,
            sigma_single_baseline_nm: 250.0,
            improvement_factor: 250.0 / sigma,
            slope: 1.0,
            intercept: 0.0,
            periodicity_lag_nm: None,
            config_hash: String::new(),
        };

        // Clear optimum at 500.
        let summary = summarize_sweep(vec![
            report(250.0, 48.0, 0.7),
            report(500.0, 40.0, 0.5),
            report(750.0, 44.0, 0.7),
        ]);
        assert!(summary.optimum_resolved);
        assert_eq!(summary.verdict, VERDICT_RESOLVED);
        assert_eq!(summary.rows.len(), 3);
        assert_eq!(summary.rows[1].delta_nm, 500.0);

        // Middle offset loses beyond combined errors: flagged, not forced.
        let summary = summarize_sweep(vec![
            report(250.0, 40.0, 0.5),
            report(500.0, 48.0, 0.5),
            report(750.0, 44.0, 0.5),
        ]);
        assert!(!summary.optimum_resolved);
        assert_eq!(summary.verdict, VERDICT_NOT_RESOLVED);

        // Within combined errors still counts as resolved.
        let summary = summarize_sweep(vec![
            report(250.0, 41.0, 1.0),
            report(500.0, 41.5, 1.0),
            report(750.0, 44.0, 1.0),
        ]);
        assert!(summary.optimum_resolved);

        // Multi-seed aggregation averages sigmas and combines errors.
        let summary = summarize_sweep(vec![
            report(250.0, 48.0, 0.6),
            report(250.0, 50.0, 0.8),
            report(500.0, 40.0, 0.5),
            report(500.0, 42.0, 0.5),
            report(750.0, 44.0, 0.7),
            report(750.0, 45.0, 0.7),
        ]);
        assert_relative_eq!(summary.rows[0].sigma_nm, 49.0);
        assert_relative_eq!(summary.rows[1].sigma_nm, 41.0);
        let expected_se = (0.5f64.powi(2) + 0.5f64.powi(2)).sqrt() / 2.0;
        assert_relative_eq!(summary.rows[1].stderr_nm, expected_se, epsilon = 1e-12);
        assert_eq!(summary.rows[1].n_test_pairs, 40);
    }
}
