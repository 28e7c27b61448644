//! Damped least-squares fit of a Gaussian `A * exp(-(x-c)^2 / (2 s^2)) + d`.
//!
//! Levenberg-style iteration: normal equations with an adaptive diagonal
//! damping term, at most [`FitOptions::max_iters`] iterations, converged when
//! the relative parameter change drops below [`FitOptions::rel_tol`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    pub offset: f64,
    pub residual_rms: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Fit the constant offset `d`; when false `d` is pinned to zero
    /// (histogram fits, where the baseline is an empty bin).
    pub fit_offset: bool,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fit_offset: true,
            max_iters: 200,
            rel_tol: 1e-9,
        }
    }
}

fn model(x: f64, p: &[f64; 4]) -> f64 {
    let u = (x - p[1]) / p[2];
    p[0] * (-0.5 * u * u).exp() + p[3]
}

fn sum_sq(xs: &[f64], ys: &[f64], p: &[f64; 4]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - model(x, p);
            r * r
        })
        .sum()
}

/// Solve a small symmetric linear system by Gaussian elimination with
/// partial pivoting. Returns None for a singular matrix.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

/// Data-driven starting point: peak position, peak-to-baseline amplitude,
/// and the RMS spread of the baseline-subtracted weights.
fn initial_guess(xs: &[f64], ys: &[f64], fit_offset: bool) -> [f64; 4] {
    let offset = if fit_offset {
        ys.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let (mut peak_x, mut peak_y) = (xs[0], ys[0]);
    for (&x, &y) in xs.iter().zip(ys) {
        if y > peak_y {
            peak_x = x;
            peak_y = y;
        }
    }
    let mut wsum = 0.0;
    let mut wss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let w = (y - offset).max(0.0);
        wsum += w;
        wss += w * (x - peak_x) * (x - peak_x);
    }
    let span = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - xs.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma = if wsum > 0.0 && wss > 0.0 {
        (wss / wsum).sqrt()
    } else {
        span / 4.0
    };
    [peak_y - offset, peak_x, sigma.max(span * 1e-6), offset]
}

pub fn fit_gaussian(xs: &[f64], ys: &[f64], opts: &FitOptions) -> Result<GaussianFit> {
    assert_eq!(xs.len(), ys.len());
    let n_params = if opts.fit_offset { 4 } else { 3 };
    if xs.len() < n_params + 1 {
        return Err(Error::TooFewSamples {
            need: n_params + 1,
            got: xs.len(),
        });
    }

    let mut p = initial_guess(xs, ys, opts.fit_offset);
    let mut lambda = 1e-3;
    let mut sse = sum_sq(xs, ys, &p);

    for iter in 1..=opts.max_iters {
        // Build J^T J and J^T r for the active parameters.
        let mut jtj = vec![vec![0.0; n_params]; n_params];
        let mut jtr = vec![0.0; n_params];
        for (&x, &y) in xs.iter().zip(ys) {
            let u = (x - p[1]) / p[2];
            let e = (-0.5 * u * u).exp();
            let r = y - (p[0] * e + p[3]);
            // d f / d [A, c, s, d]
            let grad = [e, p[0] * e * u / p[2], p[0] * e * u * u / p[2], 1.0];
            for i in 0..n_params {
                jtr[i] += grad[i] * r;
                for j in 0..n_params {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }

        let mut accepted = false;
        for _ in 0..24 {
            let mut damped = jtj.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(delta) = solve(damped, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p;
            for (i, d) in delta.iter().enumerate() {
                trial[i] += d;
            }
            if trial[2].abs() < 1e-300 || !trial.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let trial_sse = sum_sq(xs, ys, &trial);
            if trial_sse <= sse {
                let rel_change = delta
                    .iter()
                    .enumerate()
                    .map(|(i, d)| d.abs() / (p[i].abs() + 1e-12))
                    .fold(0.0, f64::max);
                p = trial;
                sse = trial_sse;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_change < opts.rel_tol {
                    return Ok(finish(p, sse, xs.len(), iter));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // Damping saturated without improvement: call it converged if
            // the gradient already vanished, else diverged.
            let grad_norm = jtr.iter().map(|g| g * g).sum::<f64>().sqrt();
            if grad_norm < 1e-12 * (1.0 + sse) {
                return Ok(finish(p, sse, xs.len(), iter));
            }
            return Err(Error::FitDiverged {
                max_iters: opts.max_iters,
            });
        }
    }
    Err(Error::FitDiverged {
        max_iters: opts.max_iters,
    })
}

fn finish(p: [f64; 4], sse: f64, n: usize, iterations: usize) -> GaussianFit {
    GaussianFit {
        amplitude: p[0],
        center: p[1],
        sigma: p[2].abs(),
        offset: p[3],
        residual_rms: (sse / n as f64).sqrt(),
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gaussian_samples(amp: f64, center: f64, sigma: f64, offset: f64) -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (-100..=100).map(|i| i as f64 * 10.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let u = (x - center) / sigma;
                amp * (-0.5 * u * u).exp() + offset
            })
            .collect();
        (xs, ys)
    }

    #[test]
    fn exact_gaussian_is_recovered_to_machine_noise() {
        let (xs, ys) = gaussian_samples(37.0, 120.0, 260.0, 4.0);
        let fit = fit_gaussian(&xs, &ys, &FitOptions::default()).unwrap();
        assert_relative_eq!(fit.amplitude, 37.0, max_relative = 1e-8);
        assert_relative_eq!(fit.center, 120.0, epsilon = 1e-6);
        assert_relative_eq!(fit.sigma, 260.0, max_relative = 1e-8);
        assert_relative_eq!(fit.offset, 4.0, max_relative = 1e-6);
        // Member of the model family: residual RMS far below the amplitude.
        assert!(fit.residual_rms < 1e-8 * fit.amplitude);
    }

    #[test]
    fn offset_can_be_pinned_to_zero() {
        let (xs, ys) = gaussian_samples(5.0, -40.0, 150.0, 0.0);
        let fit = fit_gaussian(
            &xs,
            &ys,
            &FitOptions {
                fit_offset: false,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(fit.offset, 0.0);
        assert_relative_eq!(fit.sigma, 150.0, max_relative = 1e-8);
    }

    #[test]
    fn noisy_gaussian_fit_is_close() {
        use rand::Rng;
        use rand::SeedableRng;
        let (xs, mut ys) = gaussian_samples(10.0, 0.0, 300.0, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for y in &mut ys {
            *y += rng.random_range(-0.05..0.05);
        }
        let fit = fit_gaussian(&xs, &ys, &FitOptions::default()).unwrap();
        assert_relative_eq!(fit.sigma, 300.0, max_relative = 0.02);
        assert_relative_eq!(fit.amplitude, 10.0, max_relative = 0.02);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.0, 1.0, 0.0];
        assert!(matches!(
            fit_gaussian(&xs, &ys, &FitOptions::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
