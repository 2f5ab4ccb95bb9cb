//! Variance-preserving SDE machinery: the linear noise schedule, the closed-form
//! perturbation kernel and fixed-grid reverse-time integrators.
//!
//! Forward process: `dx = -½ β(t) x dt + √β(t) dw` on `t ∈ [0, 1]`, with
//! `β(t) = β_min + (β_max − β_min) t` and signal coefficient
//! `ᾱ(t) = exp(−∫₀ᵗ β(u) du)`, so that `x(t) | x(0) ~ N(√ᾱ x(0), (1 − ᾱ) I)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::score::ScoreFunction;
use crate::vecops;

/// Linear β schedule of a VP-SDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    beta_min: f64,
    beta_max: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl Schedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(invalid(format!(
                "schedule requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        let s = Self { beta_min, beta_max };
        if s.alpha_bar(1.0) >= 1e-3 {
            return Err(invalid(format!(
                "schedule ({beta_min}, {beta_max}) leaves alpha_bar(1) = {} >= 1e-3",
                s.alpha_bar(1.0)
            )));
        }
        Ok(s)
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `∫₀ᵗ β(u) du`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        (-self.integrated_beta(t)).exp()
    }

    /// Integrating factor `μ(t) = exp(∫_{t'}^{t} ½ β(u) du)` of the probability-flow ODE
    /// started at `t'`. `μ(t') = 1` and `μ(0) = √ᾱ(t')`.
    pub fn integrating_factor(&self, t: f64, t_prime: f64) -> f64 {
        (0.5 * (self.integrated_beta(t) - self.integrated_beta(t_prime))).exp()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(invalid(format!("diffusion time {t} outside [0, 1]")))
    }
}

/// `√ᾱ(t) x0 + √(1 − ᾱ(t)) ε` for a caller-supplied `ε`.
pub fn perturb_with_noise(x0: &[f64], noise: &[f64], t: f64, schedule: &Schedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

/// Draws `x(t) ~ N(√ᾱ(t) x0, (1 − ᾱ(t)) I)`.
pub fn perturb<R: Rng + ?Sized>(
    x0: &[f64],
    t: f64,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_time(t)?;
    let noise = vecops::normal_vec(rng, x0.len());
    Ok(perturb_with_noise(x0, &noise, t, schedule))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Euler,
    Heun,
}

/// Fixed-grid reverse-time solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub method: Method,
    /// Integrate the reverse SDE instead of the probability-flow ODE.
    pub stochastic: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            method: Method::Euler,
            stochastic: false,
        }
    }
}

/// Reverse-time drift for a step of size `h > 0` taken backwards from `t`:
/// returns `-(dx/dt)`, i.e. the increment per unit of *decreasing* time.
fn backward_drift(
    score: &dyn ScoreFunction,
    schedule: &Schedule,
    stochastic: bool,
    x: &[f64],
    t: f64,
    buf: &mut [f64],
) {
    score.score_into(x, t, buf);
    let b = schedule.beta(t);
    if stochastic {
        for (o, xi) in buf.iter_mut().zip(x) {
            *o = 0.5 * b * xi + b * *o;
        }
    } else {
        for (o, xi) in buf.iter_mut().zip(x) {
            *o = 0.5 * b * (xi + *o);
        }
    }
}

/// Integrates from `t_start` down to `t_end` on a uniform grid of `cfg.n_steps` steps.
///
/// Deterministic mode solves the probability-flow ODE `dx = -½β(t)[x + s(x,t)] dt`;
/// stochastic mode solves the reverse SDE `dx = [-½β x − β s] dt + √β dw̄`.
pub fn integrate_reverse<R: Rng + ?Sized>(
    x_start: &[f64],
    t_start: f64,
    t_end: f64,
    score: &dyn ScoreFunction,
    cfg: &SolverConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    integrate_reverse_with(x_start, t_start, t_end, score, cfg, schedule, rng, |_, _| {})
}

/// [`integrate_reverse`] with a hook run after every step with the new time and state.
#[allow(clippy::too_many_arguments)]
pub fn integrate_reverse_with<R, F>(
    x_start: &[f64],
    t_start: f64,
    t_end: f64,
    score: &dyn ScoreFunction,
    cfg: &SolverConfig,
    schedule: &Schedule,
    rng: &mut R,
    mut after_step: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &mut [f64]),
{
    check_time(t_start)?;
    check_time(t_end)?;
    if t_end > t_start {
        return Err(invalid(format!(
            "reverse integration needs t_end <= t_start, got {t_end} > {t_start}"
        )));
    }
    if score.dim() != x_start.len() {
        return Err(invalid(format!(
            "score dimension {} does not match state dimension {}",
            score.dim(),
            x_start.len()
        )));
    }
    let mut x = x_start.to_vec();
    if cfg.n_steps == 0 || t_end == t_start {
        return Ok(x);
    }
    let d = x.len();
    let h = (t_start - t_end) / cfg.n_steps as f64;
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut noise = vec![0.0; d];

    for step in 0..cfg.n_steps {
        let t = t_start - step as f64 * h;
        let t_next = if step + 1 == cfg.n_steps {
            t_end
        } else {
            t_start - (step + 1) as f64 * h
        };
        backward_drift(score, schedule, cfg.stochastic, &x, t, &mut k1);
        if cfg.stochastic {
            vecops::fill_normal(rng, &mut noise);
        }
        let diffusion = if cfg.stochastic {
            (schedule.beta(t) * h).sqrt()
        } else {
            0.0
        };
        match cfg.method {
            Method::Euler => {
                for i in 0..d {
                    x[i] += h * k1[i] + diffusion * noise[i];
                }
            }
            Method::Heun => {
                for i in 0..d {
                    trial[i] = x[i] + h * k1[i] + diffusion * noise[i];
                }
                backward_drift(score, schedule, cfg.stochastic, &trial, t_next, &mut k2);
                for i in 0..d {
                    x[i] += 0.5 * h * (k1[i] + k2[i]) + diffusion * noise[i];
                }
            }
        }
        after_step(t_next, &mut x);
        if !vecops::all_finite(&x) {
            return Err(Error::IntegrationDiverged { step, t: t_next });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{FnScore, GaussianMixture};
    use crate::seed::rng_from_seed;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = Schedule::default();
        assert_eq!(s.beta(0.0), 0.1);
        assert_eq!(s.beta(1.0), 20.0);
        assert!((s.beta(0.5) - 10.05).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_reference_values() {
        let s = Schedule::default();
        assert_eq!(s.alpha_bar(0.0), 1.0);
        // exp(-(0.1 + 9.95)) and exp(-(0.05 + 2.4875))
        assert!((s.alpha_bar(1.0) - (-10.05f64).exp()).abs() < 1e-15);
        assert!((s.alpha_bar(1.0) - 4.3e-5).abs() < 1e-6);
        assert!((s.alpha_bar(0.5) - 0.0790).abs() < 1e-4);
    }

    #[test]
    fn alpha_bar_matches_quadrature_for_random_schedules() {
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let bmin = rng.random_range(0.01..1.0);
            let bmax = bmin + rng.random_range(14.0..30.0);
            let s = Schedule::new(bmin, bmax).unwrap();
            let t: f64 = rng.random_range(0.0..1.0);
            let integral = simpson(|u| s.beta(u), 0.0, t, 64);
            let expected = (-integral).exp();
            let rel = (s.alpha_bar(t) - expected).abs() / expected;
            assert!(rel < 1e-10, "rel err {rel}");
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = Schedule::default();
        let mut prev = s.alpha_bar(0.0);
        for i in 1..=1000 {
            let a = s.alpha_bar(i as f64 / 1000.0);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(0.0, 20.0).is_err());
        assert!(Schedule::new(5.0, 1.0).is_err());
        assert!(Schedule::new(0.1, 1.0).is_err(), "alpha_bar(1) too large");
        assert!(Schedule::new(0.1, 20.0).is_ok());
    }

    #[test]
    fn integrating_factor_values() {
        let s = Schedule::default();
        assert_eq!(s.integrating_factor(0.3, 0.3), 1.0);
        let mu0 = s.integrating_factor(0.0, 0.5);
        assert!((mu0 - s.alpha_bar(0.5).sqrt()).abs() < 1e-15);
        assert!((mu0 - 0.2811).abs() < 1e-4);
        let c = Schedule {
            beta_min: 3.0,
            beta_max: 3.0,
        };
        let v = c.integrating_factor(0.9, 0.2);
        assert!((v - (0.5f64 * 3.0 * 0.7).exp()).abs() < 1e-12);
    }

    #[test]
    fn perturb_identity_at_zero_and_noiseless_mean() {
        let s = Schedule::default();
        let mut rng = rng_from_seed(3);
        let x0 = vec![0.3, -1.2, 4.0];
        assert_eq!(perturb(&x0, 0.0, &s, &mut rng).unwrap(), x0);
        let zero = vec![0.0; 3];
        let m = perturb_with_noise(&x0, &zero, 0.37, &s);
        let a = s.alpha_bar(0.37).sqrt();
        for (mi, xi) in m.iter().zip(&x0) {
            assert_eq!(*mi, a * xi);
        }
        assert!(perturb(&x0, 1.5, &s, &mut rng).is_err());
    }

    #[test]
    fn perturb_of_origin_at_t1_has_unit_variance() {
        let s = Schedule::default();
        let mut rng = rng_from_seed(5);
        let d = 4;
        let n = 10_000;
        let mut sums = vec![0.0; d];
        for _ in 0..n {
            let x = perturb(&vec![0.0; d], 1.0, &s, &mut rng).unwrap();
            for (acc, v) in sums.iter_mut().zip(&x) {
                *acc += v * v;
            }
        }
        for v in sums {
            let var = v / n as f64;
            assert!((var - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = Schedule::default();
        let score = FnScore::new(2, |x: &[f64], _t, out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v * 3.0;
            }
        });
        let cfg = SolverConfig {
            n_steps: 0,
            ..Default::default()
        };
        let x = vec![1.0, 2.0];
        let out = integrate_reverse(&x, 0.8, 0.0, &score, &cfg, &s, &mut rng_from_seed(0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn standard_normal_data_is_stationary_under_pf_ode() {
        let s = Schedule::default();
        let data = GaussianMixture::single(vec![0.0; 3], 1.0).unwrap();
        let score = data.score_fn(s);
        let x = vec![0.7, -1.1, 2.5];
        for n in [1, 7, 100] {
            for method in [Method::Euler, Method::Heun] {
                let cfg = SolverConfig {
                    n_steps: n,
                    method,
                    stochastic: false,
                };
                let out =
                    integrate_reverse(&x, 1.0, 0.0, &score, &cfg, &s, &mut rng_from_seed(0))
                        .unwrap();
                for (a, b) in out.iter().zip(&x) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    fn wide_gaussian_run(n: usize) -> Vec<f64> {
        let s = Schedule::default();
        let data = GaussianMixture::single(vec![0.0; 2], 4.0).unwrap();
        let score = data.score_fn(s);
        let cfg = SolverConfig {
            n_steps: n,
            ..Default::default()
        };
        integrate_reverse(&[0.8, -0.5], 1.0, 0.0, &score, &cfg, &s, &mut rng_from_seed(0))
            .unwrap()
    }

    #[test]
    fn euler_grid_refinement_converges_at_first_order() {
        let reference = wide_gaussian_run(65_536);
        let err = |n| vecops::dist(&wide_gaussian_run(n), &reference);
        assert!(err(1024) < 1e-3, "err at 1024 steps = {}", err(1024));

        let ns = [64usize, 128, 256, 512, 1024];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| ((1.0 / n as f64).ln(), err(n).ln()))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((0.8..=1.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn heun_is_more_accurate_than_euler() {
        let s = Schedule::default();
        let data = GaussianMixture::single(vec![0.0; 2], 4.0).unwrap();
        let score = data.score_fn(s);
        let run = |n, method| {
            let cfg = SolverConfig {
                n_steps: n,
                method,
                stochastic: false,
            };
            integrate_reverse(&[0.8, -0.5], 1.0, 0.0, &score, &cfg, &s, &mut rng_from_seed(0))
                .unwrap()
        };
        let reference = run(20_000, Method::Heun);
        let e_euler = vecops::dist(&run(200, Method::Euler), &reference);
        let e_heun = vecops::dist(&run(200, Method::Heun), &reference);
        assert!(e_heun < e_euler / 10.0);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let s = Schedule::default();
        let score = FnScore::new(1, |_x: &[f64], t, out: &mut [f64]| {
            out[0] = if t < 0.5 { f64::NAN } else { 0.0 };
        });
        let cfg = SolverConfig {
            n_steps: 10,
            ..Default::default()
        };
        let err = integrate_reverse(&[1.0], 1.0, 0.0, &score, &cfg, &s, &mut rng_from_seed(0))
            .unwrap_err();
        match err {
            Error::IntegrationDiverged { step, .. } => assert_eq!(step, 6),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn reverse_sde_recovers_data_variance() {
        let s = Schedule::default();
        let data = GaussianMixture::single(vec![0.0], 4.0).unwrap();
        let score = data.score_fn(s);
        let cfg = SolverConfig {
            n_steps: 400,
            method: Method::Euler,
            stochastic: true,
        };
        let mut rng = rng_from_seed(21);
        let n = 2000;
        let mut acc = 0.0;
        for _ in 0..n {
            let start = vecops::normal_vec(&mut rng, 1);
            let x = integrate_reverse(&start, 1.0, 0.0, &score, &cfg, &s, &mut rng).unwrap();
            acc += x[0] * x[0];
        }
        let var = acc / n as f64;
        assert!((var - 4.0).abs() < 0.4, "variance {var}");
    }
}
