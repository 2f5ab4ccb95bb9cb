//! Numerical checks of forward-diffusion KL contraction and of SDEdit deviation bounds.
//!
//! Deviation bounds are evaluated in two forms. The consistent form is derived with
//! `ᾱ(t) = exp(−∫₀ᵗ β)` and the integrating factor `μ(t) = exp(∫_{t'}^t β/2)`, which
//! gives `μ(0) = √ᾱ(t')` and
//!
//! ```text
//! x̂(0) − x = √((1−ᾱ)/ᾱ) ε + (1/√ᾱ) ∫₀^{t'} ½β μ s dt,
//! E‖x̂(0) − x‖ ≤ √((1−ᾱ)/ᾱ) √d + C (1−√ᾱ)/√ᾱ.
//! ```
//!
//! The published form `(1−√ᾱ)(η + C/ᾱ) + √(1−ᾱ)√d/√ᾱ` is computed alongside for
//! comparison only.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::memory::{condition_distance, ConditionRecord, ConditionWeights};
use crate::score::{ClippedScore, ConditionalScoreModel, GaussianMixture, ScoreFunction, ShiftedScore};
use crate::sde::{integrate_reverse, perturb_with_noise, Schedule, SolverConfig};
use crate::seed::{rng_from_seed, stream_rng, Stream};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub t: f64,
    pub kl: f64,
    /// Monte-Carlo standard error; zero for closed-form values.
    pub se: f64,
}

fn single_gaussian_kl(p: &GaussianMixture, q: &GaussianMixture, t: f64, s: &Schedule) -> f64 {
    let (p, q) = (p.diffused(t, s), q.diffused(t, s));
    let (pc, qc) = (&p.components()[0], &q.components()[0]);
    let d = pc.mean.len() as f64;
    let ratio = pc.variance / qc.variance;
    0.5 * (d * ratio + vecops::sq_dist(&pc.mean, &qc.mean) / qc.variance - d - d * ratio.ln())
}

/// `KL(p_t ‖ q_t)` over `t_grid`. Closed form when both are single Gaussians; otherwise
/// Monte Carlo with `mc_samples` draws, reusing the same base draws at every `t`.
pub fn kl_curve(
    p: &GaussianMixture,
    q: &GaussianMixture,
    t_grid: &[f64],
    s: &Schedule,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<KlPoint>> {
    if p.dim() != q.dim() {
        return Err(invalid("KL needs distributions of equal dimension"));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(invalid("t grid must be sorted and inside [0, 1]"));
    }
    if p.is_single() && q.is_single() {
        return Ok(t_grid
            .iter()
            .map(|&t| KlPoint {
                t,
                kl: single_gaussian_kl(p, q, t, s),
                se: 0.0,
            })
            .collect());
    }
    if mc_samples < 2 {
        return Err(invalid("Monte-Carlo KL needs at least two samples"));
    }
    let mut rng = rng_from_seed(seed);
    let base: Vec<(Vec<f64>, Vec<f64>)> = (0..mc_samples)
        .map(|_| (p.sample(&mut rng), vecops::normal_vec(&mut rng, p.dim())))
        .collect();
    Ok(t_grid
        .iter()
        .map(|&t| {
            let (pt, qt) = (p.diffused(t, s), q.diffused(t, s));
            let terms: Vec<f64> = base
                .iter()
                .map(|(x0, e)| {
                    let x = perturb_with_noise(x0, e, t, s);
                    pt.log_density(&x) - qt.log_density(&x)
                })
                .collect();
            let (kl, se) = vecops::mean_and_se(&terms);
            KlPoint { t, kl, se }
        })
        .collect())
}

/// `true` if every step rises by at most `k` combined standard errors.
pub fn is_non_increasing(curve: &[KlPoint], k: f64) -> bool {
    curve
        .windows(2)
        .all(|w| w[1].kl - w[0].kl <= k * w[0].se.hypot(w[1].se))
}

/// `√((1−ᾱ)/ᾱ) √d + C (1−√ᾱ)/√ᾱ`.
pub fn consistent_bound(alpha_bar: f64, d: usize, c: f64) -> f64 {
    let a = alpha_bar.sqrt();
    ((1.0 - alpha_bar) / alpha_bar).sqrt() * (d as f64).sqrt() + c * (1.0 - a) / a
}

/// The published unconditional form `(1−√ᾱ)(η + C/ᾱ) + √(1−ᾱ)√d/√ᾱ`.
pub fn published_bound(alpha_bar: f64, d: usize, eta: f64, c: f64) -> f64 {
    let a = alpha_bar.sqrt();
    (1.0 - a) * (eta + c / alpha_bar) + (1.0 - alpha_bar).sqrt() * (d as f64).sqrt() / a
}

/// Extra term of the consistent conditional bound: `K d(y,ỹ) (1−√ᾱ)/√ᾱ`.
pub fn consistent_conditional_term(alpha_bar: f64, k: f64, dist: f64) -> f64 {
    let a = alpha_bar.sqrt();
    k * dist * (1.0 - a) / a
}

/// Published conditional form as stated: `(1−√ᾱ)(η + C/ᾱ + K ᾱ d) + √(1−ᾱ)√d/√ᾱ`.
pub fn published_conditional_stated(alpha_bar: f64, d: usize, eta: f64, c: f64, k: f64, dist: f64) -> f64 {
    published_bound(alpha_bar, d, eta, c) + (1.0 - alpha_bar.sqrt()) * k * alpha_bar * dist
}

/// Published conditional form as derived in its proof: adds `K (1−√ᾱ)/ᾱ d`.
pub fn published_conditional_derived(alpha_bar: f64, d: usize, eta: f64, c: f64, k: f64, dist: f64) -> f64 {
    published_bound(alpha_bar, d, eta, c) + k * (1.0 - alpha_bar.sqrt()) / alpha_bar * dist
}

/// `E‖x‖` estimated from `n` samples.
pub fn estimate_eta(data: &GaussianMixture, n: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let norms: Vec<f64> = (0..n).map(|_| vecops::norm(&data.sample(&mut rng))).collect();
    vecops::mean(&norms)
}

/// 99th percentile of `‖∇ log p_t(x)‖` over `t ~ U(0, 1]`, `x ~ p_t`.
pub fn default_clip(data: &GaussianMixture, s: &Schedule, n: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut norms: Vec<f64> = (0..n)
        .map(|_| {
            let t = 1.0 - rng.random::<f64>();
            let x0 = data.sample(&mut rng);
            let e = vecops::normal_vec(&mut rng, data.dim());
            let x = perturb_with_noise(&x0, &e, t, s);
            vecops::norm(&data.score_fn(*s).score(&x, t))
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    norms[((n as f64 * 0.99).ceil() as usize).clamp(1, n) - 1]
}

/// Constants used by a bound check and how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c: f64,
    pub c_method: String,
    pub eta: f64,
    pub eta_method: String,
    pub d: usize,
    pub k: f64,
    pub condition_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t_prime: f64,
    pub alpha_bar: f64,
    pub trials: usize,
    pub mean_deviation: f64,
    pub se: f64,
    pub consistent_bound: f64,
    pub published_bound: f64,
    /// Only for conditional rows: the published statement form.
    pub published_stated_bound: Option<f64>,
}

impl BoundRow {
    pub fn passes_consistent(&self) -> bool {
        self.mean_deviation <= self.consistent_bound
    }

    pub fn passes_published(&self) -> bool {
        self.mean_deviation <= self.published_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn all_consistent_pass(&self) -> bool {
        self.rows.iter().all(BoundRow::passes_consistent)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t_prime,alpha_bar,trials,mean_deviation,se,consistent_bound,consistent_pass,published_bound,published_pass,published_stated_bound\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t_prime,
                r.alpha_bar,
                r.trials,
                r.mean_deviation,
                r.se,
                r.consistent_bound,
                r.passes_consistent(),
                r.published_bound,
                r.passes_published(),
                r.published_stated_bound.map_or(String::new(), |v| v.to_string())
            )
            .ok();
        }
        out
    }

    pub fn summary(&self) -> String {
        let c = &self.constants;
        let mut out = format!(
            "C = {:.4} ({}), eta = {:.4} ({}), d = {}, K = {}, d(y,y~) = {}\n",
            c.c, c.c_method, c.eta, c.eta_method, c.d, c.k, c.condition_distance
        );
        writeln!(
            out,
            "{:>6} {:>10} {:>12} {:>12} {:>6} {:>12} {:>6}",
            "t'", "alpha_bar", "mean dev", "consistent", "pass", "published", "pass"
        )
        .ok();
        for r in &self.rows {
            writeln!(
                out,
                "{:>6.2} {:>10.4} {:>12.4} {:>12.4} {:>6} {:>12.4} {:>6}",
                r.t_prime,
                r.alpha_bar,
                r.mean_deviation,
                r.consistent_bound,
                if r.passes_consistent() { "ok" } else { "FAIL" },
                r.published_bound,
                if r.passes_published() { "ok" } else { "no" }
            )
            .ok();
        }
        out
    }
}

/// Settings shared by the deviation checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationSetup {
    pub clip: f64,
    pub eta: f64,
    pub solver: SolverConfig,
    pub trials: usize,
    pub seed: u64,
}

fn deviations(
    data: &GaussianMixture,
    score: &dyn ScoreFunction,
    t_prime: f64,
    s: &Schedule,
    setup: &DeviationSetup,
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.try_map(setup.trials, |i| {
        let mut rng = stream_rng(setup.seed, Stream::Trial, i as u64);
        let x = data.sample(&mut rng);
        let e = vecops::normal_vec(&mut rng, data.dim());
        let start = perturb_with_noise(&x, &e, t_prime, s);
        let xhat = integrate_reverse(&start, t_prime, 0.0, score, &setup.solver, s, &mut rng)?;
        Ok(vecops::dist(&xhat, &x))
    })
}

fn unit_shift(d: usize, length: f64) -> Vec<f64> {
    vec![length / (d as f64).sqrt(); d]
}

/// Perturb-and-recover with the analytic score clipped to `setup.clip`.
pub fn deviation_bound_check(
    data: &GaussianMixture,
    t_prime: f64,
    s: &Schedule,
    setup: &DeviationSetup,
    exec: Exec,
) -> Result<BoundRow> {
    conditional_deviation_check(data, t_prime, s, setup, 0.0, 0.0, exec)
}

/// As [`deviation_bound_check`], but recovery uses the clipped score shifted by a
/// constant vector of norm `k · dist`, so `‖s(·,y) − s(·,ỹ)‖ = K d(y,ỹ)` exactly.
pub fn conditional_deviation_check(
    data: &GaussianMixture,
    t_prime: f64,
    s: &Schedule,
    setup: &DeviationSetup,
    k: f64,
    dist: f64,
    exec: Exec,
) -> Result<BoundRow> {
    if !(setup.clip > 0.0) {
        return Err(invalid("clip constant C must be positive"));
    }
    if !(0.0..=1.0).contains(&t_prime) || !(k >= 0.0) || !(dist >= 0.0) {
        return Err(invalid("bad t', K or condition distance"));
    }
    let d = data.dim();
    let clipped = ClippedScore {
        inner: data.score_fn(*s),
        max_norm: setup.clip,
    };
    let devs = if k * dist == 0.0 {
        deviations(data, &clipped, t_prime, s, setup, exec)?
    } else {
        let shifted = ShiftedScore {
            inner: clipped,
            shift: unit_shift(d, k * dist),
        };
        deviations(data, &shifted, t_prime, s, setup, exec)?
    };
    let (mean, se) = vecops::mean_and_se(&devs);
    let ab = s.alpha_bar(t_prime);
    let conditional = k * dist != 0.0;
    Ok(BoundRow {
        t_prime,
        alpha_bar: ab,
        trials: setup.trials,
        mean_deviation: mean,
        se,
        consistent_bound: consistent_bound(ab, d, setup.clip) + consistent_conditional_term(ab, k, dist),
        published_bound: if conditional {
            published_conditional_derived(ab, d, setup.eta, setup.clip, k, dist)
        } else {
            published_bound(ab, d, setup.eta, setup.clip)
        },
        published_stated_bound: conditional.then(|| published_conditional_stated(ab, d, setup.eta, setup.clip, k, dist)),
    })
}

/// Runs a check over a grid of `t'` values.
pub fn bound_report(
    data: &GaussianMixture,
    grid: &[f64],
    s: &Schedule,
    setup: &DeviationSetup,
    k: f64,
    dist: f64,
    exec: Exec,
) -> Result<BoundReport> {
    let rows = grid
        .iter()
        .map(|&t| conditional_deviation_check(data, t, s, setup, k, dist, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport {
        constants: BoundConstants {
            c: setup.clip,
            c_method: "99th percentile of analytic score norms over t ~ U(0,1], x ~ p_t".into(),
            eta: setup.eta,
            eta_method: "mean norm of data samples".into(),
            d: data.dim(),
            k,
            condition_distance: dist,
        },
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub k: f64,
    pub samples: usize,
}

/// `max ‖s(x,y,t) − s(x,ỹ,t)‖ / d(y,ỹ)` over condition pairs and `(x, t)` points.
pub fn estimate_lipschitz_k(
    model: &dyn ConditionalScoreModel,
    pairs: &[(ConditionRecord, ConditionRecord)],
    weights: &ConditionWeights,
    points: &[(Vec<f64>, f64)],
    exec: Exec,
) -> Result<LipschitzEstimate> {
    let mut dists = Vec::with_capacity(pairs.len());
    for (y, y2) in pairs {
        let d = condition_distance(y, y2, weights);
        if !(d > 0.0) {
            return Err(invalid(format!("condition pair ({y}) / ({y2}) has zero distance")));
        }
        dists.push(d);
    }
    let scores: Vec<_> = pairs
        .iter()
        .map(|(y, y2)| (model.conditional(y), model.conditional(y2)))
        .collect();
    let per_point = exec.map(points.len(), |i| {
        let (x, t) = &points[i];
        scores
            .iter()
            .zip(&dists)
            .map(|((a, b), d)| vecops::dist(&a.score(x, *t), &b.score(x, *t)) / d)
            .fold(0.0, f64::max)
    });
    Ok(LipschitzEstimate {
        k: per_point.into_iter().fold(0.0, f64::max),
        samples: points.len() * pairs.len(),
    })
}

/// A random 1–3 component mixture with means in `[−2, 2]^dim` and variances in
/// `[0.2, 1.5)`; used to draw KL test pairs.
pub fn random_mixture<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<GaussianMixture> {
    let n = rng.random_range(1..=3);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    let means = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let vars: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
    GaussianMixture::from_weights(&w, means, &vars)
}

/// Two-mode inpainting toy: modes at `±a·1` in `dim` dimensions. Each trial keeps
/// the first half of a draw from the `+a` mode and fills the second half with a draw
/// from the `−a` mode, then completes it with and without the keep-mask under the same
/// noise. A trial is won when the masked run lands closer to the `+a` mode on the free
/// half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintingToy {
    pub dim: usize,
    pub separation: f64,
    pub variance: f64,
    pub t_prime: f64,
    pub solver: SolverConfig,
    pub trials: usize,
    pub seed: u64,
}

impl Default for InpaintingToy {
    fn default() -> Self {
        Self {
            dim: 8,
            separation: 1.0,
            variance: 0.05,
            t_prime: 0.5,
            solver: SolverConfig::default(),
            trials: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintingOutcome {
    pub wins: usize,
    pub trials: usize,
    pub mean_masked: f64,
    pub mean_unmasked: f64,
}

impl InpaintingOutcome {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.trials as f64
    }
}

pub fn inpainting_toy(cfg: &InpaintingToy, s: &Schedule, exec: Exec) -> Result<InpaintingOutcome> {
    if cfg.dim < 2 || cfg.trials == 0 {
        return Err(invalid("inpainting toy needs dim >= 2 and at least one trial"));
    }
    let d = cfg.dim;
    let half = d / 2;
    let pos = vec![cfg.separation; d];
    let neg = vec![-cfg.separation; d];
    let data = GaussianMixture::from_weights(&[0.5, 0.5], vec![pos.clone(), neg.clone()], &[cfg.variance; 2])?;
    let score = data.score_fn(*s);
    let mask: Vec<bool> = (0..d).map(|i| i < half).collect();
    let results = exec.try_map(cfg.trials, |k| {
        let mut rng = stream_rng(cfg.seed, Stream::Trial, k as u64);
        let sd = cfg.variance.sqrt();
        let noise = vecops::normal_vec(&mut rng, d);
        let x0: Vec<f64> = (0..d)
            .map(|i| if i < half { pos[i] } else { neg[i] } + sd * noise[i])
            .collect();
        let run_seed = rng.random::<u64>();
        let free_error = |x: &[f64]| vecops::dist(&x[half..], &pos[half..]);
        let masked = crate::pipeline::inpaint_correct(
            &x0,
            &mask,
            &score,
            cfg.t_prime,
            &cfg.solver,
            s,
            &mut rng_from_seed(run_seed),
        )?;
        let plain = crate::pipeline::correct_frame(&x0, &score, cfg.t_prime, &cfg.solver, s, &mut rng_from_seed(run_seed))?;
        Ok::<_, crate::Error>((free_error(&masked), free_error(&plain)))
    })?;
    let wins = results.iter().filter(|(m, u)| m < u).count();
    let (m, u): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    Ok(InpaintingOutcome {
        wins,
        trials: cfg.trials,
        mean_masked: vecops::mean(&m),
        mean_unmasked: vecops::mean(&u),
    })
}
