//! Score estimators.
//!
//! Everything the reverse-time integrators consume implements [`ScoreFunction`]:
//! closed-form scores of forward-diffused Gaussian mixtures (the oracles), the
//! empirical conditional mixture built from a frame corpus, the trainable
//! [`network::ScoreNetwork`], and combinators for clipping, shifting and
//! classifier-free guidance.

pub mod network;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::memory::ConditionRecord;
use crate::sde::Schedule;
use crate::vecops;

/// A time-dependent vector field `s(x, t) ≈ ∇ₓ log p_t(x)`.
pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, t, &mut out);
        out
    }
}

impl<T: ScoreFunction + ?Sized> ScoreFunction for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).score_into(x, t, out)
    }
}

impl<T: ScoreFunction + ?Sized> ScoreFunction for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).score_into(x, t, out)
    }
}

/// Score given by a closure.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreFunction for FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(x, t, out)
    }
}

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Finite mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("mixture needs at least one component"))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &components {
            if c.mean.len() != d {
                return Err(invalid("mixture components have different dimensions"));
            }
            if !(c.variance > 0.0) || !(c.weight >= 0.0) {
                return Err(invalid("mixture needs positive variances and non-negative weights"));
            }
        }
        Ok(Self { components })
    }

    /// Builds a mixture from unnormalized weights.
    pub fn from_weights(weights: &[f64], means: Vec<Vec<f64>>, variances: &[f64]) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != variances.len() {
            return Err(invalid("weights, means and variances must have equal length"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("mixture weights must have positive sum"));
        }
        let components = weights
            .iter()
            .zip(means)
            .zip(variances)
            .map(|((w, mean), v)| Component {
                weight: w / total,
                mean,
                variance: *v,
            })
            .collect();
        Self::new(components)
    }

    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_single(&self) -> bool {
        self.components.len() == 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        let mut x = vecops::normal_vec(rng, self.dim());
        for (xi, m) in x.iter_mut().zip(&chosen.mean) {
            *xi = m + sd * *xi;
        }
        x
    }

    /// The forward-diffused mixture `p_t`: each component moves to mean `√ᾱ m` and
    /// variance `ᾱσ² + 1 − ᾱ`.
    pub fn diffused(&self, t: f64, schedule: &Schedule) -> GaussianMixture {
        let ab = schedule.alpha_bar(t);
        let a = ab.sqrt();
        GaussianMixture {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| a * m).collect(),
                    variance: ab * c.variance + 1.0 - ab,
                })
                .collect(),
        }
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * c.variance).ln()
                    - vecops::sq_dist(x, &c.mean) / (2.0 * c.variance)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    /// `∇ₓ log p(x)` of this (undiffused) mixture.
    pub fn grad_log_density_into(&self, x: &[f64], out: &mut [f64]) {
        let logs = self.log_terms(x);
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += r * (m - xi) / c.variance;
            }
        }
    }

    /// Exact score of the diffused mixture at time `t`.
    pub fn score_at(&self, x: &[f64], t: f64, schedule: &Schedule, out: &mut [f64]) {
        let ab = schedule.alpha_bar(t);
        let a = ab.sqrt();
        let d = x.len() as f64;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let v = ab * c.variance + 1.0 - ab;
                let sq: f64 = x.iter().zip(&c.mean).map(|(xi, m)| (xi - a * m).powi(2)).sum();
                c.weight.ln() - 0.5 * d * v.ln() - sq / (2.0 * v)
            })
            .collect();
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            let v = ab * c.variance + 1.0 - ab;
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += r * (a * m - xi) / v;
            }
        }
    }

    /// This mixture's analytic score as a [`ScoreFunction`].
    pub fn score_fn(&self, schedule: Schedule) -> MixtureScore<'_> {
        MixtureScore {
            mixture: self,
            schedule,
        }
    }

    /// Distance from `x` to the closest component mean.
    pub fn nearest_mean_distance(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| vecops::dist(x, &c.mean))
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the closest component mean (lowest index on ties).
    pub fn nearest_mean(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.components.iter().enumerate() {
            let d = vecops::sq_dist(x, &c.mean);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Analytic score of a forward-diffused [`GaussianMixture`].
pub struct MixtureScore<'a> {
    mixture: &'a GaussianMixture,
    schedule: Schedule,
}

impl ScoreFunction for MixtureScore<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.mixture.score_at(x, t, &self.schedule, out)
    }
}

/// Closed-form `∇ₓ log p_t(x)` for the mixture `m` diffused to time `t`.
pub fn analytic_score(m: &GaussianMixture, x: &[f64], t: f64, schedule: &Schedule) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    m.score_at(x, t, schedule, &mut out);
    out
}

/// Rescales the inner score so that its norm never exceeds `max_norm`.
pub struct ClippedScore<S> {
    pub inner: S,
    pub max_norm: f64,
}

impl<S: ScoreFunction> ScoreFunction for ClippedScore<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.inner.score_into(x, t, out);
        let n = vecops::norm(out);
        if n > self.max_norm {
            let k = self.max_norm / n;
            out.iter_mut().for_each(|o| *o *= k);
        }
    }
}

/// Adds a constant vector to the inner score.
pub struct ShiftedScore<S> {
    pub inner: S,
    pub shift: Vec<f64>,
}

impl<S: ScoreFunction> ScoreFunction for ShiftedScore<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.inner.score_into(x, t, out);
        for (o, s) in out.iter_mut().zip(&self.shift) {
            *o += s;
        }
    }
}

/// Classifier-free guidance: `s_uncond + w (s_cond − s_uncond)`.
///
/// `w = 1` returns the conditional score and `w = 0` the unconditional one without
/// evaluating the other branch.
pub struct GuidedScore<C, U> {
    pub cond: C,
    pub uncond: U,
    pub scale: f64,
}

pub fn guided_score<C: ScoreFunction, U: ScoreFunction>(
    cond: C,
    uncond: U,
    scale: f64,
) -> Result<GuidedScore<C, U>> {
    if cond.dim() != uncond.dim() {
        return Err(invalid("guided score needs equal dimensions"));
    }
    Ok(GuidedScore {
        cond,
        uncond,
        scale,
    })
}

impl<C: ScoreFunction, U: ScoreFunction> ScoreFunction for GuidedScore<C, U> {
    fn dim(&self) -> usize {
        self.cond.dim()
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        if self.scale == 1.0 {
            return self.cond.score_into(x, t, out);
        }
        self.uncond.score_into(x, t, out);
        if self.scale == 0.0 {
            return;
        }
        let c = self.cond.score(x, t);
        for (o, ci) in out.iter_mut().zip(&c) {
            *o += self.scale * (ci - *o);
        }
    }
}

/// Posterior-mean denoiser `E[x₀ | x_t] = (x_t + (1 − ᾱ) s(x_t, t)) / √ᾱ`.
pub fn tweedie_denoise(x_t: &[f64], t: f64, score: &dyn ScoreFunction, schedule: &Schedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    if ab >= 1.0 {
        return x_t.to_vec();
    }
    let s = score.score(x_t, t);
    let a = ab.sqrt();
    x_t.iter()
        .zip(&s)
        .map(|(x, si)| (x + (1.0 - ab) * si) / a)
        .collect()
}

/// A family of scores indexed by a structured condition.
pub trait ConditionalScoreModel: Sync {
    fn dim(&self) -> usize;
    fn conditional<'a>(&'a self, cond: &ConditionRecord) -> Box<dyn ScoreFunction + 'a>;
    fn unconditional<'a>(&'a self) -> Box<dyn ScoreFunction + 'a>;
}

/// The guided conditional score used for correction: `uncond + w (cond − uncond)`.
pub fn guided_conditional<'a>(
    model: &'a dyn ConditionalScoreModel,
    cond: &ConditionRecord,
    scale: f64,
) -> GuidedScore<Box<dyn ScoreFunction + 'a>, Box<dyn ScoreFunction + 'a>> {
    GuidedScore {
        cond: model.conditional(cond),
        uncond: model.unconditional(),
        scale,
    }
}

/// Empirical conditional data distribution: every corpus sample becomes a narrow
/// isotropic component labelled with its (complete) condition.
///
/// Its diffused score is the exact minimiser of the conditional denoising
/// score-matching objective on the corpus smoothed by `variance`. Conditioning keeps the
/// components whose label matches every attribute the query defines; absent attributes
/// are marginalised. A query matching nothing falls back to the unconditional mixture.
#[derive(Debug, Clone)]
pub struct LabeledMixture {
    dim: usize,
    means: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    labels: Vec<ConditionRecord>,
    variance: f64,
    schedule: Schedule,
}

impl LabeledMixture {
    /// Deduplicates identical `(sample, label)` pairs into weighted components.
    pub fn new(
        samples: impl IntoIterator<Item = (Vec<f64>, ConditionRecord)>,
        variance: f64,
        schedule: Schedule,
    ) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(invalid("component variance must be positive"));
        }
        let mut index: std::collections::HashMap<(Vec<u64>, ConditionRecord), usize> =
            std::collections::HashMap::new();
        let mut means: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for (x, label) in samples {
            let key = (x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), label);
            match index.get(&key) {
                Some(&i) => counts[i] += 1.0,
                None => {
                    index.insert(key, means.len());
                    means.push(x);
                    counts.push(1.0);
                    labels.push(label);
                }
            }
        }
        let dim = means
            .first()
            .map(|m| m.len())
            .ok_or_else(|| invalid("empirical mixture needs at least one sample"))?;
        if means.iter().any(|m| m.len() != dim) {
            return Err(invalid("empirical mixture samples have different dimensions"));
        }
        Ok(Self {
            dim,
            means,
            log_weights: counts.iter().map(|c| c.ln()).collect(),
            labels,
            variance,
            schedule,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn labels(&self) -> &[ConditionRecord] {
        &self.labels
    }

    fn matching(&self, cond: &ConditionRecord) -> Vec<usize> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i].matches(cond)).collect();
        if idx.is_empty() {
            (0..self.len()).collect()
        } else {
            idx
        }
    }

    fn subset(&self, indices: Vec<usize>) -> SubsetScore<'_> {
        SubsetScore {
            mixture: self,
            indices,
        }
    }
}

/// Score of a [`LabeledMixture`] restricted to a subset of its components.
pub struct SubsetScore<'a> {
    mixture: &'a LabeledMixture,
    indices: Vec<usize>,
}

impl ScoreFunction for SubsetScore<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let m = self.mixture;
        let ab = m.schedule.alpha_bar(t);
        let a = ab.sqrt();
        let v = ab * m.variance + 1.0 - ab;
        // Shared variance: the normalisers cancel in the responsibilities.
        let logs: Vec<f64> = self
            .indices
            .iter()
            .map(|&i| {
                let sq: f64 = x
                    .iter()
                    .zip(&m.means[i])
                    .map(|(xi, mi)| (xi - a * mi).powi(2))
                    .sum();
                m.log_weights[i] - sq / (2.0 * v)
            })
            .collect();
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&i, l) in self.indices.iter().zip(&logs) {
            let r = (l - lse).exp();
            if r < 1e-300 {
                continue;
            }
            for (o, mi) in out.iter_mut().zip(&m.means[i]) {
                *o += r * mi;
            }
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o = (a * *o - xi) / v;
        }
    }
}

impl ConditionalScoreModel for LabeledMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn conditional<'a>(&'a self, cond: &ConditionRecord) -> Box<dyn ScoreFunction + 'a> {
        Box::new(self.subset(self.matching(cond)))
    }

    fn unconditional<'a>(&'a self) -> Box<dyn ScoreFunction + 'a> {
        Box::new(self.subset((0..self.len()).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn two_mode_1d() -> GaussianMixture {
        GaussianMixture::from_weights(&[1.0, 1.0], vec![vec![-2.0], vec![2.0]], &[0.3, 0.3]).unwrap()
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![0.0; 3], 1.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let x = [0.5, -2.0, 1.25];
            let sc = analytic_score(&m, &x, t, &s);
            for (a, b) in sc.iter().zip(&x) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_score_at_time_zero() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![1.0, -1.0], 0.25).unwrap();
        let x = [2.0, 0.0];
        let sc = analytic_score(&m, &x, 0.0, &s);
        assert!((sc[0] + 4.0).abs() < 1e-12);
        assert!((sc[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_midpoint() {
        let s = Schedule::default();
        let m = two_mode_1d();
        for t in [0.0, 0.2, 0.7] {
            assert!(analytic_score(&m, &[0.0], t, &s)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_score_matches_finite_differences_of_log_density() {
        let s = Schedule::default();
        let m = GaussianMixture::from_weights(
            &[0.2, 0.5, 0.3],
            vec![vec![1.0, 0.0], vec![-1.0, 2.0], vec![0.5, -1.5]],
            &[0.2, 0.6, 0.4],
        )
        .unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..1.0);
            let x = vecops::normal_vec(&mut rng, 2);
            let pt = m.diffused(t, &s);
            let sc = analytic_score(&m, &x, t, &s);
            for k in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (pt.log_density(&xp) - pt.log_density(&xm)) / (2.0 * h);
                let rel = (fd - sc[k]).abs() / sc[k].abs().max(1e-3);
                assert!(rel < 1e-6, "rel {rel} at t={t}");
            }
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = |w| Component {
            weight: w,
            mean: vec![0.0],
            variance: 1.0,
        };
        assert!(GaussianMixture::new(vec![c(0.5), c(0.4)]).is_err());
        assert!(GaussianMixture::new(vec![c(0.5), c(0.5)]).is_ok());
        assert!(GaussianMixture::single(vec![0.0], 0.0).is_err());
    }

    fn cond_and_uncond() -> (GaussianMixture, GaussianMixture) {
        let a = GaussianMixture::single(vec![1.0, 2.0], 0.5).unwrap();
        let b = GaussianMixture::from_weights(&[1.0, 2.0], vec![vec![0.0, 0.0], vec![-1.0, 1.0]], &[1.0, 0.3])
            .unwrap();
        (a, b)
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let s = Schedule::default();
        let (a, b) = cond_and_uncond();
        let (sa, sb) = (a.score_fn(s), b.score_fn(s));
        let x = [0.3, -0.4];
        let g1 = guided_score(&sa, &sb, 1.0).unwrap();
        let g0 = guided_score(&sa, &sb, 0.0).unwrap();
        assert_eq!(g1.score(&x, 0.4), sa.score(&x, 0.4));
        assert_eq!(g0.score(&x, 0.4), sb.score(&x, 0.4));
        let same = guided_score(&sa, &sa, 7.5).unwrap();
        assert_eq!(same.score(&x, 0.4), sa.score(&x, 0.4));
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let s = Schedule::default();
        let (a, b) = cond_and_uncond();
        let (sa, sb) = (a.score_fn(s), b.score_fn(s));
        let x = [0.9, 0.1];
        let s0 = guided_score(&sa, &sb, 0.0).unwrap().score(&x, 0.3);
        let s1 = guided_score(&sa, &sb, 1.0).unwrap().score(&x, 0.3);
        for w in [-1.0, 0.5, 2.0, 7.5] {
            let sw = guided_score(&sa, &sb, w).unwrap().score(&x, 0.3);
            for k in 0..2 {
                assert_eq!(sw[k], s0[k] + w * (s1[k] - s0[k]));
            }
        }
    }

    #[test]
    fn tweedie_recovers_point_mass() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![1.5, -0.5], 1e-12).unwrap();
        let score = m.score_fn(s);
        let mut rng = rng_from_seed(2);
        for t in [0.1, 0.5, 0.9] {
            let x = vecops::normal_vec(&mut rng, 2);
            let d = tweedie_denoise(&x, t, &score, &s);
            assert!((d[0] - 1.5).abs() < 1e-6 && (d[1] + 0.5).abs() < 1e-6, "{d:?}");
        }
    }

    #[test]
    fn tweedie_shrinks_standard_normal() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![0.0; 2], 1.0).unwrap();
        let score = m.score_fn(s);
        let x = [0.8, -1.6];
        let t = 0.35;
        let d = tweedie_denoise(&x, t, &score, &s);
        let a = s.alpha_bar(t).sqrt();
        for k in 0..2 {
            assert!((d[k] - a * x[k]).abs() < 1e-12);
        }
        assert_eq!(tweedie_denoise(&x, 0.0, &score, &s), x.to_vec());
        let near = tweedie_denoise(&x, 1e-9, &score, &s);
        assert!((near[0] - x[0]).abs() < 1e-6);
    }

    #[test]
    fn tweedie_inverts_noiseless_perturbation() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![0.0; 2], 1e-12).unwrap();
        let x0 = vec![0.0, 0.0];
        let xt = crate::sde::perturb_with_noise(&x0, &[0.0, 0.0], 0.6, &s);
        let d = tweedie_denoise(&xt, 0.6, &m.score_fn(s), &s);
        assert!(vecops::dist(&d, &x0) < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let s = Schedule::default();
        let m = GaussianMixture::single(vec![0.0; 2], 0.01).unwrap();
        let c = ClippedScore {
            inner: m.score_fn(s),
            max_norm: 2.0,
        };
        let v = c.score(&[3.0, 4.0], 0.0);
        assert!((vecops::norm(&v) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn labeled_mixture_conditions_by_matching_attributes() {
        let s = Schedule::default();
        let samples = vec![
            (vec![1.0, 0.0], ConditionRecord::new(0, 0, 0)),
            (vec![1.0, 0.0], ConditionRecord::new(0, 0, 0)),
            (vec![-1.0, 0.0], ConditionRecord::new(1, 0, 0)),
        ];
        let lm = LabeledMixture::new(samples, 1e-4, s).unwrap();
        assert_eq!(lm.len(), 2);
        let q = ConditionRecord {
            character: Some(1),
            background: None,
            motion: None,
        };
        // Conditioning on character 1 leaves one component: the score near t=0 points at it.
        let sc = lm.conditional(&q).score(&[0.0, 0.0], 0.01);
        assert!(sc[0] < 0.0);
        let sc = lm.conditional(&ConditionRecord::new(0, 0, 0)).score(&[0.0, 0.0], 0.01);
        assert!(sc[0] > 0.0);
        // Absent attributes marginalise: this matches the exact weighted mixture.
        let exact = GaussianMixture::from_weights(&[2.0, 1.0], vec![vec![1.0, 0.0], vec![-1.0, 0.0]], &[1e-4, 1e-4])
            .unwrap();
        let x = [0.2, 0.3];
        let a = lm.unconditional().score(&x, 0.3);
        let b = analytic_score(&exact, &x, 0.3, &s);
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }
}
