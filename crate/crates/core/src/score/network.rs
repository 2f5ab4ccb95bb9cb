//! Fully connected conditional score network with hand-written backpropagation.
//!
//! The network predicts the injected noise `ε̂(x, y, t)`; the score is
//! `s_θ(x, y, t) = −ε̂ / √(1 − ᾱ(t))`. Input features are the state, sinusoidal time
//! features and one learned embedding per condition attribute (each table has a
//! trailing "unconditional" row used for absent attributes and condition dropout).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConditionalScoreModel, ScoreFunction};
use crate::error::{format_err, invalid, Error, Result};
use crate::exec::Exec;
use crate::memory::{Attribute, ConditionRecord};
use crate::sde::Schedule;
use crate::seed::rng_from_seed;
use crate::vecops;

const CHECKPOINT_MAGIC: &str = "acdc-score-network v1";
/// Lower end of the training time range; avoids the `1/√(1−ᾱ)` singularity at 0.
pub const T_EPS: f64 = 1e-3;
const CHUNK: usize = 8;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub embed_dim: usize,
    /// Vocabulary sizes for character, background and motion.
    pub vocab: [usize; 3],
}

impl NetworkShape {
    fn input_width(&self) -> usize {
        self.dim + 2 * self.time_freqs + 3 * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embeddings: [usize; 3],
    layers: Vec<Dense>,
    total: usize,
}

impl Layout {
    fn new(shape: &NetworkShape) -> Self {
        let mut off = 0;
        let mut embeddings = [0; 3];
        for (k, v) in shape.vocab.iter().enumerate() {
            embeddings[k] = off;
            off += (v + 1) * shape.embed_dim;
        }
        let mut widths = vec![shape.input_width()];
        widths.extend(&shape.hidden);
        widths.push(shape.dim);
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            layers.push(Dense {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            });
            off += n_in * n_out + n_out;
        }
        Self {
            embeddings,
            layers,
            total: off,
        }
    }
}

/// How the per-time loss is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    One,
    #[default]
    OneMinusAlphaBar,
}

impl Weighting {
    pub fn lambda(self, alpha_bar: f64) -> f64 {
        match self {
            Weighting::One => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - alpha_bar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step size.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weighting: Weighting,
    /// Probability of replacing a sample's whole condition by the unconditional id.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            weighting: Weighting::OneMinusAlphaBar,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(invalid("training needs positive batch size and learning rate"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(invalid("cond_dropout must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The trainable score network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    shape: NetworkShape,
    layout: Layout,
    params: Vec<f64>,
    schedule: Schedule,
}

/// Per-sample noise draws for one DSM batch.
#[derive(Debug, Clone)]
pub struct DsmDraws {
    pub times: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
    pub dropped: Vec<bool>,
}

impl DsmDraws {
    pub fn sample<R: Rng + ?Sized>(n: usize, dim: usize, cond_dropout: f64, rng: &mut R) -> Self {
        let mut times = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        let mut dropped = Vec::with_capacity(n);
        for _ in 0..n {
            times.push(rng.random_range(T_EPS..=1.0));
            noise.push(vecops::normal_vec(rng, dim));
            dropped.push(rng.random::<f64>() < cond_dropout);
        }
        Self {
            times,
            noise,
            dropped,
        }
    }
}

/// Per-sample DSM term `λ ‖s − target‖²`.
pub fn dsm_sample_loss(score: &[f64], target: &[f64], lambda: f64) -> f64 {
    lambda * vecops::sq_dist(score, target)
}

/// DSM loss of an arbitrary score function on fixed draws; condition labels are
/// ignored. With the exact score this is the irreducible part of the objective.
pub fn dsm_loss_of_score(
    score: &dyn ScoreFunction,
    batch: &[(Vec<f64>, ConditionRecord)],
    draws: &DsmDraws,
    weighting: Weighting,
    schedule: &Schedule,
) -> Result<f64> {
    if batch.is_empty() || draws.times.len() != batch.len() {
        return Err(invalid("DSM loss needs a non-empty batch matching the draws"));
    }
    let mut total = 0.0;
    for (i, (x0, _)) in batch.iter().enumerate() {
        let t = draws.times[i];
        let ab = schedule.alpha_bar(t);
        let sigma = (1.0 - ab).sqrt();
        let xt = crate::sde::perturb_with_noise(x0, &draws.noise[i], t, schedule);
        let target: Vec<f64> = draws.noise[i].iter().map(|e| -e / sigma).collect();
        total += dsm_sample_loss(&score.score(&xt, t), &target, weighting.lambda(ab));
    }
    Ok(total / batch.len() as f64)
}

/// Activations kept for the backward pass.
struct Trace {
    /// Inputs to each dense layer; `acts[0]` is the feature vector.
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ScoreNetwork {
    pub fn new(shape: NetworkShape, schedule: Schedule, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.hidden.is_empty() || shape.hidden.contains(&0) {
            return Err(invalid("network needs a positive dimension and hidden widths"));
        }
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_from_seed(seed);
        for (k, &off) in layout.embeddings.iter().enumerate() {
            for p in &mut params[off..off + (shape.vocab[k] + 1) * shape.embed_dim] {
                *p = StandardNormal.sample(&mut rng);
            }
        }
        for layer in &layout.layers {
            let sd = (1.0 / layer.n_in as f64).sqrt();
            for p in &mut params[layer.w..layer.w + layer.n_in * layer.n_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = sd * z;
            }
        }
        Ok(Self {
            shape,
            layout,
            params,
            schedule,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn cond_ids(&self, cond: &ConditionRecord, dropped: bool) -> [usize; 3] {
        let mut ids = [0; 3];
        for (k, attr) in Attribute::ALL.into_iter().enumerate() {
            let sentinel = self.shape.vocab[k];
            ids[k] = match cond.get(attr) {
                Some(v) if !dropped && (v as usize) < sentinel => v as usize,
                _ => sentinel,
            };
        }
        ids
    }

    fn features(&self, x: &[f64], t: f64, ids: [usize; 3]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.shape.input_width());
        f.extend_from_slice(x);
        for k in 0..self.shape.time_freqs {
            let w = std::f64::consts::PI * 1.6f64.powi(k as i32);
            f.push((w * t).sin());
            f.push((w * t).cos());
        }
        let e = self.shape.embed_dim;
        for (k, id) in ids.iter().enumerate() {
            let off = self.layout.embeddings[k] + id * e;
            f.extend_from_slice(&self.params[off..off + e]);
        }
        f
    }

    fn forward(&self, x: &[f64], t: f64, ids: [usize; 3]) -> Trace {
        let mut acts = vec![self.features(x, t, ids)];
        let n_layers = self.layout.layers.len();
        let mut output = Vec::new();
        for (li, layer) in self.layout.layers.iter().enumerate() {
            let input = acts.last().expect("non-empty");
            let w = &self.params[layer.w..layer.w + layer.n_in * layer.n_out];
            let b = &self.params[layer.b..layer.b + layer.n_out];
            let mut z: Vec<f64> = (0..layer.n_out)
                .map(|o| b[o] + vecops::dot(&w[o * layer.n_in..(o + 1) * layer.n_in], input))
                .collect();
            if li + 1 == n_layers {
                output = z;
            } else {
                z.iter_mut().for_each(|v| *v = v.tanh());
                acts.push(z);
            }
        }
        Trace { acts, output }
    }

    /// Raw noise prediction `ε̂(x, y, t)`.
    pub fn predict_noise(&self, x: &[f64], t: f64, cond: &ConditionRecord) -> Vec<f64> {
        self.forward(x, t, self.cond_ids(cond, false)).output
    }

    fn noise_scale(&self, t: f64) -> f64 {
        (1.0 - self.schedule.alpha_bar(t)).sqrt().max(1e-6)
    }

    fn score_ids_into(&self, x: &[f64], t: f64, ids: [usize; 3], out: &mut [f64]) {
        let eps = self.forward(x, t, ids).output;
        let sigma = self.noise_scale(t);
        for (o, e) in out.iter_mut().zip(&eps) {
            *o = -e / sigma;
        }
    }

    /// Accumulates `dL/dθ` for one sample into `grad` given `dL/dε̂`.
    fn backward(&self, trace: &Trace, ids: [usize; 3], d_out: &[f64], grad: &mut [f64]) {
        let mut delta = d_out.to_vec();
        for (li, layer) in self.layout.layers.iter().enumerate().rev() {
            let input = &trace.acts[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                grad[layer.b + o] += d;
                if d != 0.0 {
                    let row = &mut grad[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            let w = &self.params[layer.w..layer.w + layer.n_in * layer.n_out];
            let mut d_in = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (di, wi) in d_in.iter_mut().zip(&w[o * layer.n_in..(o + 1) * layer.n_in]) {
                    *di += d * wi;
                }
            }
            if li > 0 {
                // Hidden activations are tanh outputs: d tanh = 1 − a².
                for (di, a) in d_in.iter_mut().zip(input) {
                    *di *= 1.0 - a * a;
                }
            }
            delta = d_in;
        }
        let e = self.shape.embed_dim;
        let base = self.shape.dim + 2 * self.shape.time_freqs;
        for (k, id) in ids.iter().enumerate() {
            let off = self.layout.embeddings[k] + id * e;
            for j in 0..e {
                grad[off + j] += delta[base + k * e + j];
            }
        }
    }

    /// Batch DSM loss and its exact parameter gradient for fixed noise draws.
    pub fn dsm_loss_with(
        &self,
        batch: &[(Vec<f64>, ConditionRecord)],
        draws: &DsmDraws,
        weighting: Weighting,
        exec: Exec,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(invalid("DSM loss needs a non-empty batch"));
        }
        if draws.times.len() != batch.len() {
            return Err(invalid("noise draws do not match the batch size"));
        }
        let n = batch.len();
        let n_chunks = n.div_ceil(CHUNK);
        let partials = exec.map(n_chunks, |c| {
            let mut grad = vec![0.0; self.params.len()];
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let (x0, cond) = &batch[i];
                let t = draws.times[i];
                let eps = &draws.noise[i];
                let ab = self.schedule.alpha_bar(t);
                let xt = crate::sde::perturb_with_noise(x0, eps, t, &self.schedule);
                let ids = self.cond_ids(cond, draws.dropped[i]);
                let trace = self.forward(&xt, t, ids);
                let sigma = self.noise_scale(t);
                // λ‖−ε̂/σ + ε/σ‖² = (λ/σ²)‖ε̂ − ε‖²
                let k = weighting.lambda(ab) / (sigma * sigma);
                let diff: Vec<f64> = trace.output.iter().zip(eps).map(|(a, b)| a - b).collect();
                loss += k * vecops::dot(&diff, &diff);
                let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * k * d / n as f64).collect();
                self.backward(&trace, ids, &d_out, &mut grad);
            }
            (loss, grad)
        });
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss / n as f64, grad))
    }

    /// Monte-Carlo DSM loss with fresh draws from `rng`.
    pub fn dsm_loss<R: Rng + ?Sized>(
        &self,
        batch: &[(Vec<f64>, ConditionRecord)],
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(invalid("DSM loss needs a non-empty batch"));
        }
        let draws = DsmDraws::sample(batch.len(), self.shape.dim, cfg.cond_dropout, rng);
        self.dsm_loss_with(batch, &draws, cfg.weighting, Exec::Parallel)
    }

    /// Runs `cfg.steps` Adam steps on minibatches drawn with replacement from `dataset`.
    /// Returns the per-step loss trace.
    pub fn train(
        &mut self,
        dataset: &[(Vec<f64>, ConditionRecord)],
        cfg: &TrainConfig,
        exec: Exec,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(invalid("training needs a non-empty dataset"));
        }
        let mut rng = rng_from_seed(cfg.seed);
        let mut adam = Adam::new(self.params.len(), cfg.learning_rate);
        let mut trace = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let batch: Vec<_> = (0..cfg.batch_size)
                .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
                .collect();
            let draws = DsmDraws::sample(batch.len(), self.shape.dim, cfg.cond_dropout, &mut rng);
            let (loss, grad) = self.dsm_loss_with(&batch, &draws, cfg.weighting, exec)?;
            if !loss.is_finite() || !vecops::all_finite(&grad) {
                return Err(Error::TrainingDiverged { step, loss });
            }
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut self.params, &grad),
                Optimizer::Sgd => {
                    for (p, g) in self.params.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
            }
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Writes the plain-text checkpoint.
    ///
    /// Layout: a magic line, `dim`, `hidden`, `time_freqs`, `embed_dim`, `vocab`,
    /// `schedule` and `params <count>` header lines, then one parameter per line in
    /// shortest round-trip decimal form.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.shape;
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").ok();
        writeln!(out, "dim {}", s.dim).ok();
        let hidden: Vec<String> = s.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(out, "hidden {}", hidden.join(" ")).ok();
        writeln!(out, "time_freqs {}", s.time_freqs).ok();
        writeln!(out, "embed_dim {}", s.embed_dim).ok();
        writeln!(out, "vocab {} {} {}", s.vocab[0], s.vocab[1], s.vocab[2]).ok();
        writeln!(
            out,
            "schedule {:?} {:?}",
            self.schedule.beta_min(),
            self.schedule.beta_max()
        )
        .ok();
        writeln!(out, "params {}", self.params.len()).ok();
        for p in &self.params {
            writeln!(out, "{p:?}").ok();
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |d: String| format_err("score checkpoint", d);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != CHECKPOINT_MAGIC {
            return Err(bad("missing header".into()));
        }
        fn field(line: &str, key: &str) -> Result<Vec<String>> {
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(format_err("score checkpoint", format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        }
        fn nums<T: std::str::FromStr>(v: Vec<String>) -> Result<Vec<T>> {
            v.iter()
                .map(|s| s.parse().map_err(|_| format_err("score checkpoint", format!("bad number `{s}`"))))
                .collect()
        }
        let dim: Vec<usize> = nums(field(&next()?, "dim")?)?;
        let hidden: Vec<usize> = nums(field(&next()?, "hidden")?)?;
        let tf: Vec<usize> = nums(field(&next()?, "time_freqs")?)?;
        let ed: Vec<usize> = nums(field(&next()?, "embed_dim")?)?;
        let vocab: Vec<usize> = nums(field(&next()?, "vocab")?)?;
        let sched: Vec<f64> = nums(field(&next()?, "schedule")?)?;
        let count: Vec<usize> = nums(field(&next()?, "params")?)?;
        if dim.len() != 1 || tf.len() != 1 || ed.len() != 1 || vocab.len() != 3 || sched.len() != 2 || count.len() != 1 {
            return Err(bad("malformed header values".into()));
        }
        let shape = NetworkShape {
            dim: dim[0],
            hidden,
            time_freqs: tf[0],
            embed_dim: ed[0],
            vocab: [vocab[0], vocab[1], vocab[2]],
        };
        let schedule = Schedule::new(sched[0], sched[1])?;
        let mut net = Self::new(shape, schedule, 0)?;
        if count[0] != net.params.len() {
            return Err(bad(format!(
                "parameter count {} does not match architecture ({})",
                count[0],
                net.params.len()
            )));
        }
        for p in net.params.iter_mut() {
            let line = next()?;
            *p = line
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad parameter `{line}`")))?;
        }
        Ok(net)
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// The network evaluated at a fixed condition.
pub struct NetworkScore<'a> {
    net: &'a ScoreNetwork,
    ids: [usize; 3],
}

impl ScoreFunction for NetworkScore<'_> {
    fn dim(&self) -> usize {
        self.net.shape.dim
    }
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.net.score_ids_into(x, t, self.ids, out)
    }
}

impl ScoreNetwork {
    pub fn with_condition(&self, cond: &ConditionRecord) -> NetworkScore<'_> {
        NetworkScore {
            net: self,
            ids: self.cond_ids(cond, false),
        }
    }
}

impl ConditionalScoreModel for ScoreNetwork {
    fn dim(&self) -> usize {
        self.shape.dim
    }
    fn conditional<'a>(&'a self, cond: &ConditionRecord) -> Box<dyn ScoreFunction + 'a> {
        Box::new(self.with_condition(cond))
    }
    fn unconditional<'a>(&'a self) -> Box<dyn ScoreFunction + 'a> {
        Box::new(NetworkScore {
            net: self,
            ids: self.shape.vocab,
        })
    }
}
