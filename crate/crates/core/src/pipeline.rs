//! Generation with diffusion correction.
//!
//! Story mode samples one chunk per frame from the ARM, optionally corrupts it, decodes
//! it, and for the first `m` frames corrects the decoded frame with SDEdit under the
//! (memory-refined) condition before re-encoding it into the ARM history. Video mode
//! generates a window of `L` frames under a fixed prompt, corrects the stacked window
//! jointly, re-encodes it and then continues without further correction.
//!
//! Every random draw comes from a stream derived from `(seed, purpose, frame index)`,
//! so runs that differ only in their correction settings share ARM samples up to the
//! first frame whose history differs.

use serde::{Deserialize, Serialize};

use crate::arm::{corrupt_chunk, swap_history, ChunkSequenceModel, SamplerConfig};
use crate::error::{invalid, Result};
use crate::memory::{refine, ConditionRecord, RefinerRule};
use crate::score::{guided_conditional, ConditionalScoreModel, ScoreFunction};
use crate::sde::{integrate_reverse, integrate_reverse_with, perturb_with_noise, Schedule, SolverConfig};
use crate::seed::{stream_rng, Stream};
use crate::tokenizer::{Codebook, TokenChunk};
use crate::vecops;

/// How many leading frames are corrected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrectFrames {
    Count(usize),
    #[serde(with = "all_literal")]
    All,
}

mod all_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let v = String::deserialize(d)?;
        if v == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"all\" or a count, found \"{v}\"")))
        }
    }
}

impl CorrectFrames {
    /// Whether frame `i` (0-based) is corrected.
    pub fn covers(self, i: usize) -> bool {
        match self {
            CorrectFrames::All => true,
            CorrectFrames::Count(m) => i < m,
        }
    }

    pub fn is_none(self) -> bool {
        self == CorrectFrames::Count(0)
    }
}

impl std::fmt::Display for CorrectFrames {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CorrectFrames::All => write!(f, "all"),
            CorrectFrames::Count(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub t_prime: f64,
    pub solver: SolverConfig,
    pub guidance: f64,
    pub correct_first: CorrectFrames,
    pub memory: bool,
    pub refiner: RefinerRule,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            t_prime: 0.45,
            solver: SolverConfig {
                n_steps: 50,
                ..Default::default()
            },
            guidance: 2.0,
            correct_first: CorrectFrames::All,
            memory: true,
            refiner: RefinerRule::default(),
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_prime) {
            return Err(invalid(format!("t_prime = {} outside [0, 1]", self.t_prime)));
        }
        if !self.guidance.is_finite() {
            return Err(invalid("guidance scale must be finite"));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        Self {
            correct_first: CorrectFrames::Count(0),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub n_frames: usize,
    pub window: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            window: 4,
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window > self.n_frames {
            return Err(invalid(format!(
                "video window {} must satisfy 0 < L <= N = {}",
                self.window, self.n_frames
            )));
        }
        Ok(())
    }
}

/// ARM, tokenizer and diffusion model used by a run. The diffusion model works on
/// frames multiplied by `scale`.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub arm: &'a ChunkSequenceModel,
    pub codebook: &'a Codebook,
    pub score: &'a dyn ConditionalScoreModel,
    pub scale: f64,
}

/// Sampling knobs shared by both modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub sampler: SamplerConfig,
    /// Per-token corruption probability applied after sampling.
    pub rho: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            rho: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub condition: ConditionRecord,
    /// Tokens drawn from the ARM.
    pub sampled: TokenChunk,
    /// Tokens after corruption; what was decoded.
    pub tokens: TokenChunk,
    pub decoded: Vec<f64>,
    pub refined: Option<ConditionRecord>,
    pub corrected: Option<Vec<f64>>,
    pub reencoded: Option<TokenChunk>,
    /// The frame the run outputs: the corrected frame if any, else the decoded one.
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRunLog {
    pub seed: u64,
    pub frames: Vec<FrameRecord>,
}

impl PipelineRunLog {
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.output.clone()).collect()
    }
}

/// SDEdit: perturb `x0` to `t'` and integrate the reverse process back to 0.
/// `t' = 0` returns `x0` unchanged.
pub fn correct_frame<R: rand::Rng + ?Sized>(
    x0: &[f64],
    score: &dyn ScoreFunction,
    t_prime: f64,
    solver: &SolverConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    inpaint_correct(x0, &vec![false; x0.len()], score, t_prime, solver, schedule, rng)
}

/// SDEdit with a keep-mask: after every solver step, kept coordinates (`mask[i]`) are
/// reset to `√ᾱ(t) x0 + √(1−ᾱ(t)) ε`, with `ε` the initial perturbation noise. At
/// `t = 0` this is `x0` exactly.
pub fn inpaint_correct<R: rand::Rng + ?Sized>(
    x0: &[f64],
    mask: &[bool],
    score: &dyn ScoreFunction,
    t_prime: f64,
    solver: &SolverConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if mask.len() != x0.len() {
        return Err(invalid(format!(
            "mask has {} entries for a state of dimension {}",
            mask.len(),
            x0.len()
        )));
    }
    if !vecops::all_finite(x0) {
        return Err(invalid("correction input is not finite"));
    }
    if !(0.0..=1.0).contains(&t_prime) {
        return Err(invalid(format!("t_prime = {t_prime} outside [0, 1]")));
    }
    if t_prime == 0.0 {
        return Ok(x0.to_vec());
    }
    let noise = vecops::normal_vec(rng, x0.len());
    let start = perturb_with_noise(x0, &noise, t_prime, schedule);
    if !mask.iter().any(|k| *k) {
        return integrate_reverse(&start, t_prime, 0.0, score, solver, schedule, rng);
    }
    integrate_reverse_with(&start, t_prime, 0.0, score, solver, schedule, rng, |t, x| {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..x.len() {
            if mask[i] {
                x[i] = a * x0[i] + b * noise[i];
            }
        }
    })
}

fn to_model(frame: &[f64], scale: f64) -> Vec<f64> {
    frame.iter().map(|v| v * scale).collect()
}

fn from_model(x: &[f64], scale: f64) -> Vec<f64> {
    x.iter().map(|v| v / scale).collect()
}

fn check_models(models: &Models<'_>, state_dim: usize) -> Result<()> {
    if models.score.dim() != state_dim {
        return Err(invalid(format!(
            "diffusion model dimension {} does not match state dimension {state_dim}",
            models.score.dim()
        )));
    }
    if models.arm.vocab() != models.codebook.size() || models.arm.chunk_len() != models.codebook.grid().n_patches() {
        return Err(invalid("ARM vocabulary or chunk length does not match the codebook"));
    }
    if !(models.scale > 0.0) {
        return Err(invalid("model-space scale must be positive"));
    }
    Ok(())
}

struct Sampled {
    sampled: TokenChunk,
    tokens: TokenChunk,
    decoded: Vec<f64>,
}

fn sample_frame(
    models: &Models<'_>,
    history: &[TokenChunk],
    conds: &[ConditionRecord],
    gen: &GenerationConfig,
    seed: u64,
    i: usize,
) -> Result<Sampled> {
    let mut arm_rng = stream_rng(seed, Stream::Arm, i as u64);
    let sampled = models.arm.sample_chunk(history, conds, &gen.sampler, &mut arm_rng)?;
    let mut corrupt_rng = stream_rng(seed, Stream::Corruption, i as u64);
    let tokens = corrupt_chunk(&sampled, models.arm.vocab(), gen.rho, &mut corrupt_rng);
    let decoded = models.codebook.decode(&tokens)?;
    Ok(Sampled {
        sampled,
        tokens,
        decoded,
    })
}

/// Story mode: one condition per frame; `conditions.len()` frames are generated.
pub fn generate_story(
    conditions: &[ConditionRecord],
    models: &Models<'_>,
    cc: &CorrectionConfig,
    gen: &GenerationConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<PipelineRunLog> {
    cc.validate()?;
    if conditions.is_empty() {
        return Err(invalid("a story needs at least one frame"));
    }
    check_models(models, models.codebook.grid().frame_dim())?;
    let mut history: Vec<TokenChunk> = Vec::with_capacity(conditions.len());
    let mut frames = Vec::with_capacity(conditions.len());
    for i in 0..conditions.len() {
        let conds = &conditions[..=i];
        let s = sample_frame(models, &history, conds, gen, seed, i)?;
        let mut record = FrameRecord {
            index: i,
            condition: conditions[i],
            sampled: s.sampled,
            tokens: s.tokens.clone(),
            output: s.decoded.clone(),
            decoded: s.decoded,
            refined: None,
            corrected: None,
            reencoded: None,
        };
        history.push(s.tokens);
        if cc.correct_first.covers(i) {
            let refined = if cc.memory {
                refine(conds, &cc.refiner)?
            } else {
                conditions[i]
            };
            let score = guided_conditional(models.score, &refined, cc.guidance);
            let mut rng = stream_rng(seed, Stream::Correction, i as u64);
            let x = correct_frame(
                &to_model(&record.decoded, models.scale),
                &score,
                cc.t_prime,
                &cc.solver,
                schedule,
                &mut rng,
            )?;
            let corrected = from_model(&x, models.scale);
            let reencoded = models.codebook.encode(&corrected)?;
            history = swap_history(&history, std::slice::from_ref(&reencoded), i..i + 1)?;
            record.refined = Some(refined);
            record.output = corrected.clone();
            record.corrected = Some(corrected);
            record.reencoded = Some(reencoded);
        }
        frames.push(record);
    }
    Ok(PipelineRunLog { seed, frames })
}

/// Video mode: `vc.n_frames` frames under one prompt. If `cc.correct_first` is not
/// zero the first `vc.window` frames are corrected jointly by `window_models.score`
/// (dimension `window · d`), which sees the frames concatenated in order.
pub fn generate_video(
    prompt: &ConditionRecord,
    vc: &VideoConfig,
    window_models: &Models<'_>,
    cc: &CorrectionConfig,
    gen: &GenerationConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<PipelineRunLog> {
    vc.validate()?;
    cc.validate()?;
    let d = window_models.codebook.grid().frame_dim();
    check_models(window_models, vc.window * d)?;
    let conditions = vec![*prompt; vc.n_frames];
    let mut history: Vec<TokenChunk> = Vec::with_capacity(vc.n_frames);
    let mut frames: Vec<FrameRecord> = Vec::with_capacity(vc.n_frames);
    for i in 0..vc.n_frames {
        let s = sample_frame(window_models, &history, &conditions[..=i], gen, seed, i)?;
        history.push(s.tokens.clone());
        frames.push(FrameRecord {
            index: i,
            condition: *prompt,
            sampled: s.sampled,
            tokens: s.tokens,
            output: s.decoded.clone(),
            decoded: s.decoded,
            refined: None,
            corrected: None,
            reencoded: None,
        });
        if i + 1 == vc.window && !cc.correct_first.is_none() {
            let refined = if cc.memory {
                refine(&conditions[..vc.window], &cc.refiner)?
            } else {
                *prompt
            };
            let stacked: Vec<f64> = frames
                .iter()
                .flat_map(|f| to_model(&f.decoded, window_models.scale))
                .collect();
            let score = guided_conditional(window_models.score, &refined, cc.guidance);
            let mut rng = stream_rng(seed, Stream::Correction, 0);
            let x = correct_frame(&stacked, &score, cc.t_prime, &cc.solver, schedule, &mut rng)?;
            let mut replacement = Vec::with_capacity(vc.window);
            for (f, block) in frames.iter_mut().zip(x.chunks(d)) {
                let corrected = from_model(block, window_models.scale);
                let reencoded = window_models.codebook.encode(&corrected)?;
                replacement.push(reencoded.clone());
                f.refined = Some(refined);
                f.output = corrected.clone();
                f.corrected = Some(corrected);
                f.reencoded = Some(reencoded);
            }
            history = swap_history(&history, &replacement, 0..vc.window)?;
        }
    }
    Ok(PipelineRunLog { seed, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianMixture;
    use crate::seed::rng_from_seed;

    fn two_mode(d: usize, a: f64, var: f64) -> GaussianMixture {
        GaussianMixture::from_weights(&[1.0, 1.0], vec![vec![a; d], vec![-a; d]], &[var, var]).unwrap()
    }

    #[test]
    fn zero_t_prime_is_identity() {
        let s = Schedule::default();
        let m = two_mode(4, 1.0, 0.1);
        let x = vec![0.3, -7.0, 2.5, 1e-9];
        let out = correct_frame(&x, &m.score_fn(s), 0.0, &SolverConfig::default(), &s, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn full_mask_is_identity() {
        let s = Schedule::default();
        let m = two_mode(4, 1.0, 0.1);
        let x = vec![0.3, -7.0, 2.5, 0.125];
        for stochastic in [false, true] {
            let solver = SolverConfig {
                n_steps: 30,
                stochastic,
                ..Default::default()
            };
            let out = inpaint_correct(&x, &[true; 4], &m.score_fn(s), 0.6, &solver, &s, &mut rng_from_seed(2)).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn empty_mask_matches_plain_correction() {
        let s = Schedule::default();
        let m = two_mode(4, 1.0, 0.1);
        let x = vec![0.3, -0.7, 2.5, 0.125];
        let solver = SolverConfig {
            n_steps: 30,
            stochastic: true,
            ..Default::default()
        };
        let a = inpaint_correct(&x, &[false; 4], &m.score_fn(s), 0.5, &solver, &s, &mut rng_from_seed(3)).unwrap();
        let b = correct_frame(&x, &m.score_fn(s), 0.5, &solver, &s, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let s = Schedule::default();
        let m = two_mode(2, 1.0, 0.1);
        let sc = m.score_fn(s);
        let solver = SolverConfig::default();
        let mut rng = rng_from_seed(0);
        assert!(correct_frame(&[f64::NAN, 0.0], &sc, 0.4, &solver, &s, &mut rng).is_err());
        assert!(correct_frame(&[0.0, 0.0], &sc, 1.5, &solver, &s, &mut rng).is_err());
        assert!(inpaint_correct(&[0.0, 0.0], &[true], &sc, 0.4, &solver, &s, &mut rng).is_err());
        assert!(VideoConfig { n_frames: 3, window: 4 }.validate().is_err());
        assert!(VideoConfig { n_frames: 3, window: 0 }.validate().is_err());
    }

    #[test]
    fn off_manifold_inputs_are_pulled_back() {
        let s = Schedule::default();
        let m = two_mode(4, 2.0, 0.05);
        let solver = SolverConfig::default();
        let mut rng = rng_from_seed(5);
        let mut wins = 0;
        for _ in 0..500 {
            let mut x = m.sample(&mut rng);
            let offset = vecops::normal_vec(&mut rng, 4);
            let n = vecops::norm(&offset);
            x.iter_mut().zip(&offset).for_each(|(v, o)| *v += 1.5 * o / n);
            let y = correct_frame(&x, &m.score_fn(s), 0.5, &solver, &s, &mut rng).unwrap();
            if m.nearest_mean_distance(&y) < m.nearest_mean_distance(&x) {
                wins += 1;
            }
        }
        assert!(wins >= 450, "{wins}/500");
    }

    #[test]
    fn correct_frames_coverage() {
        assert!(CorrectFrames::Count(2).covers(1));
        assert!(!CorrectFrames::Count(2).covers(2));
        assert!(CorrectFrames::All.covers(1000));
        assert!(CorrectFrames::Count(0).is_none());
        assert_eq!(CorrectFrames::All.to_string(), "all");
    }
}
