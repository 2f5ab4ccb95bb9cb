//! Procedural story/video corpora, metrics and the ablation drivers.
//!
//! A story is a 5×5 character glyph moving over a static background texture on a
//! 16×16 canvas (wrapping at the edges). Each frame carries a [`ConditionRecord`];
//! the first is complete, later ones omit the character with probability `p_omit`.

pub mod io;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{ArmConfig, ChunkSequenceModel, TrainingSequence};
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::memory::{AttrId, ConditionRecord};
use crate::pipeline::{
    generate_story, generate_video, CorrectFrames, CorrectionConfig, GenerationConfig, Models, PipelineRunLog,
    VideoConfig,
};
use crate::score::network::{NetworkShape, ScoreNetwork, TrainConfig};
use crate::score::{ConditionalScoreModel, LabeledMixture};
use crate::sde::Schedule;
use crate::seed::{derive_seed, stream_rng, Stream};
use crate::tokenizer::{fit_codebook, Codebook, PatchGrid, TokenChunk};
use crate::vecops;

pub const SIDE: usize = 16;
pub const GLYPH: usize = 5;

const GLYPHS: [[&str; GLYPH]; 8] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#....", "#....", "#....", "#....", "#####"],
    [".###.", "#####", "#####", "#####", ".###."],
    ["#.#.#", ".....", "#.#.#", ".....", "#.#.#"],
];

/// Row and column displacement per motion id: stay, right, left, down, up.
pub const MOTIONS: [(i64, i64); 5] = [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)];
pub const MOTION_NAMES: [&str; 5] = ["stay", "right-1", "left-1", "down-1", "up-1"];
pub const N_BACKGROUNDS: usize = 6;

fn background_level(bg: AttrId, r: usize, c: usize) -> u8 {
    match bg {
        0 => [30, 80][r % 2],
        1 => [30, 80][c % 2],
        2 => [20, 100][(r / 2 + c / 2) % 2],
        3 => 10 + 25 * ((r + c) % 4) as u8,
        4 => 60,
        _ => {
            if r % 4 == 0 && c % 4 == 0 {
                120
            } else {
                20
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorySpec {
    pub n_frames: usize,
    pub n_characters: usize,
    pub n_backgrounds: usize,
    pub n_motions: usize,
    /// Probability that a frame after the first omits the character.
    pub p_omit: f64,
    /// Top-left glyph corner before the first motion.
    pub start: (usize, usize),
}

impl Default for StorySpec {
    fn default() -> Self {
        Self {
            n_frames: 6,
            n_characters: 4,
            n_backgrounds: 4,
            n_motions: 5,
            p_omit: 0.7,
            start: (5, 5),
        }
    }
}

impl StorySpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, max: usize| {
            if v == 0 || v > max {
                Err(invalid(format!("{name} must be in 1..={max}, got {v}")))
            } else {
                Ok(())
            }
        };
        check("n_frames", self.n_frames, 4096)?;
        check("n_characters", self.n_characters, GLYPHS.len())?;
        check("n_backgrounds", self.n_backgrounds, N_BACKGROUNDS)?;
        check("n_motions", self.n_motions, MOTIONS.len())?;
        if !(0.0..=1.0).contains(&self.p_omit) {
            return Err(invalid(format!("p_omit must be in [0, 1], got {}", self.p_omit)));
        }
        if self.start.0 >= SIDE || self.start.1 >= SIDE {
            return Err(invalid("start position outside the canvas"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> [usize; 3] {
        [self.n_characters, self.n_backgrounds, self.n_motions]
    }
}

/// Renders one frame with the glyph's top-left corner at `pos` (wrapping).
pub fn render_frame(character: AttrId, background: AttrId, pos: (usize, usize)) -> Vec<f64> {
    let mut levels = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            levels[r * SIDE + c] = background_level(background, r, c);
        }
    }
    for (gr, row) in GLYPHS[character as usize].iter().enumerate() {
        for (gc, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                levels[((pos.0 + gr) % SIDE) * SIDE + (pos.1 + gc) % SIDE] = 255;
            }
        }
    }
    levels.iter().map(|v| *v as f64 / 255.0).collect()
}

/// Pixels covered by a glyph at `pos`.
pub fn glyph_mask(character: AttrId, pos: (usize, usize)) -> Vec<bool> {
    let mut mask = vec![false; SIDE * SIDE];
    for (gr, row) in GLYPHS[character as usize].iter().enumerate() {
        for (gc, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                mask[((pos.0 + gr) % SIDE) * SIDE + (pos.1 + gc) % SIDE] = true;
            }
        }
    }
    mask
}

fn step(pos: (usize, usize), motion: AttrId) -> (usize, usize) {
    let (dr, dc) = MOTIONS[motion as usize];
    let wrap = |v: usize, d: i64| (v as i64 + d).rem_euclid(SIDE as i64) as usize;
    (wrap(pos.0, dr), wrap(pos.1, dc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub seed: u64,
    pub character: AttrId,
    pub background: AttrId,
    pub motions: Vec<AttrId>,
    pub positions: Vec<(usize, usize)>,
    pub conditions: Vec<ConditionRecord>,
    pub frames: Vec<Vec<f64>>,
}

/// Renders a story from explicit attributes; `omit[i]` drops frame `i`'s character
/// (ignored for the first frame).
pub fn render_story(
    spec: &StorySpec,
    character: AttrId,
    background: AttrId,
    motions: &[AttrId],
    omit: &[bool],
    seed: u64,
) -> Result<Story> {
    spec.validate()?;
    if motions.len() != spec.n_frames || omit.len() != spec.n_frames {
        return Err(invalid("one motion and one omission flag per frame"));
    }
    if character as usize >= spec.n_characters
        || background as usize >= spec.n_backgrounds
        || motions.iter().any(|m| *m as usize >= spec.n_motions)
    {
        return Err(invalid("story attribute outside its vocabulary"));
    }
    let mut pos = spec.start;
    let mut positions = Vec::with_capacity(spec.n_frames);
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut conditions = Vec::with_capacity(spec.n_frames);
    for (i, &m) in motions.iter().enumerate() {
        pos = step(pos, m);
        positions.push(pos);
        frames.push(render_frame(character, background, pos));
        conditions.push(ConditionRecord {
            character: (i == 0 || !omit[i]).then_some(character),
            background: Some(background),
            motion: Some(m),
        });
    }
    Ok(Story {
        seed,
        character,
        background,
        motions: motions.to_vec(),
        positions,
        conditions,
        frames,
    })
}

/// Draws a story's attributes from `seed` and renders it.
pub fn make_story(spec: &StorySpec, seed: u64) -> Result<Story> {
    spec.validate()?;
    let mut rng = crate::seed::rng_from_seed(seed);
    let character = rng.random_range(0..spec.n_characters) as AttrId;
    let background = rng.random_range(0..spec.n_backgrounds) as AttrId;
    let motions: Vec<AttrId> = (0..spec.n_frames)
        .map(|_| rng.random_range(0..spec.n_motions) as AttrId)
        .collect();
    let omit: Vec<bool> = (0..spec.n_frames).map(|_| rng.random::<f64>() < spec.p_omit).collect();
    render_story(spec, character, background, &motions, &omit, seed)
}

/// A video: one complete prompt repeated over every frame, constant motion.
pub fn make_video(spec: &StorySpec, seed: u64) -> Result<Story> {
    spec.validate()?;
    let mut rng = crate::seed::rng_from_seed(seed);
    let character = rng.random_range(0..spec.n_characters) as AttrId;
    let background = rng.random_range(0..spec.n_backgrounds) as AttrId;
    let motion = rng.random_range(0..spec.n_motions) as AttrId;
    render_story(
        spec,
        character,
        background,
        &vec![motion; spec.n_frames],
        &vec![false; spec.n_frames],
        seed,
    )
}

pub fn corpus_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, Stream::Story, index as u64)
}

pub fn make_corpus(n: usize, spec: &StorySpec, seed: u64) -> Result<Vec<Story>> {
    (0..n).map(|k| make_story(spec, corpus_seed(seed, k))).collect()
}

pub fn make_video_corpus(n: usize, spec: &StorySpec, seed: u64) -> Result<Vec<Story>> {
    (0..n).map(|k| make_video(spec, corpus_seed(seed, k))).collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = vecops::mean(v);
    v.iter().map(|x| x - m).collect()
}

/// Cosine similarity of two mean-centred frames (0 if either is constant).
pub fn centered_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (centered(a), centered(b));
    let n = vecops::norm(&a) * vecops::norm(&b);
    if n == 0.0 {
        0.0
    } else {
        (vecops::dot(&a, &b) / n).clamp(-1.0, 1.0)
    }
}

/// Consecutive-pair cosines and their mean.
pub fn frame_consistency(frames: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if frames.len() < 2 {
        return Err(invalid("frame consistency needs at least two frames"));
    }
    let pairs: Vec<f64> = frames.windows(2).map(|w| centered_cosine(&w[0], &w[1])).collect();
    let mean = vecops::mean(&pairs);
    Ok((pairs, mean))
}

/// Exact nearest-neighbour L2 distance to the reference frames.
pub fn manifold_distance(frame: &[f64], references: &[Vec<f64>]) -> Result<f64> {
    if references.is_empty() {
        return Err(invalid("manifold distance needs a non-empty reference set"));
    }
    Ok(references
        .iter()
        .map(|r| vecops::sq_dist(frame, r))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

/// Distinct corpus frames grouped by `(character, background)`: the ground-truth
/// manifold of every story with that cast and setting.
#[derive(Debug, Clone, Default)]
pub struct ReferenceSets {
    sets: HashMap<(AttrId, AttrId), Vec<Vec<f64>>>,
}

impl ReferenceSets {
    pub fn new(corpus: &[Story]) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut sets: HashMap<(AttrId, AttrId), Vec<Vec<f64>>> = HashMap::new();
        for s in corpus {
            for f in &s.frames {
                let key: Vec<u64> = f.iter().map(|v| v.to_bits()).collect();
                if seen.insert((s.character, s.background, key)) {
                    sets.entry((s.character, s.background)).or_default().push(f.clone());
                }
            }
        }
        Self { sets }
    }

    pub fn get(&self, character: AttrId, background: AttrId) -> Result<&[Vec<f64>]> {
        self.sets
            .get(&(character, background))
            .map(|v| v.as_slice())
            .ok_or_else(|| invalid(format!("no reference frames for character {character}, background {background}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub story: usize,
    pub frame: usize,
    /// Cosine with the previous output frame; absent for the first frame.
    pub frame_consistency: Option<f64>,
    pub manifold_distance: f64,
    pub token_error_rate: f64,
}

/// Per-frame metrics of one run against its ground-truth story.
pub fn evaluate_run(
    story_index: usize,
    log: &PipelineRunLog,
    truth: &Story,
    refs: &ReferenceSets,
    codebook: &Codebook,
) -> Result<Vec<MetricRow>> {
    let references = refs.get(truth.character, truth.background)?;
    let outputs = log.outputs();
    let mut rows = Vec::with_capacity(outputs.len());
    for (i, out) in outputs.iter().enumerate() {
        let produced = match &log.frames[i].reencoded {
            Some(t) => t.clone(),
            None => log.frames[i].tokens.clone(),
        };
        let expected = codebook.encode(&truth.frames[i])?;
        let wrong = produced.0.iter().zip(&expected.0).filter(|(a, b)| a != b).count();
        rows.push(MetricRow {
            story: story_index,
            frame: i,
            frame_consistency: (i > 0).then(|| centered_cosine(&outputs[i - 1], out)),
            manifold_distance: manifold_distance(out, references)?,
            token_error_rate: wrong as f64 / expected.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub size: usize,
    pub iters: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { size: 64, iters: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreBackend {
    /// Exact score of the corpus smoothed by a narrow Gaussian.
    #[default]
    Empirical,
    /// Trained feedforward network.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub backend: ScoreBackend,
    /// Model-space frames are `scale × frame`.
    pub scale: f64,
    /// Component variance of the empirical backend.
    pub variance: f64,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub embed_dim: usize,
    pub train: TrainConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            backend: ScoreBackend::Empirical,
            scale: 2.0,
            variance: 1e-3,
            hidden: vec![128, 128, 128],
            time_freqs: 8,
            embed_dim: 8,
            train: TrainConfig {
                batch_size: 32,
                steps: 2000,
                learning_rate: 1e-3,
                ..Default::default()
            },
        }
    }
}

/// Everything needed to fit models and run the story and video experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub story: StorySpec,
    pub n_stories: usize,
    /// Stories evaluated per run, taken from the start of the corpus (capped at
    /// `n_stories`).
    pub n_eval: usize,
    pub codebook: CodebookConfig,
    pub arm: ArmConfig,
    pub diffusion: DiffusionConfig,
    pub generation: GenerationConfig,
    pub correction: CorrectionConfig,
    pub video: VideoSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            story: StorySpec::default(),
            n_stories: 200,
            n_eval: 100,
            codebook: CodebookConfig::default(),
            arm: ArmConfig::default(),
            diffusion: DiffusionConfig::default(),
            generation: GenerationConfig::default(),
            correction: CorrectionConfig::default(),
            video: VideoSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSettings {
    pub n_videos: usize,
    pub n_eval: usize,
    pub frames: VideoConfig,
    pub t_prime: f64,
}

impl Default for VideoSettings {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_eval: 100,
            frames: VideoConfig::default(),
            t_prime: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.story.validate()?;
        self.correction.validate()?;
        self.generation.sampler.validate()?;
        self.video.frames.validate()?;
        if !(0.0..=1.0).contains(&self.generation.rho) {
            return Err(invalid("rho must lie in [0, 1]"));
        }
        if !(self.diffusion.scale > 0.0) || !(self.diffusion.variance > 0.0) {
            return Err(invalid("diffusion scale and variance must be positive"));
        }
        if !(0.0..=1.0).contains(&self.video.t_prime) {
            return Err(invalid("video t_prime must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn eval_stories<'a>(&self, corpora: &'a Corpora) -> &'a [Story] {
        &corpora.stories[..self.n_eval.min(corpora.stories.len())]
    }

    pub fn eval_videos<'a>(&self, corpora: &'a Corpora) -> &'a [Story] {
        &corpora.videos[..self.video.n_eval.min(corpora.videos.len())]
    }

    /// Correction settings for video mode: the story settings at the video `t'`.
    pub fn video_correction(&self) -> CorrectionConfig {
        CorrectionConfig {
            t_prime: self.video.t_prime,
            ..self.correction
        }
    }

    fn video_spec(&self) -> StorySpec {
        StorySpec {
            n_frames: self.video.frames.n_frames,
            ..self.story.clone()
        }
    }
}

/// Labels a frame with its complete ground-truth condition.
fn complete_labels(story: &Story) -> Vec<ConditionRecord> {
    story
        .motions
        .iter()
        .map(|m| ConditionRecord::new(story.character, story.background, *m))
        .collect()
}

pub fn fit_arm(corpus: &[Story], codebook: &Codebook, cfg: ArmConfig) -> Result<ChunkSequenceModel> {
    let sequences = corpus
        .iter()
        .map(|s| {
            Ok(TrainingSequence {
                chunks: s.frames.iter().map(|f| codebook.encode(f)).collect::<Result<Vec<TokenChunk>>>()?,
                conditions: s.conditions.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ChunkSequenceModel::fit(&sequences, codebook.size(), cfg)
}

/// Training pairs for the frame-level diffusion model, in model space.
pub fn frame_dataset(corpus: &[Story], scale: f64) -> Vec<(Vec<f64>, ConditionRecord)> {
    corpus
        .iter()
        .flat_map(|s| {
            s.frames
                .iter()
                .zip(complete_labels(s))
                .map(|(f, l)| (f.iter().map(|v| v * scale).collect(), l))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Training pairs for the window model: the first `window` frames of each video,
/// concatenated, labelled with the prompt.
pub fn window_dataset(videos: &[Story], window: usize, scale: f64) -> Vec<(Vec<f64>, ConditionRecord)> {
    videos
        .iter()
        .map(|v| {
            let x = v.frames[..window].iter().flatten().map(|p| p * scale).collect();
            (x, v.conditions[0])
        })
        .collect()
}

/// A fitted conditional score model of either backend.
pub enum DiffusionModel {
    Empirical(LabeledMixture),
    Network(ScoreNetwork),
}

impl DiffusionModel {
    pub fn as_model(&self) -> &dyn ConditionalScoreModel {
        match self {
            DiffusionModel::Empirical(m) => m,
            DiffusionModel::Network(n) => n,
        }
    }

    pub fn fit(
        data: &[(Vec<f64>, ConditionRecord)],
        cfg: &DiffusionConfig,
        vocab: [usize; 3],
        schedule: Schedule,
        seed: u64,
        exec: Exec,
    ) -> Result<(Self, Vec<f64>)> {
        match cfg.backend {
            ScoreBackend::Empirical => Ok((
                DiffusionModel::Empirical(LabeledMixture::new(data.iter().cloned(), cfg.variance, schedule)?),
                Vec::new(),
            )),
            ScoreBackend::Network => {
                let dim = data.first().map(|d| d.0.len()).ok_or_else(|| invalid("empty training set"))?;
                let shape = NetworkShape {
                    dim,
                    hidden: cfg.hidden.clone(),
                    time_freqs: cfg.time_freqs,
                    embed_dim: cfg.embed_dim,
                    vocab,
                };
                let mut net = ScoreNetwork::new(shape, schedule, derive_seed(seed, Stream::Training, 0))?;
                let train = TrainConfig {
                    seed: derive_seed(seed, Stream::Training, 1),
                    ..cfg.train.clone()
                };
                let trace = net.train(data, &train, exec)?;
                Ok((DiffusionModel::Network(net), trace))
            }
        }
    }
}

/// Models fitted on a story corpus and a video corpus.
pub struct ModelBundle {
    pub codebook: Codebook,
    pub arm: ChunkSequenceModel,
    pub frame_model: DiffusionModel,
    pub video_arm: ChunkSequenceModel,
    pub window_model: DiffusionModel,
    pub loss_trace: Vec<f64>,
}

impl ModelBundle {
    pub fn fit(
        cfg: &ExperimentConfig,
        corpus: &[Story],
        videos: &[Story],
        schedule: Schedule,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let mut frames: Vec<Vec<f64>> = corpus.iter().flat_map(|s| s.frames.iter().cloned()).collect();
        frames.extend(videos.iter().flat_map(|s| s.frames.iter().cloned()));
        let codebook = fit_codebook(
            &frames,
            PatchGrid::new(SIDE, 4)?,
            cfg.codebook.size,
            cfg.codebook.iters,
            derive_seed(seed, Stream::Codebook, 0),
            exec,
        )?;
        let arm = fit_arm(corpus, &codebook, cfg.arm)?;
        let video_arm = fit_arm(videos, &codebook, cfg.arm)?;
        let vocab = cfg.story.vocab();
        let (frame_model, loss_trace) = DiffusionModel::fit(
            &frame_dataset(corpus, cfg.diffusion.scale),
            &cfg.diffusion,
            vocab,
            schedule,
            derive_seed(seed, Stream::Training, 10),
            exec,
        )?;
        let (window_model, _) = DiffusionModel::fit(
            &window_dataset(videos, cfg.video.frames.window, cfg.diffusion.scale),
            &cfg.diffusion,
            vocab,
            schedule,
            derive_seed(seed, Stream::Training, 20),
            exec,
        )?;
        Ok(Self {
            codebook,
            arm,
            frame_model,
            video_arm,
            window_model,
            loss_trace,
        })
    }

    pub fn story_models(&self, scale: f64) -> Models<'_> {
        Models {
            arm: &self.arm,
            codebook: &self.codebook,
            score: self.frame_model.as_model(),
            scale,
        }
    }

    pub fn video_models(&self, scale: f64) -> Models<'_> {
        Models {
            arm: &self.video_arm,
            codebook: &self.codebook,
            score: self.window_model.as_model(),
            scale,
        }
    }
}

/// Pipeline seed of evaluation story `k`; shared by every cell of an ablation.
pub fn run_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, Stream::Misc, k as u64)
}

/// Result of running one configuration over the evaluation stories.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryRun {
    pub logs: Vec<PipelineRunLog>,
    pub metrics: Vec<MetricRow>,
}

impl StoryRun {
    /// Mean manifold distance per frame index.
    pub fn manifold_curve(&self) -> Vec<f64> {
        per_frame_mean(&self.metrics, |m| Some(m.manifold_distance))
    }

    pub fn mean_consistency(&self) -> f64 {
        let v: Vec<f64> = self.metrics.iter().filter_map(|m| m.frame_consistency).collect();
        vecops::mean(&v)
    }

    pub fn mean_manifold(&self) -> f64 {
        let v: Vec<f64> = self.metrics.iter().map(|m| m.manifold_distance).collect();
        vecops::mean(&v)
    }
}

fn per_frame_mean(rows: &[MetricRow], f: impl Fn(&MetricRow) -> Option<f64>) -> Vec<f64> {
    let n = rows.iter().map(|m| m.frame + 1).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            let v: Vec<f64> = rows.iter().filter(|m| m.frame == i).filter_map(&f).collect();
            vecops::mean(&v)
        })
        .collect()
}

/// Runs story mode over `stories` (in parallel across stories) and scores the outputs.
#[allow(clippy::too_many_arguments)]
pub fn run_stories(
    stories: &[Story],
    refs: &ReferenceSets,
    models: &Models<'_>,
    cc: &CorrectionConfig,
    gen: &GenerationConfig,
    schedule: &Schedule,
    master: u64,
    exec: Exec,
) -> Result<StoryRun> {
    let per_story = exec.try_map(stories.len(), |k| {
        let log = generate_story(&stories[k].conditions, models, cc, gen, schedule, run_seed(master, k))?;
        let rows = evaluate_run(k, &log, &stories[k], refs, models.codebook)?;
        Ok::<_, crate::Error>((log, rows))
    })?;
    let mut logs = Vec::with_capacity(stories.len());
    let mut metrics = Vec::new();
    for (log, rows) in per_story {
        logs.push(log);
        metrics.extend(rows);
    }
    Ok(StoryRun { logs, metrics })
}

/// Runs video mode for every evaluation video under its prompt.
#[allow(clippy::too_many_arguments)]
pub fn run_videos(
    videos: &[Story],
    refs: &ReferenceSets,
    models: &Models<'_>,
    vc: &VideoConfig,
    cc: &CorrectionConfig,
    gen: &GenerationConfig,
    schedule: &Schedule,
    master: u64,
    exec: Exec,
) -> Result<StoryRun> {
    let per_video = exec.try_map(videos.len(), |k| {
        let log = generate_video(&videos[k].conditions[0], vc, models, cc, gen, schedule, run_seed(master, k))?;
        let rows = evaluate_run(k, &log, &videos[k], refs, models.codebook)?;
        Ok::<_, crate::Error>((log, rows))
    })?;
    let mut logs = Vec::with_capacity(videos.len());
    let mut metrics = Vec::new();
    for (log, rows) in per_video {
        logs.push(log);
        metrics.extend(rows);
    }
    Ok(StoryRun { logs, metrics })
}

/// One ablation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub correct_first: CorrectFrames,
    pub memory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub mean_frame_consistency: f64,
    pub mean_manifold_distance: f64,
    pub manifold_curve: Vec<f64>,
}

pub fn default_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for m in [CorrectFrames::Count(0), CorrectFrames::Count(2), CorrectFrames::Count(4), CorrectFrames::All] {
        for memory in [true, false] {
            cells.push(AblationCell {
                correct_first: m,
                memory,
            });
        }
    }
    cells
}

/// Runs every cell over the same stories and pipeline seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    grid: &[AblationCell],
    stories: &[Story],
    refs: &ReferenceSets,
    models: &Models<'_>,
    base: &CorrectionConfig,
    gen: &GenerationConfig,
    schedule: &Schedule,
    master: u64,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(invalid("ablation grid is empty"));
    }
    grid.iter()
        .map(|cell| {
            let cc = CorrectionConfig {
                correct_first: cell.correct_first,
                memory: cell.memory,
                ..*base
            };
            let run = run_stories(stories, refs, models, &cc, gen, schedule, master, exec)?;
            Ok(AblationRow {
                cell: *cell,
                mean_frame_consistency: run.mean_consistency(),
                mean_manifold_distance: run.mean_manifold(),
                manifold_curve: run.manifold_curve(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let n = rows.iter().map(|r| r.manifold_curve.len()).max().unwrap_or(0);
    let mut out = String::from("correct_first,memory,mean_frame_consistency,mean_manifold_distance");
    for i in 0..n {
        out.push_str(&format!(",manifold_frame_{}", i + 1));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.cell.correct_first,
            if r.cell.memory { "on" } else { "off" },
            r.mean_frame_consistency,
            r.mean_manifold_distance
        ));
        for v in &r.manifold_curve {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Stories and videos of an experiment, regenerated from the master seed.
pub struct Corpora {
    pub stories: Vec<Story>,
    pub videos: Vec<Story>,
}

impl Corpora {
    pub fn generate(cfg: &ExperimentConfig, master: u64) -> Result<Self> {
        Ok(Self {
            stories: make_corpus(cfg.n_stories, &cfg.story, derive_seed(master, Stream::Story, 0))?,
            videos: make_video_corpus(cfg.video.n_videos, &cfg.video_spec(), derive_seed(master, Stream::Story, 1))?,
        })
    }
}

/// Fresh rng for ad-hoc experiment draws.
pub fn misc_rng(master: u64, index: u64) -> crate::seed::StreamRng {
    stream_rng(master, Stream::Misc, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stay_keeps_frames_identical() {
        let spec = StorySpec::default();
        let s = render_story(&spec, 1, 2, &[0; 6], &[false; 6], 0).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn right_motion_on_blank_background_is_a_cyclic_shift() {
        // Background 4 is flat, so shifting the whole frame moves only the glyph.
        let spec = StorySpec {
            n_backgrounds: N_BACKGROUNDS,
            ..Default::default()
        };
        let s = render_story(&spec, 0, 4, &[1; 6], &[false; 6], 0).unwrap();
        for w in s.frames.windows(2) {
            for r in 0..SIDE {
                for c in 0..SIDE {
                    assert_eq!(w[1][r * SIDE + (c + 1) % SIDE], w[0][r * SIDE + c]);
                }
            }
        }
    }

    #[test]
    fn character_only_changes_glyph_pixels() {
        let spec = StorySpec::default();
        let motions = [1, 3, 0, 2, 4, 1];
        let a = render_story(&spec, 0, 2, &motions, &[false; 6], 0).unwrap();
        let b = render_story(&spec, 3, 2, &motions, &[false; 6], 0).unwrap();
        for i in 0..6 {
            let ma = glyph_mask(0, a.positions[i]);
            let mb = glyph_mask(3, b.positions[i]);
            for p in 0..SIDE * SIDE {
                if !ma[p] && !mb[p] {
                    assert_eq!(a.frames[i][p], b.frames[i][p]);
                }
            }
            assert_ne!(a.frames[i], b.frames[i]);
        }
    }

    #[test]
    fn conditions_follow_the_omission_rule() {
        let spec = StorySpec::default();
        let s = render_story(&spec, 1, 1, &[0; 6], &[true; 6], 0).unwrap();
        assert!(s.conditions[0].is_complete());
        assert!(s.conditions[1..].iter().all(|c| c.character.is_none() && c.background == Some(1)));
    }

    #[test]
    fn frames_are_eight_bit_levels_in_unit_range() {
        let s = make_story(&StorySpec::default(), 9).unwrap();
        for f in &s.frames {
            for v in f {
                assert!((0.0..=1.0).contains(v));
                assert_eq!((v * 255.0).round() / 255.0, *v);
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_singleton_matches_story() {
        let spec = StorySpec::default();
        let a = make_corpus(5, &spec, 3).unwrap();
        assert_eq!(a, make_corpus(5, &spec, 3).unwrap());
        let one = make_corpus(1, &spec, 3).unwrap();
        assert_eq!(one[0], make_story(&spec, corpus_seed(3, 0)).unwrap());
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let spec = StorySpec::default();
        let corpus = make_corpus(10_000, &spec, 1).unwrap();
        let chi2 = |counts: &[f64]| {
            let e = counts.iter().sum::<f64>() / counts.len() as f64;
            counts.iter().map(|c| (c - e) * (c - e) / e).sum::<f64>()
        };
        let mut ch = vec![0.0; 4];
        let mut bg = vec![0.0; 4];
        let mut mo = vec![0.0; 5];
        for s in &corpus {
            ch[s.character as usize] += 1.0;
            bg[s.background as usize] += 1.0;
            mo[s.motions[0] as usize] += 1.0;
        }
        // 1% critical values for 3 and 4 degrees of freedom.
        assert!(chi2(&ch) < 11.345);
        assert!(chi2(&bg) < 11.345);
        assert!(chi2(&mo) < 13.277);
    }

    #[test]
    fn consistency_of_identical_and_negated_frames() {
        let s = make_story(&StorySpec::default(), 2).unwrap();
        let f = s.frames[0].clone();
        let (pairs, mean) = frame_consistency(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert!(pairs.iter().all(|p| (p - 1.0).abs() < 1e-12));
        assert!((mean - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert!((centered_cosine(&f, &neg) + 1.0).abs() < 1e-12);
        let bright: Vec<f64> = f.iter().map(|v| v + 0.25).collect();
        assert!((centered_cosine(&f, &s.frames[1]) - centered_cosine(&bright, &s.frames[1])).abs() < 1e-12);
        assert!(frame_consistency(&[f]).is_err());
    }

    #[test]
    fn noise_frames_are_nearly_uncorrelated() {
        let mut rng = misc_rng(1, 0);
        let mut total = 0.0;
        for _ in 0..1000 {
            let a = vecops::normal_vec(&mut rng, 256);
            let b = vecops::normal_vec(&mut rng, 256);
            total += centered_cosine(&a, &b).abs();
        }
        assert!(total / 1000.0 < 0.1);
    }

    #[test]
    fn manifold_distance_oracles() {
        let corpus = make_corpus(10, &StorySpec::default(), 4).unwrap();
        let refs: Vec<Vec<f64>> = corpus.iter().flat_map(|s| s.frames.clone()).collect();
        assert_eq!(manifold_distance(&refs[3], &refs).unwrap(), 0.0);
        assert!(manifold_distance(&refs[0], &[]).is_err());
        let mut gap = f64::INFINITY;
        for (i, a) in refs.iter().enumerate() {
            for b in &refs[i + 1..] {
                let d = vecops::dist(a, b);
                if d > 0.0 {
                    gap = gap.min(d);
                }
            }
        }
        let mut rng = misc_rng(2, 0);
        let dir = vecops::normal_vec(&mut rng, 256);
        let delta: Vec<f64> = dir.iter().map(|v| v * 0.2 * gap / vecops::norm(&dir)).collect();
        let moved: Vec<f64> = refs[5].iter().zip(&delta).map(|(a, b)| a + b).collect();
        let d1 = manifold_distance(&moved, &refs).unwrap();
        assert!((d1 - vecops::norm(&delta)).abs() < 1e-12);
        let moved2: Vec<f64> = refs[5].iter().zip(&delta).map(|(a, b)| a + 2.0 * b).collect();
        assert!((manifold_distance(&moved2, &refs).unwrap() - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn spec_validation_names_the_field() {
        let spec = StorySpec {
            n_characters: 0,
            ..Default::default()
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("n_characters"), "{err}");
    }
}
