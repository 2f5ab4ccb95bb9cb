use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use acdc_core::arm::ChunkSequenceModel;
use acdc_core::exec::Exec;
use acdc_core::experiment::io::{metrics_csv, write_pgm};
use acdc_core::experiment::{
    ablation_csv, default_grid, frame_dataset, manifold_distance, run_ablation, run_stories, run_videos, AblationRow,
    Corpora, DiffusionModel, ModelBundle, ReferenceSets, ScoreBackend, Story, StoryRun,
};
use acdc_core::pipeline::{CorrectFrames, CorrectionConfig};
use acdc_core::score::network::ScoreNetwork;
use acdc_core::score::GaussianMixture;
use acdc_core::seed::{derive_seed, stream_rng, Stream};
use acdc_core::theory::{
    bound_report, default_clip, estimate_eta, inpainting_toy, is_non_increasing, kl_curve, random_mixture,
    BoundReport, DeviationSetup, InpaintingOutcome, KlPoint,
};
use acdc_core::tokenizer::Codebook;
use acdc_core::vecops;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{self, load_corpus, write_corpus, Manifest};
use crate::error::{CliError, Result};
use crate::rundir::RunDir;

fn clear(dir: &RunDir, name: &str) -> Result<()> {
    let p = dir.path(name);
    if p.exists() {
        fs::remove_dir_all(&p).map_err(CliError::io(&p))?;
    }
    Ok(())
}

/// Generates the story and video corpora into `corpus/`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dir = RunDir::open(out)?;
    dir.snapshot(cfg, None)?;
    clear(&dir, "corpus")?;
    let corpora = Corpora::generate(&cfg.experiment, cfg.seed)?;
    write_corpus(&dir, cfg, &corpora)
}

pub const CHECKPOINTS: &str = "checkpoints/manifest.json";
pub const LOSS_TRACE: &str = "logs/loss_trace.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub training_hash: String,
    pub backend: ScoreBackend,
    pub training_steps: usize,
}

fn write_with<F>(dir: &RunDir, name: &str, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> acdc_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    dir.write(name, buf)?;
    Ok(())
}

/// Fits the codebook, both ARMs and both diffusion models and writes them under
/// `checkpoints/`. A network backend also writes `logs/loss_trace.csv`.
pub fn train(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<CheckpointManifest> {
    let dir = RunDir::open(out)?;
    dir.snapshot(cfg, None)?;
    let corpora = load_corpus(&dir, cfg)?;
    clear(&dir, "checkpoints")?;
    let schedule = cfg.schedule()?;
    let bundle = ModelBundle::fit(&cfg.experiment, &corpora.stories, &corpora.videos, schedule, cfg.seed, exec)?;
    write_with(&dir, "checkpoints/codebook.txt", |b| bundle.codebook.write_to(b))?;
    write_with(&dir, "checkpoints/arm.txt", |b| bundle.arm.write_to(b))?;
    write_with(&dir, "checkpoints/video_arm.txt", |b| bundle.video_arm.write_to(b))?;
    let backend = cfg.experiment.diffusion.backend;
    if let (DiffusionModel::Network(f), DiffusionModel::Network(w)) = (&bundle.frame_model, &bundle.window_model) {
        write_with(&dir, "checkpoints/score.txt", |b| f.write_checkpoint(b))?;
        write_with(&dir, "checkpoints/window_score.txt", |b| w.write_checkpoint(b))?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in bundle.loss_trace.iter().enumerate() {
            writeln!(csv, "{},{l}", i + 1).ok();
        }
        dir.write(LOSS_TRACE, csv)?;
    }
    let manifest = CheckpointManifest {
        training_hash: cfg.training_hash(),
        backend,
        training_steps: bundle.loss_trace.len(),
    };
    dir.write(CHECKPOINTS, serde_json::to_string_pretty(&manifest).expect("serializes") + "\n")?;
    Ok(manifest)
}

fn open_reader(dir: &RunDir, name: &str) -> Result<BufReader<fs::File>> {
    let p = dir.path(name);
    let f = fs::File::open(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::NotFound(p.display().to_string()),
        _ => CliError::Io { path: p.clone(), source: e },
    })?;
    Ok(BufReader::new(f))
}

/// Loads the checkpoints written by [`train`], refusing ones fitted under a
/// different configuration.
pub fn load_models(dir: &RunDir, cfg: &RunConfig, corpora: &Corpora) -> Result<ModelBundle> {
    if !dir.exists(CHECKPOINTS) {
        return Err(CliError::NotFound(format!(
            "no checkpoints in {} (run `acdc train` first)",
            dir.root().display()
        )));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&dir.read_to_string(CHECKPOINTS)?)
        .map_err(|e| CliError::Stale(format!("{CHECKPOINTS}: {e}")))?;
    if manifest.training_hash != cfg.training_hash() {
        return Err(CliError::Stale(
            "checkpoints were trained under a different configuration; rerun `acdc train`".into(),
        ));
    }
    let schedule = cfg.schedule()?;
    let codebook = Codebook::read_from(open_reader(dir, "checkpoints/codebook.txt")?)?;
    let arm = ChunkSequenceModel::read_from(open_reader(dir, "checkpoints/arm.txt")?)?;
    let video_arm = ChunkSequenceModel::read_from(open_reader(dir, "checkpoints/video_arm.txt")?)?;
    let e = &cfg.experiment;
    let (frame_model, window_model) = match e.diffusion.backend {
        ScoreBackend::Empirical => {
            let fit = |data: &[_]| {
                DiffusionModel::fit(data, &e.diffusion, e.story.vocab(), schedule, cfg.seed, Exec::Sequential)
                    .map(|(m, _)| m)
            };
            (
                fit(&frame_dataset(&corpora.stories, e.diffusion.scale))?,
                fit(&acdc_core::experiment::window_dataset(
                    &corpora.videos,
                    e.video.frames.window,
                    e.diffusion.scale,
                ))?,
            )
        }
        ScoreBackend::Network => (
            DiffusionModel::Network(ScoreNetwork::read_checkpoint(open_reader(dir, "checkpoints/score.txt")?)?),
            DiffusionModel::Network(ScoreNetwork::read_checkpoint(open_reader(dir, "checkpoints/window_score.txt")?)?),
        ),
    };
    Ok(ModelBundle {
        codebook,
        arm,
        frame_model,
        video_arm,
        window_model,
        loss_trace: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Story,
    Video,
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Story, Mode::Video, Mode::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Story => "story",
            Mode::Video => "video",
            Mode::Baseline => "baseline",
        }
    }

    pub fn dir(self) -> String {
        format!("run-{}", self.name())
    }

    /// Whether this mode's frames may carry a corrected version.
    pub fn corrects(self) -> bool {
        self != Mode::Baseline
    }

    fn item_dir(self, k: usize) -> String {
        match self {
            Mode::Video => corpus::video_dir(k),
            _ => corpus::story_dir(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub n_stories: usize,
    pub n_frames: usize,
    pub mean_manifold_distance: f64,
    pub mean_frame_consistency: f64,
    pub manifold_curve: Vec<f64>,
}

fn per_frame_csv(run: &StoryRun, raw: Option<&[Vec<f64>]>) -> String {
    let n = run.manifold_curve().len();
    let mean_where = |i: usize, f: &dyn Fn(&acdc_core::experiment::MetricRow) -> Option<f64>| {
        let v: Vec<f64> = run.metrics.iter().filter(|m| m.frame == i).filter_map(f).collect();
        if v.is_empty() {
            String::new()
        } else {
            vecops::mean(&v).to_string()
        }
    };
    let mut out = String::from("frame,manifold_distance,frame_consistency,token_error_rate");
    if raw.is_some() {
        out.push_str(",raw_manifold_distance");
    }
    out.push('\n');
    for i in 0..n {
        write!(
            out,
            "{},{},{},{}",
            i + 1,
            mean_where(i, &|m| Some(m.manifold_distance)),
            mean_where(i, &|m| m.frame_consistency),
            mean_where(i, &|m| Some(m.token_error_rate))
        )
        .ok();
        if let Some(raw) = raw {
            let v: Vec<f64> = raw.iter().map(|r| r[i]).collect();
            write!(out, ",{}", vecops::mean(&v)).ok();
        }
        out.push('\n');
    }
    out
}

fn pgm_bytes(frame: &[f64]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, frame)?;
    Ok(buf)
}

/// Runs one pipeline mode over the evaluation stories (or videos).
pub fn run(cfg: &RunConfig, out: &Path, mode: Mode, exec: Exec) -> Result<RunSummary> {
    let dir = RunDir::open(out)?;
    let sub = mode.dir();
    clear(&dir, &sub)?;
    dir.snapshot(cfg, Some(&sub))?;
    let corpora = load_corpus(&dir, cfg)?;
    let bundle = load_models(&dir, cfg, &corpora)?;
    let schedule = cfg.schedule()?;
    let e = &cfg.experiment;
    let mut everything: Vec<Story> = corpora.stories.clone();
    everything.extend(corpora.videos.iter().cloned());
    let refs = ReferenceSets::new(&everything);
    let (items, run) = match mode {
        Mode::Story | Mode::Baseline => {
            let cc = if mode == Mode::Story {
                e.correction
            } else {
                CorrectionConfig {
                    correct_first: CorrectFrames::Count(0),
                    ..e.correction
                }
            };
            let items = e.eval_stories(&corpora);
            let models = bundle.story_models(e.diffusion.scale);
            (items, run_stories(items, &refs, &models, &cc, &e.generation, &schedule, cfg.seed, exec)?)
        }
        Mode::Video => {
            let items = e.eval_videos(&corpora);
            let models = bundle.video_models(e.diffusion.scale);
            let cc = e.video_correction();
            let run = run_videos(items, &refs, &models, &e.video.frames, &cc, &e.generation, &schedule, cfg.seed, exec)?;
            (items, run)
        }
    };
    let mut raw_distances = Vec::with_capacity(items.len());
    for (k, (log, story)) in run.logs.iter().zip(items).enumerate() {
        let name = mode.item_dir(k);
        dir.write(
            &format!("{sub}/logs/{name}.json"),
            serde_json::to_string(log).expect("run log serializes") + "\n",
        )?;
        let references = refs.get(story.character, story.background)?;
        let mut raw = Vec::with_capacity(log.frames.len());
        for rec in &log.frames {
            let i = rec.index + 1;
            dir.write(&format!("{sub}/frames/{name}/raw_{i:03}.pgm"), pgm_bytes(&rec.decoded)?)?;
            if mode.corrects() {
                dir.write(&format!("{sub}/frames/{name}/output_{i:03}.pgm"), pgm_bytes(&rec.output)?)?;
            }
            raw.push(manifold_distance(&rec.decoded, references)?);
        }
        raw_distances.push(raw);
    }
    dir.write(&format!("{sub}/metrics.csv"), metrics_csv(&run.metrics))?;
    dir.write(
        &format!("{sub}/per_frame.csv"),
        per_frame_csv(&run, mode.corrects().then_some(raw_distances.as_slice())),
    )?;
    let summary = RunSummary {
        mode,
        n_stories: items.len(),
        n_frames: run.manifold_curve().len(),
        mean_manifold_distance: run.mean_manifold(),
        mean_frame_consistency: run.mean_consistency(),
        manifold_curve: run.manifold_curve(),
    };
    dir.write(
        &format!("{sub}/summary.json"),
        serde_json::to_string_pretty(&summary).expect("serializes") + "\n",
    )?;
    Ok(summary)
}

/// Runs the correction-count × memory grid over the evaluation stories.
pub fn ablate(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<Vec<AblationRow>> {
    let dir = RunDir::open(out)?;
    clear(&dir, "ablation")?;
    dir.snapshot(cfg, Some("ablation"))?;
    let corpora = load_corpus(&dir, cfg)?;
    let bundle = load_models(&dir, cfg, &corpora)?;
    let schedule = cfg.schedule()?;
    let e = &cfg.experiment;
    let mut everything: Vec<Story> = corpora.stories.clone();
    everything.extend(corpora.videos.iter().cloned());
    let refs = ReferenceSets::new(&everything);
    let rows = run_ablation(
        &default_grid(),
        e.eval_stories(&corpora),
        &refs,
        &bundle.story_models(e.diffusion.scale),
        &e.correction,
        &e.generation,
        &schedule,
        cfg.seed,
        exec,
    )?;
    dir.write("ablation/ablation.csv", ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryOutcome {
    pub checks: Vec<Check>,
    pub kl: Vec<Vec<KlPoint>>,
    pub bounds: BoundReport,
    pub conditional: BoundReport,
    pub inpainting: InpaintingOutcome,
    pub summary: String,
}

impl TheoryOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// KL contraction, the deviation bounds and the inpainting toy, with analytic
/// scores throughout. Only consistent-convention bounds gate; published-form
/// bounds are reported alongside.
pub fn verify_theory(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<TheoryOutcome> {
    let dir = RunDir::open(out)?;
    clear(&dir, "theory")?;
    dir.snapshot(cfg, Some("theory"))?;
    let s = cfg.schedule()?;
    let t = &cfg.theory;
    let mut checks = Vec::new();

    let mut rng = stream_rng(cfg.seed, Stream::Misc, 1000);
    let mut kl = Vec::with_capacity(t.kl_pairs);
    let mut kl_csv = String::from("pair,dim,t,kl,se\n");
    let mut kl_bad = Vec::new();
    for k in 0..t.kl_pairs {
        let dim = 1 + k % 2;
        let p = random_mixture(&mut rng, dim)?;
        let q = random_mixture(&mut rng, dim)?;
        let curve = kl_curve(&p, &q, &t.kl_grid, &s, t.kl_mc_samples, derive_seed(cfg.seed, Stream::Trial, k as u64))?;
        for pt in &curve {
            writeln!(kl_csv, "{},{dim},{},{},{}", k + 1, pt.t, pt.kl, pt.se).ok();
        }
        if !is_non_increasing(&curve, t.kl_tolerance_se) {
            kl_bad.push(k + 1);
        }
        kl.push(curve);
    }
    checks.push(Check {
        name: "kl_non_increasing".into(),
        passed: kl_bad.is_empty(),
        detail: format!(
            "{} pairs, tolerance {} MC standard errors; failing pairs: {:?}",
            t.kl_pairs, t.kl_tolerance_se, kl_bad
        ),
    });

    let p = GaussianMixture::single(vec![0.0], 1.0)?;
    let q = GaussianMixture::single(vec![2.0], 1.0)?;
    let closed = kl_curve(&p, &q, &t.kl_grid, &s, 1, 0)?;
    let worst = closed
        .iter()
        .map(|pt| {
            let exact = 2.0 * s.alpha_bar(pt.t);
            (pt.kl - exact).abs() / exact
        })
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "kl_closed_form".into(),
        passed: worst < 1e-9,
        detail: format!("N(0,1) vs N(2,1): max relative error {worst:.3e} against 2·alpha_bar(t)"),
    });

    let data = GaussianMixture::from_weights(
        &[0.5, 0.5],
        vec![vec![t.separation; t.dim], vec![-t.separation; t.dim]],
        &[t.variance; 2],
    )?;
    let setup = DeviationSetup {
        clip: default_clip(&data, &s, t.clip_samples, derive_seed(cfg.seed, Stream::Trial, 10_001)),
        eta: estimate_eta(&data, t.eta_samples, derive_seed(cfg.seed, Stream::Trial, 10_002)),
        solver: t.solver,
        trials: t.trials,
        seed: derive_seed(cfg.seed, Stream::Trial, 10_003),
    };
    let bounds = bound_report(&data, &t.t_grid, &s, &setup, 0.0, 0.0, exec)?;
    let violations = bounds.rows.iter().filter(|r| !r.passes_consistent()).count();
    checks.push(Check {
        name: "deviation_bound".into(),
        passed: violations == 0,
        detail: format!("{} t' values x {} trials, {violations} violations", bounds.rows.len(), t.trials),
    });

    let conditional = bound_report(&data, &t.t_grid, &s, &setup, t.lipschitz_k, t.mismatch_distance, exec)?;
    let violations = conditional.rows.iter().filter(|r| !r.passes_consistent()).count();
    checks.push(Check {
        name: "conditional_bound".into(),
        passed: violations == 0,
        detail: format!(
            "K = {}, d(y,y~) = {}: {violations} violations",
            t.lipschitz_k, t.mismatch_distance
        ),
    });
    let not_larger: Vec<f64> = bounds
        .rows
        .iter()
        .zip(&conditional.rows)
        .filter(|(m, c)| c.mean_deviation <= m.mean_deviation)
        .map(|(m, _)| m.t_prime)
        .collect();
    checks.push(Check {
        name: "mismatch_increases_deviation".into(),
        passed: not_larger.is_empty() && t.mismatch_distance > 0.0 && t.lipschitz_k > 0.0,
        detail: format!(
            "paired trials, d(y,y~) = {} vs 0; t' without a strict increase: {not_larger:?}",
            t.mismatch_distance
        ),
    });

    let inpainting = inpainting_toy(&t.inpainting, &s, exec)?;
    checks.push(Check {
        name: "inpainting".into(),
        passed: inpainting.win_rate() >= 0.8,
        detail: format!(
            "masked completion closer to the kept mode in {}/{} trials (mean error {:.4} vs {:.4})",
            inpainting.wins, inpainting.trials, inpainting.mean_masked, inpainting.mean_unmasked
        ),
    });

    let mut summary = String::new();
    for c in &checks {
        writeln!(summary, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).ok();
    }
    writeln!(summary, "\nUnconditional deviation (the published-form column is informational):").ok();
    summary.push_str(&bounds.summary());
    writeln!(summary, "\nConditional deviation:").ok();
    summary.push_str(&conditional.summary());

    dir.write("theory/kl_curves.csv", kl_csv)?;
    dir.write("theory/bounds.csv", bounds.to_csv())?;
    dir.write("theory/conditional.csv", conditional.to_csv())?;
    dir.write(
        "theory/inpainting.csv",
        format!(
            "wins,trials,win_rate,mean_masked,mean_unmasked\n{},{},{},{},{}\n",
            inpainting.wins,
            inpainting.trials,
            inpainting.win_rate(),
            inpainting.mean_masked,
            inpainting.mean_unmasked
        ),
    )?;
    dir.write(
        "theory/checks.json",
        serde_json::to_string_pretty(&checks).expect("serializes") + "\n",
    )?;
    dir.write("theory/summary.txt", &summary)?;
    Ok(TheoryOutcome {
        checks,
        kl,
        bounds,
        conditional,
        inpainting,
        summary,
    })
}
