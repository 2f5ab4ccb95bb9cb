#![allow(dead_code)]

use acdc_core::exec::Exec;
use acdc_core::experiment::{Corpora, ExperimentConfig, ModelBundle, ReferenceSets};
use acdc_core::sde::Schedule;

pub const SEED: u64 = 11;

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub corpora: Corpora,
    pub bundle: ModelBundle,
    pub refs: ReferenceSets,
    pub schedule: Schedule,
}

pub fn fixture() -> Fixture {
    let mut cfg = ExperimentConfig::default();
    cfg.n_stories = 80;
    cfg.n_eval = 12;
    cfg.video.n_videos = 60;
    cfg.video.n_eval = 12;
    cfg.correction.solver.n_steps = 25;
    let schedule = Schedule::default();
    let corpora = Corpora::generate(&cfg, SEED).unwrap();
    let bundle = ModelBundle::fit(&cfg, &corpora.stories, &corpora.videos, schedule, SEED, Exec::Sequential).unwrap();
    let mut all = corpora.stories.clone();
    all.extend(corpora.videos.iter().cloned());
    let refs = ReferenceSets::new(&all);
    Fixture {
        cfg,
        corpora,
        bundle,
        refs,
        schedule,
    }
}
