//! Corpus layout inside a run directory:
//!
//! ```text
//! corpus/manifest.json
//! corpus/stories/story_0001/{frame_001.pgm, …, conditions.txt}
//! corpus/videos/video_0001/…
//! ```

use acdc_core::experiment::io::{read_frames, write_story};
use acdc_core::experiment::{Corpora, Story, StorySpec};
use acdc_core::memory::AttrId;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::rundir::RunDir;

pub const MANIFEST: &str = "corpus/manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryEntry {
    pub dir: String,
    pub seed: u64,
    pub character: AttrId,
    pub background: AttrId,
    pub motions: Vec<AttrId>,
    pub positions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus_hash: String,
    pub master_seed: u64,
    pub spec: StorySpec,
    pub stories: Vec<StoryEntry>,
    pub videos: Vec<StoryEntry>,
}

fn entry(dir: String, s: &Story) -> StoryEntry {
    StoryEntry {
        dir,
        seed: s.seed,
        character: s.character,
        background: s.background,
        motions: s.motions.clone(),
        positions: s.positions.clone(),
    }
}

pub fn story_dir(k: usize) -> String {
    format!("story_{:04}", k + 1)
}

pub fn video_dir(k: usize) -> String {
    format!("video_{:04}", k + 1)
}

pub fn write_corpus(dir: &RunDir, cfg: &RunConfig, corpora: &Corpora) -> Result<Manifest> {
    let mut stories = Vec::with_capacity(corpora.stories.len());
    for (k, s) in corpora.stories.iter().enumerate() {
        let rel = format!("stories/{}", story_dir(k));
        write_story(&dir.path(&format!("corpus/{rel}")), s)?;
        stories.push(entry(rel, s));
    }
    let mut videos = Vec::with_capacity(corpora.videos.len());
    for (k, v) in corpora.videos.iter().enumerate() {
        let rel = format!("videos/{}", video_dir(k));
        write_story(&dir.path(&format!("corpus/{rel}")), v)?;
        videos.push(entry(rel, v));
    }
    let manifest = Manifest {
        corpus_hash: cfg.corpus_hash(),
        master_seed: cfg.seed,
        spec: cfg.experiment.story.clone(),
        stories,
        videos,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    dir.write(MANIFEST, json + "\n")?;
    Ok(manifest)
}

fn load_entry(dir: &RunDir, e: &StoryEntry) -> Result<Story> {
    let (frames, conditions) = read_frames(&dir.path(&format!("corpus/{}", e.dir)))?;
    if frames.len() != e.motions.len() {
        return Err(CliError::Stale(format!("corpus/{} does not match the manifest", e.dir)));
    }
    Ok(Story {
        seed: e.seed,
        character: e.character,
        background: e.background,
        motions: e.motions.clone(),
        positions: e.positions.clone(),
        conditions,
        frames,
    })
}

/// Reads the corpus back, checking that it was generated from `cfg`.
pub fn load_corpus(dir: &RunDir, cfg: &RunConfig) -> Result<Corpora> {
    if !dir.exists(MANIFEST) {
        return Err(CliError::NotFound(format!(
            "no corpus in {} (run `acdc gen-data` first)",
            dir.root().display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&dir.read_to_string(MANIFEST)?)
        .map_err(|e| CliError::Stale(format!("{MANIFEST}: {e}")))?;
    if manifest.corpus_hash != cfg.corpus_hash() {
        return Err(CliError::Stale(
            "the corpus was generated from a different configuration; rerun `acdc gen-data`".into(),
        ));
    }
    Ok(Corpora {
        stories: manifest.stories.iter().map(|e| load_entry(dir, e)).collect::<Result<_>>()?,
        videos: manifest.videos.iter().map(|e| load_entry(dir, e)).collect::<Result<_>>()?,
    })
}
