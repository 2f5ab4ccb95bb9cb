//! Vector-quantised tokenizer between square grayscale frames and token chunks.
//!
//! A frame of side `frame_side` is cut into non-overlapping `patch_side × patch_side`
//! patches in raster order; each patch maps to its nearest codeword.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::exec::Exec;
use crate::seed::rng_from_seed;
use crate::vecops;

pub type Token = u16;

const CODEBOOK_MAGIC: &str = "acdc-codebook v1";

/// Patch geometry of a square frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub frame_side: usize,
    pub patch_side: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self {
            frame_side: 16,
            patch_side: 4,
        }
    }
}

impl PatchGrid {
    pub fn new(frame_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 || frame_side == 0 || frame_side % patch_side != 0 {
            return Err(invalid(format!(
                "patch side {patch_side} does not tile a frame of side {frame_side}"
            )));
        }
        Ok(Self {
            frame_side,
            patch_side,
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_side * self.frame_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    fn per_row(&self) -> usize {
        self.frame_side / self.patch_side
    }

    /// Tokens per frame.
    pub fn n_patches(&self) -> usize {
        self.per_row() * self.per_row()
    }

    fn check(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.frame_dim() {
            return Err(invalid(format!(
                "frame has {} values, expected {}",
                frame.len(),
                self.frame_dim()
            )));
        }
        Ok(())
    }

    /// Pixel offsets (row-major frame indices) covered by patch `j`.
    fn pixels(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let (pr, pc) = (j / self.per_row(), j % self.per_row());
        let p = self.patch_side;
        (0..p).flat_map(move |r| {
            let row = (pr * p + r) * self.frame_side + pc * p;
            row..row + p
        })
    }

    pub fn patch(&self, frame: &[f64], j: usize) -> Vec<f64> {
        self.pixels(j).map(|i| frame[i]).collect()
    }

    pub fn patches(&self, frame: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(frame)?;
        Ok((0..self.n_patches()).map(|j| self.patch(frame, j)).collect())
    }

    pub fn assemble(&self, patches: &[&[f64]]) -> Vec<f64> {
        let mut frame = vec![0.0; self.frame_dim()];
        for (j, patch) in patches.iter().enumerate() {
            for (i, v) in self.pixels(j).zip(patch.iter()) {
                frame[i] = *v;
            }
        }
        frame
    }
}

/// A frame's worth of codeword indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenChunk(pub Vec<Token>);

impl TokenChunk {
    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    grid: PatchGrid,
    codewords: Vec<Vec<f64>>,
}

/// Index of the nearest codeword; ties go to the lowest index.
fn nearest(codewords: &[Vec<f64>], patch: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codewords.iter().enumerate() {
        let d = vecops::sq_dist(c, patch);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Distinct corpus patches with multiplicities, in first-seen order.
fn distinct_patches(frames: &[Vec<f64>], grid: &PatchGrid) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut patches = Vec::new();
    let mut weights = Vec::new();
    for frame in frames {
        for p in grid.patches(frame)? {
            match index.get(&bits(&p)) {
                Some(&i) => weights[i] += 1.0,
                None => {
                    index.insert(bits(&p), patches.len());
                    patches.push(p);
                    weights.push(1.0);
                }
            }
        }
    }
    Ok((patches, weights))
}

/// k-means++ seeding restricted to patches not yet covered, so codewords are distinct.
fn seed_codewords(patches: &[Vec<f64>], weights: &[f64], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut first = patches.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            first = i;
            break;
        }
        pick -= w;
    }
    let mut chosen = vec![patches[first].clone()];
    let mut d2: Vec<f64> = patches.iter().map(|p| vecops::sq_dist(p, &chosen[0])).collect();
    while chosen.len() < k {
        let mass: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let total: f64 = mass.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut next = None;
        for (i, m) in mass.iter().enumerate() {
            if *m > 0.0 {
                next = Some(i);
                if pick < *m {
                    break;
                }
                pick -= m;
            }
        }
        let next = next.expect("enough distinct patches");
        let c = patches[next].clone();
        for (d, p) in d2.iter_mut().zip(patches) {
            *d = d.min(vecops::sq_dist(p, &c));
        }
        chosen.push(c);
    }
    chosen
}

/// Fits a codebook with `k` codewords by seeded k-means++ and `iters` Lloyd steps.
pub fn fit_codebook(
    frames: &[Vec<f64>],
    grid: PatchGrid,
    k: usize,
    iters: usize,
    seed: u64,
    exec: Exec,
) -> Result<Codebook> {
    Ok(fit_codebook_traced(frames, grid, k, iters, seed, exec)?.0)
}

/// As [`fit_codebook`], also returning the mean squared quantisation error per patch
/// after seeding and after each Lloyd step.
pub fn fit_codebook_traced(
    frames: &[Vec<f64>],
    grid: PatchGrid,
    k: usize,
    iters: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Codebook, Vec<f64>)> {
    if k < 2 || k > Token::MAX as usize {
        return Err(invalid(format!("codebook size {k} out of range")));
    }
    let (patches, weights) = distinct_patches(frames, &grid)?;
    if patches.len() < k {
        return Err(invalid(format!(
            "corpus has {} distinct patches, fewer than K = {k}",
            patches.len()
        )));
    }
    let total_w: f64 = weights.iter().sum();
    let mut codewords = seed_codewords(&patches, &weights, k, seed);
    let assign = |cw: &[Vec<f64>]| exec.map(patches.len(), |i| nearest(cw, &patches[i]));
    let error_of = |a: &[(usize, f64)]| {
        a.iter().zip(&weights).map(|((_, d), w)| d * w).sum::<f64>() / total_w
    };
    let mut assignment = assign(&codewords);
    let mut trace = vec![error_of(&assignment)];
    for _ in 0..iters {
        let p = grid.patch_dim();
        let mut sums = vec![vec![0.0; p]; k];
        let mut mass = vec![0.0; k];
        for ((c, _), (patch, w)) in assignment.iter().zip(patches.iter().zip(&weights)) {
            mass[*c] += w;
            for (s, v) in sums[*c].iter_mut().zip(patch) {
                *s += w * v;
            }
        }
        for c in 0..k {
            if mass[c] == 0.0 {
                continue;
            }
            let centroid: Vec<f64> = sums[c].iter().map(|s| s / mass[c]).collect();
            // Keep codewords distinct: a centroid landing on another codeword is skipped.
            let clash = codewords
                .iter()
                .enumerate()
                .any(|(o, cw)| o != c && bits(cw) == bits(&centroid));
            if !clash {
                codewords[c] = centroid;
            }
        }
        assignment = assign(&codewords);
        trace.push(error_of(&assignment));
    }
    Ok((Codebook { grid, codewords }, trace))
}

impl Codebook {
    pub fn from_codewords(grid: PatchGrid, codewords: Vec<Vec<f64>>) -> Result<Self> {
        if codewords.len() < 2 || codewords.len() > Token::MAX as usize {
            return Err(invalid("codebook needs between 2 and 65535 codewords"));
        }
        if codewords.iter().any(|c| c.len() != grid.patch_dim()) {
            return Err(invalid("codeword length does not match the patch size"));
        }
        let mut seen = std::collections::HashSet::new();
        if !codewords.iter().all(|c| seen.insert(bits(c))) {
            return Err(invalid("codewords must be pairwise distinct"));
        }
        Ok(Self { grid, codewords })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn size(&self) -> usize {
        self.codewords.len()
    }

    pub fn codewords(&self) -> &[Vec<f64>] {
        &self.codewords
    }

    pub fn encode(&self, frame: &[f64]) -> Result<TokenChunk> {
        self.grid.check(frame)?;
        Ok(TokenChunk(
            (0..self.grid.n_patches())
                .map(|j| nearest(&self.codewords, &self.grid.patch(frame, j)).0 as Token)
                .collect(),
        ))
    }

    pub fn decode(&self, chunk: &TokenChunk) -> Result<Vec<f64>> {
        if chunk.len() != self.grid.n_patches() {
            return Err(invalid(format!(
                "chunk has {} tokens, expected {}",
                chunk.len(),
                self.grid.n_patches()
            )));
        }
        let mut patches = Vec::with_capacity(chunk.len());
        for &t in chunk.tokens() {
            let cw = self
                .codewords
                .get(t as usize)
                .ok_or_else(|| invalid(format!("token {t} out of range for K = {}", self.size())))?;
            patches.push(cw.as_slice());
        }
        Ok(self.grid.assemble(&patches))
    }

    /// `decode(encode(frame))`.
    pub fn project(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(frame)?)
    }

    /// Mean squared distance from each corpus patch to its nearest codeword.
    pub fn quantization_error(&self, frames: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for f in frames {
            for p in self.grid.patches(f)? {
                total += nearest(&self.codewords, &p).1;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    /// Plain text: magic line, `frame_side`, `patch_side`, `codewords K`, then one
    /// codeword per line as space-separated round-trip decimals.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CODEBOOK_MAGIC}").ok();
        writeln!(out, "frame_side {}", self.grid.frame_side).ok();
        writeln!(out, "patch_side {}", self.grid.patch_side).ok();
        writeln!(out, "codewords {}", self.codewords.len()).ok();
        for c in &self.codewords {
            let row: Vec<String> = c.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", row.join(" ")).ok();
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |d: String| format_err("codebook", d);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != CODEBOOK_MAGIC {
            return Err(bad("missing header".into()));
        }
        let mut header = |key: &str| -> Result<usize> {
            let line = next()?;
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <n>`, found `{line}`")))
        };
        let frame_side = header("frame_side")?;
        let patch_side = header("patch_side")?;
        let k = header("codewords")?;
        let grid = PatchGrid::new(frame_side, patch_side)?;
        let mut codewords = Vec::with_capacity(k);
        for _ in 0..k {
            let line = next()?;
            let row = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            codewords.push(row);
        }
        Self::from_codewords(grid, codewords)
    }
}
