//! Smoothed order-k autoregressive model over token chunks.
//!
//! Chunk `i` is sampled position by position from
//! `p(v | context) = (c(context, v) + α) / (c(context) + K α)`, where the context is a
//! hash of the condition history `u^{1:i}`, the token position and the previous `k`
//! chunks (either whole, or only their tokens at the same position).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::memory::ConditionRecord;
use crate::tokenizer::{Token, TokenChunk};

const ARM_MAGIC: &str = "acdc-arm v1";
const PAD: u16 = u16::MAX;

/// Which part of the previous chunks enters the context of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryScope {
    /// Only the tokens at the same position in the previous `k` chunks.
    #[default]
    Position,
    /// The previous `k` chunks in full.
    Chunk,
}

impl HistoryScope {
    fn name(self) -> &'static str {
        match self {
            HistoryScope::Position => "position",
            HistoryScope::Chunk => "chunk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub order: usize,
    pub smoothing: f64,
    pub scope: HistoryScope,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            order: 2,
            smoothing: 1e-3,
            scope: HistoryScope::Position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            top_k: usize::MAX,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(invalid("sampler needs top_k >= 1 and a finite temperature >= 0"));
        }
        Ok(())
    }
}

/// One training sequence: chunks with their per-chunk conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub chunks: Vec<TokenChunk>,
    pub conditions: Vec<ConditionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSequenceModel {
    cfg: ArmConfig,
    vocab: usize,
    chunk_len: usize,
    table: HashMap<u64, Vec<(Token, u32)>>,
}

fn fnv1a(words: &[u16]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl ChunkSequenceModel {
    /// Context words for position `j` of the chunk following `history`.
    fn context(&self, history: &[TokenChunk], conds: &[ConditionRecord], j: usize) -> Vec<u16> {
        let mut key = Vec::with_capacity(4 + 3 * conds.len() + self.cfg.order * self.chunk_len);
        key.push(conds.len() as u16);
        for c in conds {
            key.extend(c.encoded());
        }
        key.push(j as u16);
        for back in 1..=self.cfg.order {
            let prev = history.len().checked_sub(back).map(|i| &history[i]);
            match (self.cfg.scope, prev) {
                (HistoryScope::Position, Some(c)) => key.push(c.0[j]),
                (HistoryScope::Position, None) => key.push(PAD),
                (HistoryScope::Chunk, Some(c)) => key.extend(&c.0),
                (HistoryScope::Chunk, None) => key.extend(std::iter::repeat_n(PAD, self.chunk_len)),
            }
        }
        key
    }

    /// Fits the count table over every chunk of every sequence (earlier chunks see a
    /// padded history). Rejects hash collisions between distinct contexts.
    pub fn fit(corpus: &[TrainingSequence], vocab: usize, cfg: ArmConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid("ARM fit needs a non-empty corpus"));
        }
        if !(cfg.smoothing > 0.0) || vocab < 2 || vocab > PAD as usize {
            return Err(invalid("ARM needs smoothing > 0 and 2 <= K < 65535"));
        }
        let chunk_len = corpus
            .iter()
            .flat_map(|s| s.chunks.first())
            .map(|c| c.len())
            .next()
            .ok_or_else(|| invalid("ARM corpus holds no chunks"))?;
        let mut model = Self {
            cfg,
            vocab,
            chunk_len,
            table: HashMap::new(),
        };
        let mut keys: HashMap<u64, Vec<u16>> = HashMap::new();
        let mut counts: HashMap<u64, BTreeMap<Token, u32>> = HashMap::new();
        for seq in corpus {
            if seq.chunks.len() != seq.conditions.len() {
                return Err(invalid("each training chunk needs exactly one condition"));
            }
            for (i, chunk) in seq.chunks.iter().enumerate() {
                if chunk.len() != chunk_len {
                    return Err(invalid("training chunks differ in length"));
                }
                for (j, &tok) in chunk.0.iter().enumerate() {
                    if tok as usize >= vocab {
                        return Err(invalid(format!("token {tok} out of range for K = {vocab}")));
                    }
                    let key = model.context(&seq.chunks[..i], &seq.conditions[..=i], j);
                    let h = fnv1a(&key);
                    match keys.get(&h) {
                        Some(k) if *k != key => {
                            return Err(invalid(format!("context hash collision on {h:#018x}")))
                        }
                        Some(_) => {}
                        None => {
                            keys.insert(h, key);
                        }
                    }
                    *counts.entry(h).or_default().entry(tok).or_insert(0) += 1;
                }
            }
        }
        model.table = counts
            .into_iter()
            .map(|(h, c)| (h, c.into_iter().collect()))
            .collect();
        Ok(model)
    }

    pub fn config(&self) -> ArmConfig {
        self.cfg
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn n_contexts(&self) -> usize {
        self.table.len()
    }

    /// Smoothed conditional distribution of the token at position `j` of chunk
    /// `history.len()`; `conds` is the condition history including that chunk's.
    pub fn distribution(&self, history: &[TokenChunk], conds: &[ConditionRecord], j: usize) -> Vec<f64> {
        let a = self.cfg.smoothing;
        let mut p = vec![a; self.vocab];
        let mut total = 0.0;
        if let Some(entry) = self.table.get(&fnv1a(&self.context(history, conds, j))) {
            for &(tok, c) in entry {
                p[tok as usize] += c as f64;
                total += c as f64;
            }
        }
        let z = total + a * self.vocab as f64;
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    /// Samples the next chunk given `history` and the condition history `conds`
    /// (one record per chunk, the last for the chunk being sampled).
    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        history: &[TokenChunk],
        conds: &[ConditionRecord],
        sc: &SamplerConfig,
        rng: &mut R,
    ) -> Result<TokenChunk> {
        sc.validate()?;
        if conds.len() != history.len() + 1 {
            return Err(invalid(format!(
                "condition history has {} records for {} chunks of history",
                conds.len(),
                history.len()
            )));
        }
        if history.iter().any(|c| c.len() != self.chunk_len) {
            return Err(invalid("history chunk length does not match the model"));
        }
        let tokens = (0..self.chunk_len)
            .map(|j| {
                let p = sampling_distribution(&self.distribution(history, conds, j), sc);
                draw(&p, rng) as Token
            })
            .collect();
        Ok(TokenChunk(tokens))
    }

    /// Plain text: magic line, `order`, `smoothing`, `scope`, `vocab`, `chunk_len`,
    /// `contexts N`, then one line per context sorted by hash:
    /// `<hash hex> <token>:<count> ...`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{ARM_MAGIC}").ok();
        writeln!(out, "order {}", self.cfg.order).ok();
        writeln!(out, "smoothing {:?}", self.cfg.smoothing).ok();
        writeln!(out, "scope {}", self.cfg.scope.name()).ok();
        writeln!(out, "vocab {}", self.vocab).ok();
        writeln!(out, "chunk_len {}", self.chunk_len).ok();
        writeln!(out, "contexts {}", self.table.len()).ok();
        let mut hashes: Vec<&u64> = self.table.keys().collect();
        hashes.sort();
        for h in hashes {
            write!(out, "{h:016x}").ok();
            for (tok, c) in &self.table[h] {
                write!(out, " {tok}:{c}").ok();
            }
            out.push('\n');
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |d: String| format_err("ARM table", d);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != ARM_MAGIC {
            return Err(bad("missing header".into()));
        }
        let mut header = |key: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}`")));
        let order = num(header("order")?)?;
        let smoothing: f64 = header("smoothing")?
            .parse()
            .map_err(|_| bad("bad smoothing".into()))?;
        let scope = match header("scope")?.as_str() {
            "position" => HistoryScope::Position,
            "chunk" => HistoryScope::Chunk,
            other => return Err(bad(format!("unknown scope `{other}`"))),
        };
        let vocab = num(header("vocab")?)?;
        let chunk_len = num(header("chunk_len")?)?;
        let n = num(header("contexts")?)?;
        let mut table = HashMap::with_capacity(n);
        for _ in 0..n {
            let line = next()?;
            let mut parts = line.split_whitespace();
            let h = parts
                .next()
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .ok_or_else(|| bad(format!("bad context line `{line}`")))?;
            let mut entry = Vec::new();
            for p in parts {
                let (t, c) = p
                    .split_once(':')
                    .and_then(|(t, c)| Some((t.parse::<Token>().ok()?, c.parse::<u32>().ok()?)))
                    .ok_or_else(|| bad(format!("bad count `{p}`")))?;
                if t as usize >= vocab {
                    return Err(bad(format!("token {t} out of range")));
                }
                entry.push((t, c));
            }
            table.insert(h, entry);
        }
        Ok(Self {
            cfg: ArmConfig {
                order,
                smoothing,
                scope,
            },
            vocab,
            chunk_len,
            table,
        })
    }
}

/// Applies temperature, then top-k truncation (ties to the lowest id), then
/// renormalisation. Temperature 0 puts all mass on the argmax.
pub fn sampling_distribution(p: &[f64], sc: &SamplerConfig) -> Vec<f64> {
    let argmax = p
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
    if sc.temperature == 0.0 || sc.top_k == 1 {
        let mut out = vec![0.0; p.len()];
        out[argmax] = 1.0;
        return out;
    }
    // Tempering in log space keeps tiny probabilities from underflowing first.
    let inv_t = 1.0 / sc.temperature;
    let logs: Vec<f64> = p.iter().map(|v| v.ln() * inv_t).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    if sc.top_k < q.len() {
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
        for &i in &order[sc.top_k..] {
            q[i] = 0.0;
        }
    }
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    q
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > 0.0 {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Replaces `history[at]` with `replacement`, which must have the same length.
pub fn swap_history(history: &[TokenChunk], replacement: &[TokenChunk], at: Range<usize>) -> Result<Vec<TokenChunk>> {
    if at.start > at.end || at.end > history.len() {
        return Err(invalid(format!(
            "swap range {at:?} outside history of length {}",
            history.len()
        )));
    }
    if replacement.len() != at.len() {
        return Err(invalid("replacement length must equal the swapped range"));
    }
    let mut out = history.to_vec();
    out[at].clone_from_slice(replacement);
    Ok(out)
}

/// Independently replaces each token with a uniform draw over `0..vocab` with
/// probability `rho`. The draw pattern depends only on `rng`, not on token values.
pub fn corrupt_chunk<R: Rng + ?Sized>(chunk: &TokenChunk, vocab: usize, rho: f64, rng: &mut R) -> TokenChunk {
    TokenChunk(
        chunk
            .0
            .iter()
            .map(|&t| {
                let hit = rng.random::<f64>() < rho;
                let fresh = rng.random_range(0..vocab) as Token;
                if hit {
                    fresh
                } else {
                    t
                }
            })
            .collect(),
    )
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::{prop_assert, proptest};

    const K: usize = 8;

    fn cond(c: u16) -> ConditionRecord {
        ConditionRecord::new(c, 0, 0)
    }

    fn random_sequence(len: usize, n: usize, seed: u64) -> TrainingSequence {
        let mut rng = rng_from_seed(seed);
        TrainingSequence {
            chunks: (0..len)
                .map(|_| TokenChunk((0..n).map(|_| rng.random_range(0..K) as Token).collect()))
                .collect(),
            conditions: (0..len).map(|i| cond((i % 2) as u16)).collect(),
        }
    }

    fn conds_for(seq: &TrainingSequence, i: usize) -> &[ConditionRecord] {
        &seq.conditions[..=i]
    }

    #[test]
    fn greedy_sampling_memorises_a_single_sequence() {
        for scope in [HistoryScope::Position, HistoryScope::Chunk] {
            let seq = random_sequence(6, 5, 1);
            let cfg = ArmConfig {
                scope,
                ..Default::default()
            };
            let m = ChunkSequenceModel::fit(std::slice::from_ref(&seq), K, cfg).unwrap();
            let mut hist = Vec::new();
            let mut rng = rng_from_seed(0);
            for i in 0..6 {
                let c = m
                    .sample_chunk(&hist, conds_for(&seq, i), &SamplerConfig::greedy(), &mut rng)
                    .unwrap();
                assert_eq!(c, seq.chunks[i]);
                hist.push(c);
            }
        }
    }

    #[test]
    fn first_chunk_distribution_is_smoothed_marginal() {
        let corpus: Vec<_> = (0..30).map(|s| {
            let mut seq = random_sequence(3, 4, s);
            seq.conditions = vec![cond(0); 3];
            seq
        }).collect();
        let m = ChunkSequenceModel::fit(&corpus, K, ArmConfig::default()).unwrap();
        for j in 0..4 {
            let mut counts = [0.0; K];
            for s in &corpus {
                counts[s.chunks[0].0[j] as usize] += 1.0;
            }
            let p = m.distribution(&[], &[cond(0)], j);
            for v in 0..K {
                let oracle = (counts[v] + 1e-3) / (30.0 + K as f64 * 1e-3);
                assert!((p[v] - oracle).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_corpus_keeps_count_ratios() {
        let corpus: Vec<_> = (0..5).map(|s| random_sequence(4, 3, s)).collect();
        let doubled: Vec<_> = corpus.iter().chain(&corpus).cloned().collect();
        let a = ChunkSequenceModel::fit(&corpus, K, ArmConfig::default()).unwrap();
        let b = ChunkSequenceModel::fit(&doubled, K, ArmConfig::default()).unwrap();
        assert_eq!(a.n_contexts(), b.n_contexts());
        for (h, entry) in &a.table {
            let total: u32 = entry.iter().map(|(_, c)| c).sum();
            let total_b: u32 = b.table[h].iter().map(|(_, c)| c).sum();
            for ((ta, ca), (tb, cb)) in entry.iter().zip(&b.table[h]) {
                assert_eq!(ta, tb);
                assert_eq!(*ca as f64 / total as f64, *cb as f64 / total_b as f64);
            }
        }
    }

    #[test]
    fn distributions_are_normalised() {
        let corpus: Vec<_> = (0..5).map(|s| random_sequence(4, 3, s)).collect();
        let m = ChunkSequenceModel::fit(&corpus, K, ArmConfig::default()).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let hist: Vec<TokenChunk> = (0..rng.random_range(0..4))
                .map(|_| TokenChunk((0..3).map(|_| rng.random_range(0..K) as Token).collect()))
                .collect();
            let conds = vec![cond(rng.random_range(0..2)); hist.len() + 1];
            for j in 0..3 {
                let p = m.distribution(&hist, &conds, j);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|v| *v >= 0.0));
                for t in [0.3, 1.0, 2.0] {
                    for top_k in [1, 3, K] {
                        let q = sampling_distribution(&p, &SamplerConfig { temperature: t, top_k });
                        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        assert_eq!(q.iter().filter(|v| **v > 0.0).count() <= top_k, true);
                    }
                }
            }
        }
    }

    #[test]
    fn greedy_limits_agree() {
        let p = [0.1, 0.3, 0.3, 0.2, 0.1];
        let t0 = sampling_distribution(&p, &SamplerConfig { temperature: 0.0, top_k: 5 });
        let k1 = sampling_distribution(&p, &SamplerConfig { temperature: 1.0, top_k: 1 });
        assert_eq!(t0, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t0, k1);
        let k2 = sampling_distribution(&p, &SamplerConfig { temperature: 1.0, top_k: 2 });
        assert_eq!(k2, vec![0.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = ChunkSequenceModel::fit(&[random_sequence(3, 2, 1)], K, ArmConfig::default()).unwrap();
        let conds = [cond(9)];
        let p = m.distribution(&[], &conds, 0);
        assert!(p.iter().all(|v| (v - 1.0 / K as f64).abs() < 1e-15));
        let sc = SamplerConfig {
            temperature: 1.0,
            top_k: K,
        };
        let mut rng = rng_from_seed(4);
        let n = 10_000;
        let mut counts = [0.0; K];
        for _ in 0..n / 2 {
            for t in m.sample_chunk(&[], &conds, &sc, &mut rng).unwrap().0 {
                counts[t as usize] += 1.0;
            }
        }
        let e = n as f64 / K as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 99th percentile of chi-square with 7 degrees of freedom.
        assert!(chi2 < 18.475, "chi2 {chi2}");
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..K).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let mut prev = 0.0;
            for t in [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0] {
                let h = entropy(&sampling_distribution(&p, &SamplerConfig { temperature: t, top_k: K }));
                assert!(h >= prev - 1e-12);
                prev = h;
            }
        }
    }

    #[test]
    fn swap_history_semantics() {
        let seq = random_sequence(5, 4, 7);
        let corpus: Vec<_> = (0..10).map(|s| random_sequence(5, 4, s)).collect();
        let m = ChunkSequenceModel::fit(&corpus, K, ArmConfig { scope: HistoryScope::Chunk, ..Default::default() }).unwrap();
        let h = &seq.chunks[..4];
        assert_eq!(swap_history(h, &[], 2..2).unwrap(), h.to_vec());
        assert_eq!(swap_history(h, &h[1..3], 1..3).unwrap(), h.to_vec());
        assert!(swap_history(h, &h[..2], 3..5).is_err());
        assert!(swap_history(h, &h[..1], 0..2).is_err());

        let replacement = vec![corpus[3].chunks[0].clone(), corpus[3].chunks[1].clone()];
        let swapped = swap_history(h, &replacement, 0..2).unwrap();
        let conds = &seq.conditions[..5];
        for j in 0..4 {
            let direct = {
                let manual: Vec<TokenChunk> = replacement.iter().chain(&h[2..]).cloned().collect();
                m.distribution(&manual, conds, j)
            };
            assert_eq!(m.distribution(&swapped, conds, j), direct);
        }
    }

    #[test]
    fn corruption_rate_zero_and_one() {
        let mut rng = rng_from_seed(1);
        let c = TokenChunk(vec![3; 1000]);
        assert_eq!(corrupt_chunk(&c, K, 0.0, &mut rng), c);
        let all = corrupt_chunk(&c, K, 1.0, &mut rng);
        let changed = all.0.iter().filter(|t| **t != 3).count() as f64 / 1000.0;
        assert!((changed - 7.0 / 8.0).abs() < 0.05);
    }

    #[test]
    fn table_round_trip() {
        let corpus: Vec<_> = (0..4).map(|s| random_sequence(3, 4, s)).collect();
        let m = ChunkSequenceModel::fit(&corpus, K, ArmConfig::default()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(ChunkSequenceModel::read_from(&buf[..]).unwrap(), m);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ChunkSequenceModel::fit(&[], K, ArmConfig::default()).is_err());
        let m = ChunkSequenceModel::fit(&[random_sequence(3, 4, 1)], K, ArmConfig::default()).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(m.sample_chunk(&[], &[], &SamplerConfig::default(), &mut rng).is_err());
        let bad = SamplerConfig { temperature: 1.0, top_k: 0 };
        assert!(m.sample_chunk(&[], &[cond(0)], &bad, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn sampled_tokens_are_in_range(seed in 0u64..1000, t in 0.0f64..3.0) {
            let m = ChunkSequenceModel::fit(&[random_sequence(3, 4, seed)], K, ArmConfig::default()).unwrap();
            let mut rng = rng_from_seed(seed);
            let c = m.sample_chunk(&[], &[cond(0)], &SamplerConfig { temperature: t, top_k: 3 }, &mut rng).unwrap();
            prop_assert!(c.0.iter().all(|v| (*v as usize) < K));
        }
    }
}
