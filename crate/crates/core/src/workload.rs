//! Rollout data model: prompt groups, synthetic workload generation, trace
//! files, group advantages and length statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Ground-truth output tokens of one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

/// G responses sampled from one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptGroup {
    pub group_id: String,
    pub prompt_len: u32,
    pub group_size: usize,
    pub outputs: Vec<TokenSequence>,
    pub max_tokens: u32,
}

impl PromptGroup {
    pub fn validate(&self) -> Result<()> {
        if self.outputs.len() != self.group_size {
            return Err(Error::InvalidTrace(format!(
                "group {} declares {} requests but has {}",
                self.group_id,
                self.group_size,
                self.outputs.len()
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidTrace(format!("group {} is empty", self.group_id)));
        }
        for (i, out) in self.outputs.iter().enumerate() {
            if out.is_empty() {
                return Err(Error::InvalidTrace(format!(
                    "group {} request {} has an empty output",
                    self.group_id, i
                )));
            }
            if out.len() > self.max_tokens as usize {
                return Err(Error::InvalidTrace(format!(
                    "group {} request {} has {} tokens, above max_tokens {}",
                    self.group_id,
                    i,
                    out.len(),
                    self.max_tokens
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthFamily {
    /// `location` = mu, `scale` = sigma of the underlying normal.
    Lognormal,
    /// `location` = minimum value x_m, `scale` = tail index alpha.
    Pareto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthModel {
    pub family: LengthFamily,
    pub location: f64,
    pub scale: f64,
    /// rho_len in [0, 1]; 1 means every member of a group has the group length.
    pub group_correlation: f64,
    /// Standard deviation of the multiplicative member noise at rho_len = 0.
    #[serde(default = "default_spread_base")]
    pub spread_base: f64,
}

fn default_spread_base() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLenModel {
    pub mean: f64,
    /// Relative half-width of the uniform prompt length distribution.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub num_groups: usize,
    pub group_size: usize,
    pub length_model: LengthModel,
    /// rho_pat in [0, 1]: probability that a member keeps the group template token.
    pub pattern_similarity: f64,
    /// Probability that the group template starts copying an earlier phrase
    /// of itself at a given position. Gives each response some self-repetition.
    #[serde(default)]
    pub template_repeat: f64,
    pub vocab_size: u32,
    pub max_tokens: u32,
    pub prompt_len_model: PromptLenModel,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            num_groups: 40,
            group_size: 8,
            length_model: LengthModel {
                family: LengthFamily::Lognormal,
                location: 7.0,
                scale: 1.0,
                group_correlation: 0.7,
                spread_base: default_spread_base(),
            },
            pattern_similarity: 0.6,
            template_repeat: 0.0,
            vocab_size: 4096,
            max_tokens: 8192,
            prompt_len_model: PromptLenModel { mean: 256.0, spread: 0.5 },
            seed: 0,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
    }
    Ok(())
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("length_model.group_correlation", self.length_model.group_correlation)?;
        unit_interval("pattern_similarity", self.pattern_similarity)?;
        unit_interval("template_repeat", self.template_repeat)?;
        if self.num_groups == 0 || self.group_size == 0 || self.max_tokens == 0 {
            return Err(Error::Config("num_groups, group_size and max_tokens must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        let lm = &self.length_model;
        if !lm.location.is_finite() || !lm.scale.is_finite() || lm.scale <= 0.0 {
            return Err(Error::Config(format!(
                "length model needs finite location and positive scale, got ({}, {})",
                lm.location, lm.scale
            )));
        }
        if lm.family == LengthFamily::Pareto && lm.location <= 0.0 {
            return Err(Error::Config("pareto location (x_min) must be positive".into()));
        }
        if !(lm.spread_base >= 0.0) || !lm.spread_base.is_finite() {
            return Err(Error::Config("spread_base must be finite and >= 0".into()));
        }
        let p = &self.prompt_len_model;
        if !(p.mean >= 1.0) || !(0.0..=1.0).contains(&p.spread) {
            return Err(Error::Config(format!(
                "prompt length model needs mean >= 1 and spread in [0, 1], got ({}, {})",
                p.mean, p.spread
            )));
        }
        Ok(())
    }
}

enum LengthSampler {
    Lognormal(LogNormal<f64>),
    Pareto(Pareto<f64>),
}

impl LengthSampler {
    fn new(m: &LengthModel) -> Result<Self> {
        Ok(match m.family {
            LengthFamily::Lognormal => LengthSampler::Lognormal(
                LogNormal::new(m.location, m.scale).map_err(|e| Error::Config(e.to_string()))?,
            ),
            LengthFamily::Pareto => LengthSampler::Pareto(
                Pareto::new(m.location, m.scale).map_err(|e| Error::Config(e.to_string()))?,
            ),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LengthSampler::Lognormal(d) => d.sample(rng),
            LengthSampler::Pareto(d) => d.sample(rng),
        }
    }
}

const LENGTH_STREAM: u64 = u64::MAX;

/// `(prompt_len, member lengths)` for every group, exactly as
/// [`generate_workload`] draws them. Uses its own random stream so that the
/// length structure does not depend on the pattern parameters.
pub fn generate_lengths(config: &WorkloadConfig) -> Result<Vec<(u32, Vec<u32>)>> {
    let sampler = LengthSampler::new(&config.length_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(LENGTH_STREAM);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise_scale =
        (1.0 - config.length_model.group_correlation) * config.length_model.spread_base;
    let p = &config.prompt_len_model;
    let mut out = Vec::with_capacity(config.num_groups);
    for _ in 0..config.num_groups {
        let target = sampler.sample(&mut rng);
        let u: f64 = rng.gen();
        let prompt = (p.mean * (1.0 + p.spread * (2.0 * u - 1.0))).round().max(1.0) as u32;
        let lens = (0..config.group_size)
            .map(|_| {
                let z: f64 = std_normal.sample(&mut rng);
                let len = (target * (1.0 + noise_scale * z)).round();
                len.clamp(1.0, config.max_tokens as f64) as u32
            })
            .collect();
        out.push((prompt, lens));
    }
    Ok(out)
}

fn generate_template(len: usize, config: &WorkloadConfig, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = Vec::with_capacity(len);
    while t.len() < len {
        let copy: f64 = rng.gen();
        if t.len() >= 8 && copy < config.template_repeat {
            // u64 draws: usize sampling differs between 32- and 64-bit targets
            let phrase = (rng.gen_range(4..=16u64) as usize).min(t.len());
            let start = rng.gen_range(0..=(t.len() - phrase) as u64) as usize;
            for i in 0..phrase {
                if t.len() == len {
                    break;
                }
                t.push(t[start + i]);
            }
        } else {
            t.push(rng.gen_range(0..config.vocab_size));
        }
    }
    t
}

/// Generate a synthetic grouped rollout workload.
///
/// Each group draws a target length from the heavy-tailed length model; a
/// member's length is `round(L * (1 + eps))` clamped to `[1, max_tokens]` with
/// `eps ~ N(0, (1 - rho_len) * spread_base)`. Token content copies a per-group
/// template and resamples every position independently with probability
/// `1 - rho_pat`.
pub fn generate_workload(config: &WorkloadConfig) -> Result<Vec<PromptGroup>> {
    config.validate()?;
    let lengths = generate_lengths(config)?;
    let mut groups = Vec::with_capacity(config.num_groups);
    for (g, (prompt_len, lens)) in lengths.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(g as u64);
        let template_len = *lens.iter().max().unwrap_or(&1) as usize;
        let template = generate_template(template_len, config, &mut rng);
        let outputs = lens
            .iter()
            .map(|&len| {
                let toks = template[..len as usize]
                    .iter()
                    .map(|&tok| {
                        let u: f64 = rng.gen();
                        let fresh = rng.gen_range(0..config.vocab_size);
                        if u < 1.0 - config.pattern_similarity {
                            fresh
                        } else {
                            tok
                        }
                    })
                    .collect();
                TokenSequence(toks)
            })
            .collect();
        groups.push(PromptGroup {
            group_id: format!("g{g:05}"),
            prompt_len,
            group_size: config.group_size,
            outputs,
            max_tokens: config.max_tokens,
        });
    }
    Ok(groups)
}

/// One line of a trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub group_id: String,
    pub request_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    pub prompt_len: u32,
    pub max_tokens: u32,
    pub output_tokens: Vec<TokenId>,
}

pub fn write_trace<W: Write>(groups: &[PromptGroup], mut w: W) -> Result<()> {
    for g in groups {
        for (i, out) in g.outputs.iter().enumerate() {
            let rec = TraceRecord {
                group_id: g.group_id.clone(),
                request_index: i,
                group_size: Some(g.group_size),
                prompt_len: g.prompt_len,
                max_tokens: g.max_tokens,
                output_tokens: out.0.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_trace(groups: &[PromptGroup], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(groups, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parse a trace from line-delimited JSON records. Lines may appear in any
/// order; groups are returned in order of first appearance.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<PromptGroup>> {
    struct Partial {
        prompt_len: u32,
        max_tokens: u32,
        group_size: Option<usize>,
        members: BTreeMap<usize, Vec<TokenId>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::TraceLine { line: lineno, msg: e.to_string() })?;
        let entry = partial.entry(rec.group_id.clone()).or_insert_with(|| {
            order.push(rec.group_id.clone());
            Partial {
                prompt_len: rec.prompt_len,
                max_tokens: rec.max_tokens,
                group_size: rec.group_size,
                members: BTreeMap::new(),
            }
        });
        if entry.prompt_len != rec.prompt_len || entry.max_tokens != rec.max_tokens {
            return Err(Error::TraceLine {
                line: lineno,
                msg: format!("group {} has inconsistent prompt_len/max_tokens", rec.group_id),
            });
        }
        if rec.group_size.is_some() && entry.group_size.is_some() && rec.group_size != entry.group_size {
            return Err(Error::TraceLine {
                line: lineno,
                msg: format!("group {} has inconsistent group_size", rec.group_id),
            });
        }
        entry.group_size = entry.group_size.or(rec.group_size);
        if entry.members.insert(rec.request_index, rec.output_tokens).is_some() {
            return Err(Error::TraceLine {
                line: lineno,
                msg: format!("duplicate request ({}, {})", rec.group_id, rec.request_index),
            });
        }
    }
    let mut groups = Vec::with_capacity(order.len());
    for id in order {
        let p = partial.remove(&id).expect("group recorded");
        let declared = p
            .group_size
            .unwrap_or_else(|| p.members.keys().next_back().map_or(0, |k| k + 1));
        if p.members.keys().copied().ne(0..p.members.len()) {
            return Err(Error::InvalidTrace(format!(
                "group {id} request indices are not contiguous from 0"
            )));
        }
        let g = PromptGroup {
            group_id: id,
            prompt_len: p.prompt_len,
            group_size: declared,
            outputs: p.members.into_values().map(TokenSequence).collect(),
            max_tokens: p.max_tokens,
        };
        g.validate()?;
        groups.push(g);
    }
    Ok(groups)
}

pub fn load_trace(path: &Path) -> Result<Vec<PromptGroup>> {
    read_trace(BufReader::new(File::open(path)?))
}

/// Stable fingerprint of a trace's content (FNV-1a over the serialized form).
pub fn trace_fingerprint(groups: &[PromptGroup]) -> u64 {
    let mut buf = Vec::new();
    write_trace(groups, &mut buf).expect("in-memory write");
    crate::util::fnv1a(&buf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards(pub Vec<f64>);

/// Group-normalized advantages: `(r_i - mean) / max(std, eps)` with the
/// population standard deviation.
pub fn compute_group_advantages(r: &GroupRewards, eps: f64) -> Result<Vec<f64>> {
    let rewards = &r.0;
    if rewards.is_empty() {
        return Err(Error::EmptyRewards);
    }
    if rewards.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("rewards must be finite".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(eps);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|x| (x - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Inclusive lower bound.
    pub lo: u32,
    /// Exclusive upper bound.
    pub hi: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLengthStats {
    pub group_id: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthSummary {
    pub requests: usize,
    pub histogram: Vec<HistogramBin>,
    pub p50: u32,
    pub p90: u32,
    pub p99: u32,
    pub max: u32,
    pub groups: Vec<GroupLengthStats>,
}

/// Nearest-rank quantile: the value at 1-based rank `ceil(q * n)` of the
/// sorted sample.
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "nearest_rank on empty sample");
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn length_summary(groups: &[PromptGroup]) -> Result<LengthSummary> {
    let mut lens: Vec<u32> = groups
        .iter()
        .flat_map(|g| g.outputs.iter().map(|o| o.len() as u32))
        .collect();
    if lens.is_empty() {
        return Err(Error::Config("length summary of an empty trace".into()));
    }
    lens.sort_unstable();
    let max = *lens.last().unwrap();
    // power-of-two bins [2^k, 2^(k+1))
    let nbins = 32 - max.leading_zeros() as usize;
    let mut histogram: Vec<HistogramBin> = (0..nbins)
        .map(|k| HistogramBin { lo: 1 << k, hi: 1u64 << (k + 1), count: 0 })
        .collect();
    for &l in &lens {
        histogram[31 - l.leading_zeros() as usize].count += 1;
    }
    let groups = groups
        .iter()
        .map(|g| {
            let n = g.outputs.len() as f64;
            let mean = g.outputs.iter().map(|o| o.len() as f64).sum::<f64>() / n;
            let var = g.outputs.iter().map(|o| (o.len() as f64 - mean).powi(2)).sum::<f64>() / n;
            GroupLengthStats { group_id: g.group_id.clone(), mean, std: var.sqrt() }
        })
        .collect();
    Ok(LengthSummary {
        requests: lens.len(),
        histogram,
        p50: nearest_rank(&lens, 0.5),
        p90: nearest_rank(&lens, 0.9),
        p99: nearest_rank(&lens, 0.99),
        max,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(lens: &[usize]) -> PromptGroup {
        PromptGroup {
            group_id: "g".into(),
            prompt_len: 4,
            group_size: lens.len(),
            outputs: lens.iter().map(|&l| TokenSequence(vec![1; l])).collect(),
            max_tokens: 1000,
        }
    }

    #[test]
    fn advantages_two_value_case() {
        let a = compute_group_advantages(&GroupRewards(vec![1.0, 0.0, 1.0, 0.0]), 1e-6).unwrap();
        assert_eq!(a, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn advantages_zero_variance() {
        let a = compute_group_advantages(&GroupRewards(vec![3.5; 6]), 1e-6).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        let a = compute_group_advantages(&GroupRewards(vec![3.5; 2]), 0.0).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn advantages_reject_empty() {
        assert!(matches!(
            compute_group_advantages(&GroupRewards(vec![]), 1e-6),
            Err(Error::EmptyRewards)
        ));
    }

    #[test]
    fn summary_equal_lengths() {
        let s = length_summary(&[group(&[10, 10])]).unwrap();
        assert_eq!((s.p50, s.max), (10, 10));
        assert_eq!(s.groups[0].std, 0.0);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn summary_nearest_rank_median() {
        let s = length_summary(&[group(&[1, 99])]).unwrap();
        assert_eq!(s.max, 99);
        assert_eq!(s.p50, 1);
        assert_eq!(s.histogram[0], HistogramBin { lo: 1, hi: 2, count: 1 });
        assert_eq!(s.histogram[6], HistogramBin { lo: 64, hi: 128, count: 1 });
    }

    #[test]
    fn rejects_out_of_range_correlation() {
        let mut c = WorkloadConfig::default();
        c.length_model.group_correlation = 1.5;
        assert!(matches!(generate_workload(&c), Err(Error::Config(_))));
        let mut c = WorkloadConfig::default();
        c.length_model.scale = -1.0;
        assert!(generate_workload(&c).is_err());
    }

    #[test]
    fn trace_rejects_short_group_and_duplicates() {
        let text = r#"{"group_id":"a","request_index":0,"group_size":2,"prompt_len":3,"max_tokens":10,"output_tokens":[1,2]}
"#;
        assert!(matches!(read_trace(text.as_bytes()), Err(Error::InvalidTrace(_))));

        let dup = r#"{"group_id":"a","request_index":0,"prompt_len":3,"max_tokens":10,"output_tokens":[1]}
{"group_id":"a","request_index":0,"prompt_len":3,"max_tokens":10,"output_tokens":[2]}
"#;
        match read_trace(dup.as_bytes()) {
            Err(Error::TraceLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn trace_malformed_line_reports_number() {
        let text = "{\"group_id\":\"a\",\"request_index\":0,\"prompt_len\":3,\"max_tokens\":10,\"output_tokens\":[1]}\n\nnot json\n";
        match read_trace(text.as_bytes()) {
            Err(Error::TraceLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn empty_trace_is_valid() {
        assert!(read_trace(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn trace_lines_are_order_independent() {
        let text = r#"{"group_id":"b","request_index":1,"prompt_len":3,"max_tokens":10,"output_tokens":[4]}
{"group_id":"a","request_index":0,"prompt_len":2,"max_tokens":10,"output_tokens":[1]}
{"group_id":"b","request_index":0,"prompt_len":3,"max_tokens":10,"output_tokens":[3]}
"#;
        let g = read_trace(text.as_bytes()).unwrap();
        assert_eq!(g[0].group_id, "b");
        assert_eq!(g[0].outputs, vec![TokenSequence(vec![3]), TokenSequence(vec![4])]);
        assert_eq!(g[1].group_size, 1);
    }
}
