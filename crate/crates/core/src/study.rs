//! Offline acceptance-length study over a grouped corpus.
//!
//! Each target response is decoded against an index holding `n` other full
//! responses of its group plus its own growing output, so `n = 0` measures
//! plain self-history lookup. Every step drafts from the index, verifies
//! against the target, and appends the emitted tokens to the target's stream.

use serde::Serialize;

use crate::cst::{Cutoffs, GroupDraftIndex, SpeculationArgs};
use crate::engine::verify;
use crate::error::{Error, Result};
use crate::workload::PromptGroup;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub reference_counts: Vec<usize>,
    pub top_ks: Vec<u32>,
    pub max_draft: u32,
    pub pattern_lookup_min: u32,
    pub pattern_lookup_max: u32,
    pub cutoffs: Cutoffs,
    /// Targets decoded per group, taken in member order.
    pub targets_per_group: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            reference_counts: vec![0, 1, 5, 15],
            top_ks: vec![1, 2, 4],
            max_draft: 8,
            pattern_lookup_min: 1,
            pattern_lookup_max: 16,
            cutoffs: Cutoffs::default(),
            targets_per_group: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyCell {
    pub references: usize,
    pub top_k: u32,
    pub steps: u64,
    pub emitted: u64,
    /// Emitted tokens per step, bonus token included.
    pub acceptance_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub cells: Vec<StudyCell>,
}

impl StudyTable {
    pub fn get(&self, references: usize, top_k: u32) -> Option<f64> {
        self.cells.iter().find(|c| c.references == references && c.top_k == top_k).map(|c| c.acceptance_length)
    }
}

pub fn acceptance_study(groups: &[PromptGroup], config: &StudyConfig) -> Result<StudyTable> {
    let max_refs = config.reference_counts.iter().copied().max().unwrap_or(0);
    if let Some(g) = groups.iter().find(|g| g.outputs.len() <= max_refs) {
        return Err(Error::Config(format!(
            "group {} has {} responses; {} references need at least {}",
            g.group_id,
            g.outputs.len(),
            max_refs,
            max_refs + 1
        )));
    }
    let mut cells = Vec::new();
    for &n in &config.reference_counts {
        for &k in &config.top_ks {
            let args = SpeculationArgs {
                max_spec_tokens: config.max_draft,
                pattern_lookup_max: config.pattern_lookup_max,
                pattern_lookup_min: config.pattern_lookup_min,
                top_k: k,
            };
            args.validate()?;
            let (mut steps, mut emitted) = (0u64, 0u64);
            for g in groups {
                for target in 0..config.targets_per_group.min(g.outputs.len()) {
                    let (s, e) = decode_one(g, target, n, &args, &config.cutoffs)?;
                    steps += s;
                    emitted += e;
                }
            }
            let acceptance_length = if steps == 0 { 0.0 } else { emitted as f64 / steps as f64 };
            cells.push(StudyCell { references: n, top_k: k, steps, emitted, acceptance_length });
        }
    }
    Ok(StudyTable { cells })
}

fn decode_one(
    g: &PromptGroup,
    target: usize,
    references: usize,
    args: &SpeculationArgs,
    cutoffs: &Cutoffs,
) -> Result<(u64, u64)> {
    let mut idx = GroupDraftIndex::new(g.group_id.clone());
    let others = (0..g.outputs.len()).filter(|&i| i != target).take(references);
    for i in others {
        idx.append(i as u32, 0, g.outputs[i].as_slice())?;
    }
    let truth = g.outputs[target].as_slice();
    let own = target as u32;
    let (mut pos, mut steps) = (0usize, 0u64);
    while pos < truth.len() {
        let from = pos.saturating_sub(args.pattern_lookup_max as usize);
        let paths = idx.speculate_with(&truth[from..pos], args, cutoffs);
        let (_, e) = verify(&paths, &truth[pos..], u32::MAX);
        idx.append(own, pos as u32, &truth[pos..pos + e as usize])?;
        pos += e as usize;
        steps += 1;
    }
    Ok((steps, truth.len() as u64))
}
