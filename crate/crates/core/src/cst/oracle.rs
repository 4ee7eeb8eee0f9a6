//! Brute-force reference for `GroupDraftIndex::speculate_with`.
//!
//! Counts come from scanning every window of every sequence and path scores
//! are kept as exact reduced fractions built step by step, so this shares
//! neither the automaton nor the telescoped score shortcut with the index.

use std::cmp::Ordering;

use super::{Cutoffs, DraftCandidate, SpeculationArgs};
use crate::workload::TokenId;

fn count(sequences: &[Vec<TokenId>], s: &[TokenId]) -> u32 {
    sequences
        .iter()
        .map(|seq| {
            if s.len() > seq.len() {
                0
            } else {
                seq.windows(s.len()).filter(|w| *w == s).count() as u32
            }
        })
        .sum()
}

/// Distinct tokens that follow an occurrence of `s`, ascending.
fn followers(sequences: &[Vec<TokenId>], s: &[TokenId]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    for seq in sequences {
        for i in 0..seq.len() {
            if i + s.len() < seq.len() && seq[i..i + s.len()] == *s {
                out.push(seq[i + s.len()]);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
struct Path {
    tokens: Vec<TokenId>,
    num: u128,
    den: u128,
    support: u32,
}

impl Path {
    fn step(&self, t: TokenId, child: u32, parent: u32) -> Path {
        let (mut num, mut den) = (self.num * child as u128, self.den * parent as u128);
        let g = gcd(num, den);
        num /= g;
        den /= g;
        let mut tokens = self.tokens.clone();
        tokens.push(t);
        Path { tokens, num, den, support: child }
    }
}

fn order(a: &Path, b: &Path) -> Ordering {
    // score desc, support desc, tokens asc
    (b.num * a.den)
        .cmp(&(a.num * b.den))
        .then(b.support.cmp(&a.support))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn admissible(child: u32, parent: u32, cutoffs: &Cutoffs) -> bool {
    child >= cutoffs.min_support && (child as f64) >= cutoffs.min_step_freq * parent as f64
}

/// Draft candidates computed by exhaustive search over explicit sequences.
pub fn speculate_oracle(
    sequences: &[Vec<TokenId>],
    pattern: &[TokenId],
    args: &SpeculationArgs,
    cutoffs: &Cutoffs,
) -> Vec<DraftCandidate> {
    if args.max_spec_tokens == 0 || args.top_k == 0 || args.pattern_lookup_min == 0 {
        return Vec::new();
    }
    let longest = pattern.len().min(args.pattern_lookup_max as usize);
    let min = args.pattern_lookup_min as usize;
    let mut anchor: Option<&[TokenId]> = None;
    let mut len = longest;
    while len >= min && len > 0 {
        let suffix = &pattern[pattern.len() - len..];
        if !followers(sequences, suffix).is_empty() {
            anchor = Some(suffix);
            break;
        }
        len -= 1;
    }
    let Some(anchor) = anchor else {
        return Vec::new();
    };
    let k = args.top_k as usize;

    let mut live = vec![Path { tokens: Vec::new(), num: 1, den: 1, support: count(sequences, anchor) }];
    let mut done: Vec<Path> = Vec::new();
    for _ in 0..args.max_spec_tokens {
        let mut ext = Vec::new();
        for p in &live {
            let ctx: Vec<TokenId> = anchor.iter().chain(p.tokens.iter()).copied().collect();
            let parent = count(sequences, &ctx);
            let mut extended = false;
            for t in followers(sequences, &ctx) {
                let mut c = ctx.clone();
                c.push(t);
                let child = count(sequences, &c);
                if admissible(child, parent, cutoffs) {
                    ext.push(p.step(t, child, parent));
                    extended = true;
                }
            }
            if !extended && !p.tokens.is_empty() {
                done.push(p.clone());
            }
        }
        ext.sort_by(order);
        ext.truncate(k);
        live = ext;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(order);
    done.truncate(k);
    done.into_iter()
        .map(|p| DraftCandidate { score: p.num as f64 / p.den as f64, support: p.support, tokens: p.tokens })
        .collect()
}
