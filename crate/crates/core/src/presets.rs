//! Named experiment presets shaped after three production rollout tasks.
//!
//! At `scale = 1` a preset has the task's prompts per iteration, responses per
//! prompt, generation limit and instance layout. A smaller scale `s`
//! multiplies every token length (limit, median length, prompt, chunk) and
//! the per-instance KV capacity by `s`, and both the group count and the
//! instance count by `√s`. Groups per instance, requests resident per
//! instance and the ratio of KV demand to capacity stay as at full scale.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::engine::AdaptiveSpecPolicy;
use crate::kvpool::KvParams;
use crate::scheduler::SimParams;
use crate::workload::{LengthFamily, LengthModel, PromptLenModel, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskShape {
    pub name: &'static str,
    pub prompts_per_iteration: usize,
    pub responses_per_prompt: usize,
    pub max_gen_length: u32,
    pub gpus: u32,
    pub gpus_per_instance: u32,
    /// Per-instance KV capacity in tokens at scale 1.
    pub kv_tokens_per_instance: u64,
    pub bytes_per_token: u64,
    pub prompt_mean: f64,
}

pub const TASKS: [TaskShape; 3] = [
    TaskShape {
        name: "moonlight-like",
        prompts_per_iteration: 400,
        responses_per_prompt: 8,
        max_gen_length: 65536,
        gpus: 32,
        gpus_per_instance: 1,
        kv_tokens_per_instance: 400_000,
        bytes_per_token: 70 * 1024,
        prompt_mean: 1024.0,
    },
    TaskShape {
        name: "qwen72b-like",
        prompts_per_iteration: 600,
        responses_per_prompt: 16,
        max_gen_length: 40960,
        gpus: 128,
        gpus_per_instance: 8,
        kv_tokens_per_instance: 1_500_000,
        bytes_per_token: 320 * 1024,
        prompt_mean: 2048.0,
    },
    TaskShape {
        name: "k2-like",
        prompts_per_iteration: 800,
        responses_per_prompt: 8,
        max_gen_length: 98304,
        gpus: 256,
        gpus_per_instance: 32,
        kv_tokens_per_instance: 4_800_000,
        bytes_per_token: 70 * 1024,
        prompt_mean: 1024.0,
    },
];

pub const DEFAULT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: String,
    pub scale: f64,
    pub workload: WorkloadConfig,
    pub sim: SimParams,
}

pub fn task(name: &str) -> Result<&'static TaskShape> {
    TASKS.iter().find(|t| t.name == name).ok_or_else(|| {
        let names: Vec<&str> = TASKS.iter().map(|t| t.name).collect();
        Error::Config(format!("unknown preset '{name}' (known: {})", names.join(", ")))
    })
}

fn scaled(v: f64, scale: f64) -> u32 {
    (v * scale).round().max(1.0) as u32
}

pub fn preset(name: &str, scale: f64, seed: u64) -> Result<Preset> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!("scale must be in (0, 1], got {scale}")));
    }
    let t = task(name)?;
    let root = scale.sqrt();
    let max_tokens = scaled(t.max_gen_length as f64, scale);
    let workload = WorkloadConfig {
        num_groups: ((t.prompts_per_iteration as f64 * root).round() as usize).max(1),
        group_size: t.responses_per_prompt,
        length_model: LengthModel {
            family: LengthFamily::Lognormal,
            // median at a sixth of the limit; a few percent of groups hit it
            location: (t.max_gen_length as f64 * scale / 6.0).ln(),
            scale: 1.0,
            group_correlation: 0.6,
            spread_base: 0.5,
        },
        pattern_similarity: 0.85,
        template_repeat: 0.05,
        vocab_size: 32_000,
        max_tokens,
        prompt_len_model: PromptLenModel { mean: t.prompt_mean * scale, spread: 0.5 },
        seed,
    };
    let kv = KvParams {
        bytes_per_token: t.bytes_per_token,
        instance_capacity_tokens: ((t.kv_tokens_per_instance as f64 * scale).round() as u64).max(1),
        dram_capacity_tokens: ((t.kv_tokens_per_instance as f64 * scale * 8.0).round() as u64).max(1),
        ssd_capacity_tokens: ((t.kv_tokens_per_instance as f64 * scale * 64.0).round() as u64).max(1),
        ..KvParams::default()
    };
    let sim = SimParams {
        instances: ((t.gpus / t.gpus_per_instance) as f64 * root).round().max(1.0) as u32,
        kv,
        chunk_size: scaled(8192.0, scale),
        spec: AdaptiveSpecPolicy { batch_token_budget: 512, per_request_cap: 16, enabled: true, multi_path_k: 4 },
        seed,
        ..SimParams::default()
    };
    Ok(Preset { name: name.to_string(), scale, workload, sim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_matches_task_rows() {
        let m = preset("moonlight-like", 1.0, 0).unwrap();
        assert_eq!((m.workload.num_groups, m.workload.group_size, m.workload.max_tokens), (400, 8, 65536));
        assert_eq!(m.sim.instances, 32);
        let q = preset("qwen72b-like", 1.0, 0).unwrap();
        assert_eq!((q.workload.num_groups, q.workload.group_size, q.workload.max_tokens), (600, 16, 40960));
        assert_eq!(q.sim.instances, 16);
        let k = preset("k2-like", 1.0, 0).unwrap();
        assert_eq!((k.workload.num_groups, k.workload.group_size, k.workload.max_tokens), (800, 8, 98304));
        assert_eq!(k.sim.instances, 8);
        assert_eq!(q.sim.chunk_size, 8192);
    }

    #[test]
    fn scaling() {
        let q = preset("qwen72b-like", 0.1, 0).unwrap();
        // 600·√0.1 groups on 16·√0.1 instances: 38 groups per instance either way
        assert_eq!(q.workload.num_groups, 190);
        assert_eq!(q.sim.instances, 5);
        assert_eq!(q.workload.max_tokens, 4096);
        assert_eq!(q.sim.chunk_size, 819);
        assert_eq!(q.sim.kv.instance_capacity_tokens, 150_000);
        let k = preset("k2-like", 0.01, 0).unwrap();
        assert_eq!((k.workload.num_groups, k.sim.instances), (80, 1));
        assert!(preset("qwen72b-like", 0.0, 0).is_err());
        assert!(preset("nope", 0.1, 0).is_err());
    }
}
