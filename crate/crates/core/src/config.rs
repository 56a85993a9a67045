//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Keys not present keep their defaults.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::{TaskConfig, TrainConfig};

/// Everything a command needs besides the seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub task: TaskConfig,
    /// Clusters selected per token by the hierarchical baseline (`l`). The
    /// default makes its candidate pool match the default shortlist.
    pub selected_clusters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), task: TaskConfig::default(), selected_clusters: 2 }
    }
}

pub const KEYS: [&str; 22] = [
    "steps",
    "accum",
    "micro_batch",
    "lr",
    "dim",
    "num_codes",
    "num_experts",
    "shortlist_size",
    "top_k",
    "jitter_sigma",
    "balance_weight",
    "decay",
    "dead_threshold",
    "no_projection",
    "static_codebook",
    "euclidean",
    "input_dim",
    "output_dim",
    "clusters",
    "noise_std",
    "selected_clusters",
    "training_mode",
];

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: cannot parse '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {lineno}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {lineno}: key '{key}' given twice")));
            }
            cfg.set(key, value, lineno)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let t = &mut self.train;
        match key {
            "steps" => t.steps = parse_value(key, value, line)?,
            "accum" => t.accum = parse_value(key, value, line)?,
            "micro_batch" => t.micro_batch = parse_value(key, value, line)?,
            "lr" => t.lr = parse_value(key, value, line)?,
            "dim" => t.dim = parse_value(key, value, line)?,
            "num_codes" => t.router.num_codes = parse_value(key, value, line)?,
            "num_experts" => t.router.num_experts = parse_value(key, value, line)?,
            "shortlist_size" => t.router.shortlist_size = parse_value(key, value, line)?,
            "top_k" => t.router.top_k = parse_value(key, value, line)?,
            "jitter_sigma" => t.router.jitter_sigma = parse_value(key, value, line)?,
            "balance_weight" => t.router.balance_weight = parse_value(key, value, line)?,
            "training_mode" => t.router.training_mode = parse_value(key, value, line)?,
            "decay" => t.codebook.decay = parse_value(key, value, line)?,
            "dead_threshold" => t.codebook.dead_threshold = parse_value(key, value, line)?,
            "no_projection" => t.ablations.no_projection = parse_value(key, value, line)?,
            "static_codebook" => t.ablations.static_codebook = parse_value(key, value, line)?,
            "euclidean" => t.ablations.euclidean = parse_value(key, value, line)?,
            "input_dim" => self.task.input_dim = parse_value(key, value, line)?,
            "output_dim" => self.task.output_dim = parse_value(key, value, line)?,
            "clusters" => self.task.clusters = parse_value(key, value, line)?,
            "noise_std" => self.task.noise_std = parse_value(key, value, line)?,
            "selected_clusters" => self.selected_clusters = parse_value(key, value, line)?,
            _ => return Err(Error::config(format!("line {line}: unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        let r = &t.router;
        let values: [String; 22] = [
            t.steps.to_string(),
            t.accum.to_string(),
            t.micro_batch.to_string(),
            t.lr.to_string(),
            t.dim.to_string(),
            r.num_codes.to_string(),
            r.num_experts.to_string(),
            r.shortlist_size.to_string(),
            r.top_k.to_string(),
            r.jitter_sigma.to_string(),
            r.balance_weight.to_string(),
            t.codebook.decay.to_string(),
            t.codebook.dead_threshold.to_string(),
            t.ablations.no_projection.to_string(),
            t.ablations.static_codebook.to_string(),
            t.ablations.euclidean.to_string(),
            self.task.input_dim.to_string(),
            self.task.output_dim.to_string(),
            self.task.clusters.to_string(),
            self.task.noise_std.to_string(),
            self.selected_clusters.to_string(),
            r.training_mode.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn comments_and_partial_files() {
        let c = RunConfig::parse("# toy\n\nsteps = 7\n  lr=0.25 \nstatic_codebook = true\n").unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.lr, 0.25);
        assert!(c.train.ablations.static_codebook);
        assert_eq!(c.train.router.num_experts, 256);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in ["bogus = 1", "steps = 1\nsteps = 2", "steps", "steps = -3", "lr = fast", "euclidean = yes"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::InvalidConfig(_))), "{text}");
        }
        let err = RunConfig::parse("x\nbogus = 1").unwrap_err().to_string();
        assert!(err.contains("line 1"));
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(
            steps in 0usize..10_000, accum in 1usize..16, s in 1usize..4096, lr in 1e-6f64..10.0,
            dim in 1usize..128, g in 1usize..64, e in 1usize..5000, m in 1usize..64, k in 1usize..16,
            jitter in 0.0f64..1.0, lambda in 0.0f64..1.0, decay in 0.0f64..0.999, tau in 1e-3f64..4.0,
            flags in 0u8..16, d_in in 1usize..64, d_out in 1usize..64, c in 1usize..64,
            noise in 0.0f64..1.0, l in 1usize..8,
        ) {
            let mut cfg = RunConfig::default();
            let t = &mut cfg.train;
            t.steps = steps; t.accum = accum; t.micro_batch = s; t.lr = lr; t.dim = dim;
            t.router.num_codes = g; t.router.num_experts = e; t.router.shortlist_size = m; t.router.top_k = k;
            t.router.jitter_sigma = jitter; t.router.balance_weight = lambda;
            t.router.training_mode = flags & 8 != 0;
            t.codebook.decay = decay; t.codebook.dead_threshold = tau;
            t.ablations.no_projection = flags & 1 != 0;
            t.ablations.static_codebook = flags & 2 != 0;
            t.ablations.euclidean = flags & 4 != 0;
            cfg.task.input_dim = d_in; cfg.task.output_dim = d_out; cfg.task.clusters = c; cfg.task.noise_std = noise;
            cfg.selected_clusters = l;
            prop_assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
        }
    }
}
