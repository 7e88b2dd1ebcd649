//! Run configuration: an optional TOML file, then explicit flags on top.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

use seqplace::evaluation::{BenchConfig, EvalConfig, DEFAULT_RECALL_NS, DEFAULT_THRESHOLD_M};
use seqplace::features::SyntheticWorldConfig;
use seqplace::heads::DEFAULT_ALPHA;
use seqplace::retrieval::DEFAULT_VELOCITIES;
use seqplace::training::TrainConfig;
use seqplace::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub kind: String,
    pub clusters: usize,
    pub alpha: f64,
    /// Output size of the FC head.
    pub out_dim: usize,
    pub tconv_width: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { kind: "seqvlad".into(), clusters: 64, alpha: DEFAULT_ALPHA, out_dim: 4096, tconv_width: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ns: Vec<usize>,
    pub threshold_m: f64,
    pub velocities: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ns: DEFAULT_RECALL_NS.to_vec(),
            threshold_m: DEFAULT_THRESHOLD_M,
            velocities: DEFAULT_VELOCITIES.to_vec(),
            lengths: vec![1, 3, 5, 7, 9],
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { ns: self.ns.clone(), threshold_m: self.threshold_m }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub warmup: usize,
    pub measured: usize,
    pub top_n: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection { sizes: b.sizes, dims: b.dims, warmup: b.warmup, measured: b.measured, top_n: b.top_n }
    }
}

/// Everything a command may read. Sections a command ignores are still
/// validated, so a typo anywhere in the file is reported.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: SyntheticWorldConfig,
    pub train: TrainConfig,
    pub head: HeadSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn bench_config(&self, seed: u64) -> BenchConfig {
        let b = &self.bench;
        BenchConfig {
            sizes: b.sizes.clone(),
            dims: b.dims.clone(),
            warmup: b.warmup,
            measured: b.measured,
            top_n: b.top_n,
            seed,
        }
    }
}

/// Copies a flag into the config only when it was typed on the command line,
/// so file values survive flags left at their defaults.
pub struct Overrides<'a>(pub &'a ArgMatches);

impl Overrides<'_> {
    pub fn given(&self, id: &str) -> bool {
        matches!(self.0.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
    }

    pub fn set<T: Clone + Send + Sync + 'static>(&self, id: &str, target: &mut T) {
        if self.given(id) {
            if let Some(v) = self.0.get_one::<T>(id) {
                *target = v.clone();
            }
        }
    }

    pub fn set_list<T: Clone + Send + Sync + 'static>(&self, id: &str, target: &mut Vec<T>) {
        if self.given(id) {
            if let Some(v) = self.0.get_many::<T>(id) {
                *target = v.cloned().collect();
            }
        }
    }
}
