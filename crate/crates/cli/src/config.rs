//! Run configuration: TOML file merged over defaults, then `--set` overrides.

use std::path::{Path, PathBuf};

use dynmoe::distillation::{AdaptConfig, CorpusSpec, TeacherConfig};
use dynmoe::flops::FlopsConfig;
use dynmoe::injection::InjectionSpec;
use dynmoe::model::ModelConfig;
use dynmoe::seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSection {
    pub config: FlopsConfig,
    pub lengths: Vec<u64>,
    pub r_ze: Vec<f64>,
    /// Also write the per-term table.
    pub breakdown: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Checkpoint to score, relative to the output directory.
    pub model: String,
    /// Mask every extra router row.
    pub mask_zero: bool,
    pub renormalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Student checkpoint, relative to the output directory.
    pub student: String,
    pub num_prompts: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub chunk_size: usize,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every sub-seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Teacher architecture, without extra experts.
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub teacher: TeacherConfig,
    pub injection: InjectionSpec,
    pub adapt: AdaptConfig,
    pub flops: FlopsSection,
    pub evaluate: EvaluateSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ModelConfig::desk_static(),
            corpus: CorpusSpec::default(),
            teacher: TeacherConfig::default(),
            injection: InjectionSpec { n_new: 8, kind: dynmoe::model::ExpertKind::Zero, seed: 0 },
            adapt: AdaptConfig::default(),
            flops: FlopsSection {
                config: FlopsConfig::large_reference(),
                lengths: (1..=8).map(|i| i * 1024).collect(),
                r_ze: vec![0.5],
                breakdown: false,
            },
            evaluate: EvaluateSection { model: "student_opd.ckpt".into(), mask_zero: false, renormalize: false },
            analysis: AnalysisSection {
                student: "student_opd.ckpt".into(),
                num_prompts: 64,
                max_len: 16,
                temperature: 1.0,
                chunk_size: dynmoe::analysis::DEFAULT_CHUNK,
                bins: 10,
            },
        }
    }
}

/// Keys fixed by the global seed; setting them directly is rejected.
const DERIVED_SEEDS: [(&str, &str); 4] =
    [("corpus", "seed"), ("teacher", "seed"), ("injection", "seed"), ("adapt", "seed")];

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    // Bare words that are not TOML literals are taken as strings.
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `key.path=value` override to `table`.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key {path:?}")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Resolved configuration plus the digest recorded in manifests.
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
}

pub fn resolve(
    path: Option<&Path>,
    sets: &[String],
    out: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<Resolved, CliError> {
    let mut user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::Missing(vec![p.to_path_buf()]),
                _ => CliError::Io(e),
            })?;
            toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_set(&mut user, s)?;
    }
    for (section, key) in DERIVED_SEEDS {
        if user.get(section).and_then(|v| v.get(key)).is_some() {
            return Err(CliError::Config(format!(
                "{section}.{key} is derived from the global seed; set `seed` instead"
            )));
        }
    }
    let mut table = match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    merge(&mut table, user);
    let mut config: RunConfig =
        Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(s) = seed_flag {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o.to_path_buf();
    }
    config.corpus.seed = seed::derive(config.seed, "corpus");
    config.teacher.seed = seed::derive(config.seed, "teacher");
    config.injection.seed = seed::derive(config.seed, "injection");
    config.adapt.seed = seed::derive(config.seed, "adapt");
    validate(&config)?;
    // The output directory does not change any artifact, so it is left out.
    let mut hashed = config.clone();
    hashed.out_dir = PathBuf::new();
    let canonical = serde_json::to_vec(&hashed).expect("config serializes");
    let hash = hex(&Sha256::digest(&canonical));
    Ok(Resolved { config, hash })
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    c.model.validate()?;
    if c.model.num_zero_experts != 0 {
        return Err(CliError::Config(
            "model describes the teacher and must have num_zero_experts = 0; use injection.n_new".into(),
        ));
    }
    c.corpus.validate()?;
    c.teacher.validate()?;
    c.injection.validate()?;
    c.adapt.validate()?;
    c.flops.config.validate()?;
    if c.flops.lengths.is_empty() || c.flops.r_ze.is_empty() {
        return Err(CliError::Config("flops.lengths and flops.r_ze must be nonempty".into()));
    }
    if c.corpus.vocab_size != c.model.vocab_size {
        return Err(CliError::Config(format!(
            "corpus vocab {} differs from model vocab {}",
            c.corpus.vocab_size, c.model.vocab_size
        )));
    }
    let a = &c.analysis;
    if a.num_prompts == 0 || a.max_len == 0 || a.chunk_size == 0 || a.bins == 0 {
        return Err(CliError::Config("analysis sizes must be positive".into()));
    }
    if !(a.temperature >= 0.0) {
        return Err(CliError::Config("analysis.temperature must be nonnegative".into()));
    }
    Ok(())
}

/// TOML view of `c` without the derived sub-seeds, reusable as `--config`.
pub fn to_toml(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    c.corpus.seed = 0;
    c.teacher.seed = 0;
    c.injection.seed = 0;
    c.adapt.seed = 0;
    let mut v = Value::try_from(&c).map_err(|e| CliError::Config(e.to_string()))?;
    if let Value::Table(t) = &mut v {
        for (section, key) in DERIVED_SEEDS {
            if let Some(Value::Table(s)) = t.get_mut(section) {
                s.remove(key);
            }
        }
    }
    toml::to_string(&v).map_err(|e| CliError::Config(e.to_string()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
