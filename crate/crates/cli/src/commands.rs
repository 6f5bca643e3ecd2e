//! Subcommand bodies. Each returns the input files it read and the
//! artifacts it wrote, both as absolute paths under the output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dynmoe::analysis::{self, GroupKey, XField};
use dynmoe::distillation::{self, Corpus, SamplingConfig};
use dynmoe::flops;
use dynmoe::injection::{diagnose_mismatch, inject};
use dynmoe::model::checkpoint::{self, StorageDtype};
use dynmoe::model::{ForwardOptions, MoeModel};
use dynmoe::seed;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TRAIN_CORPUS: &str = "corpus/train.txt";
pub const HELDOUT_CORPUS: &str = "corpus/heldout.txt";
pub const TEACHER: &str = "teacher.ckpt";
pub const INJECTED: &str = "student_injected.ckpt";
pub const ANALYSIS_DIR: &str = "analysis";
pub const PLOTS_DIR: &str = "plots";

/// Held-out sequences used for the injection report.
const REPORT_BATCH: usize = 32;

pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

fn require(root: &Path, names: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let paths: Vec<PathBuf> = names.iter().map(|n| root.join(n)).collect();
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if missing.is_empty() {
        Ok(paths)
    } else {
        Err(CliError::Missing(missing))
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    Ok(Corpus::read_text(BufReader::new(File::open(path)?))?)
}

fn write_with<F>(path: &Path, f: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(BufWriter<File>) -> dynmoe::Result<()>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    f(BufWriter::new(File::create(path)?))?;
    Ok(path.to_path_buf())
}

fn save_model(model: &MoeModel, path: &Path) -> Result<PathBuf, CliError> {
    checkpoint::save(model, path, StorageDtype::F64)?;
    Ok(path.to_path_buf())
}

pub fn gen_data(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let train = distillation::generate_corpus(&c.corpus)?;
    let held = distillation::generate_heldout(&c.corpus)?;
    let artifacts = vec![
        write_with(&root.join(TRAIN_CORPUS), |w| train.write_text(w))?,
        write_with(&root.join(HELDOUT_CORPUS), |w| held.write_text(w))?,
    ];
    Ok(Outcome { inputs: vec![], artifacts })
}

pub fn train_teacher(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let inputs = require(root, &[TRAIN_CORPUS])?;
    let train = read_corpus(&inputs[0])?;
    let (teacher, log) = distillation::train_teacher(c.model.clone(), &train, &c.teacher)?;
    let artifacts = vec![
        save_model(&teacher, &root.join(TEACHER))?,
        write_with(&root.join("teacher_log.csv"), |w| distillation::write_teacher_log_csv(w, &log))?,
    ];
    Ok(Outcome { inputs, artifacts })
}

pub fn inject_cmd(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let inputs = require(root, &[TEACHER, HELDOUT_CORPUS])?;
    let teacher = checkpoint::load(&inputs[0])?;
    let held = read_corpus(&inputs[1])?;
    let student = inject(&teacher, &c.injection)?;
    let batch: Vec<_> = held.token_lists().into_iter().take(REPORT_BATCH).collect();
    let report = diagnose_mismatch(&teacher, &student, &batch, ForwardOptions::default())?;
    let artifacts = vec![
        save_model(&student, &root.join(INJECTED))?,
        write_with(&root.join("injection_report.csv"), |w| report.write_csv(w))?,
    ];
    Ok(Outcome { inputs, artifacts })
}

pub fn adapt(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let inputs = require(root, &[TEACHER, TRAIN_CORPUS])?;
    let teacher = checkpoint::load(&inputs[0])?;
    let train = read_corpus(&inputs[1])?;
    let prompts = train.prompts(c.adapt.prompt_len)?;
    let out = distillation::adapt(&teacher, &c.injection, &c.adapt, prompts, Some(root))?;
    let mut artifacts = out.checkpoints.clone();
    artifacts.push(write_with(&root.join("adapt_log.csv"), |w| out.state.write_log_csv(w))?);
    Ok(Outcome { inputs, artifacts })
}

pub fn evaluate(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let e = &c.evaluate;
    let inputs = require(root, &[e.model.as_str(), HELDOUT_CORPUS])?;
    let model = checkpoint::load(&inputs[0])?;
    let held = read_corpus(&inputs[1])?;
    let opts = ForwardOptions { mask_extra: e.mask_zero, renormalize: e.renormalize };
    let metrics = distillation::evaluate(&model, &held, opts)?;
    let stem =
        Path::new(&e.model).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let mut name = format!("eval_{stem}");
    if e.mask_zero {
        name.push_str("_masked");
    }
    if e.renormalize {
        name.push_str("_renorm");
    }
    let path = root.join(format!("{name}.json"));
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(Outcome { inputs, artifacts: vec![path] })
}

pub fn flops_cmd(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let f = &c.flops;
    let rows = flops::speedup_table(&f.config, &f.lengths, &f.r_ze)?;
    let mut artifacts = vec![write_with(&root.join("flops.csv"), |w| flops::write_speedup_csv(w, &rows))?];
    if f.breakdown {
        artifacts.push(write_with(&root.join("flops_breakdown.csv"), |w| {
            flops::write_breakdown_csv(w, &f.config, &f.lengths)
        })?);
    }
    Ok(Outcome { inputs: vec![], artifacts })
}

pub fn analyze(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let a = &c.analysis;
    let inputs = require(root, &[TEACHER, a.student.as_str(), HELDOUT_CORPUS])?;
    let teacher = checkpoint::load(&inputs[0])?;
    let student = checkpoint::load(&inputs[1])?;
    let held = read_corpus(&inputs[2])?;
    let prompts: Vec<_> = held.prompts(c.adapt.prompt_len)?.into_iter().take(a.num_prompts).collect();
    let sampling = SamplingConfig { temperature: a.temperature, max_len: a.max_len };
    let records = analysis::record_rollouts(
        &student,
        &teacher,
        &prompts,
        &sampling,
        c.corpus.natural_vocab,
        seed::derive(c.seed, "analysis"),
    )?;
    let dir = root.join(ANALYSIS_DIR);
    let mut artifacts =
        vec![write_with(&dir.join(analysis::RECORDS_FILE), |w| analysis::write_records_csv(w, &records))?];
    if records.len() >= analysis::MIN_CORRELATION_RECORDS {
        for x in [XField::Entropy, XField::DeltaLogp] {
            let corr = analysis::correlate(&records, x, a.bins.min(records.len()))?;
            artifacts.push(write_with(&dir.join(format!("correlation_{}.csv", x.as_str())), |w| {
                analysis::write_correlation_csv(w, &corr)
            })?);
        }
    }
    for (key, name) in
        [(GroupKey::SpanTag, "span_tag"), (GroupKey::Layer, "layer"), (GroupKey::RolloutTag, "rollout_tag")]
    {
        let groups = analysis::aggregate_by(&records, key)?;
        artifacts
            .push(write_with(&dir.join(format!("groups_{name}.csv")), |w| analysis::write_groups_csv(w, &groups))?);
    }
    let series = analysis::by_rollout(&records)
        .into_iter()
        .map(|(id, rs)| Ok((id, analysis::chunk_average(&rs, a.chunk_size)?)))
        .collect::<dynmoe::Result<Vec<_>>>()?;
    artifacts.push(write_with(&dir.join("chunks.csv"), |w| analysis::write_chunks_csv(w, &series))?);
    Ok(Outcome { inputs, artifacts })
}

pub fn plots(c: &RunConfig, root: &Path) -> Result<Outcome, CliError> {
    let inputs = require(root, &[&format!("{ANALYSIS_DIR}/{}", analysis::RECORDS_FILE)])?;
    let artifacts =
        analysis::emit_plots(&root.join(ANALYSIS_DIR), &root.join(PLOTS_DIR), c.analysis.chunk_size, c.analysis.bins)?;
    Ok(Outcome { inputs, artifacts })
}
