//! Multi-model comparison on one dataset and its CSV outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{shared_mismatches, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{param_count, Architecture};
use crate::training::{repeat_runs, RepeatSummary};

pub const METRICS_HEADER: &str = "model,seed,epoch,train_loss,train_acc,val_acc,test_acc";
pub const SUMMARY_HEADER: &str = "model,params,mean_test_acc,std_test_acc,mean_epochs_to_95";

/// Results of one model across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub model: String,
    pub params: usize,
    pub summary: RepeatSummary,
}

/// The three-model comparison: depth-3 GCN, depth-3 residual GCN and a
/// two-path multipath model, all sharing every other setting of `base`.
pub fn default_lineup(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    [
        Architecture::Sequential { depth: 3 },
        Architecture::Residual { depth: 3 },
        Architecture::Multipath {
            paths: vec![1, 2],
            shared_stem: 0,
        },
    ]
    .into_iter()
    .map(|arch| {
        let mut c = base.clone();
        c.model.arch = arch;
        c
    })
    .collect()
}

/// Checks that `configs` agree on dataset, hidden width, epochs and seeds and
/// name distinct architectures.
pub fn validate_lineup(configs: &[ExperimentConfig]) -> Result<()> {
    if configs.is_empty() {
        return Err(Error::Config("bench needs at least one model".into()));
    }
    let mismatched = shared_mismatches(configs);
    if !mismatched.is_empty() {
        return Err(Error::Config(format!(
            "bench models disagree on {}",
            mismatched.join(", ")
        )));
    }
    let mut names: Vec<&str> = configs.iter().map(|c| c.model.arch.name()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("bench models must use distinct architectures".into()));
    }
    Ok(())
}

/// Trains every config on `dataset` and collects per-model results.
pub fn run_models(configs: &[ExperimentConfig], dataset: &Dataset) -> Result<Vec<ModelResult>> {
    configs
        .iter()
        .map(|cfg| {
            let spec = cfg.model.spec(dataset.num_features(), dataset.num_classes);
            let summary = repeat_runs(&spec, dataset, &cfg.train_config())
                .map_err(|e| Error::Config(format!("{}: {e}", cfg.model.arch.name())))?;
            Ok(ModelResult {
                model: cfg.model.arch.name().to_string(),
                params: param_count(&spec),
                summary,
            })
        })
        .collect()
}

/// Per-epoch rows for every model and seed, in model, seed, epoch order.
pub fn metrics_csv(results: &[ModelResult]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in results {
        for run in &r.summary.runs {
            for e in &run.records {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.model, run.seed, e.epoch, e.train_loss, e.train_acc, e.val_acc, e.test_acc
                )
                .expect("writing to a String");
            }
        }
    }
    out
}

/// One row per model. The standard deviation is empty for a single seed.
pub fn summary_csv(results: &[ModelResult]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in results {
        let std = r.summary.std_test_acc.map_or(String::new(), |s| s.to_string());
        writeln!(
            out,
            "{},{},{},{},{}",
            r.model, r.params, r.summary.mean_test_acc, std, r.summary.mean_epochs_to_95
        )
        .expect("writing to a String");
    }
    out
}

pub fn summary_table(results: &[ModelResult]) -> String {
    let mut out = format!(
        "{:<8} {:>9} {:>17} {:>10}\n",
        "model", "params", "test acc", "epochs95"
    );
    for r in results {
        let std = r.summary.std_test_acc.map_or("n/a".to_string(), |s| format!("{s:.4}"));
        writeln!(
            out,
            "{:<8} {:>9} {:>8.4} ± {:<6} {:>10.1}",
            r.model, r.params, r.summary.mean_test_acc, std, r.summary.mean_epochs_to_95
        )
        .expect("writing to a String");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the metrics CSV, summary CSV and config echo. With several models
/// the echo holds a JSON array of their configs.
pub fn write_outputs(configs: &[ExperimentConfig], results: &[ModelResult]) -> Result<()> {
    let first = &configs[0];
    write_file(&first.output.metrics, &metrics_csv(results))?;
    write_file(&first.output.summary, &summary_csv(results))?;
    let echo = if configs.len() == 1 {
        first.to_json()
    } else {
        serde_json::Value::Array(configs.iter().map(ExperimentConfig::to_json).collect())
    };
    write_file(&first.echo_path(), &(serde_json::to_string_pretty(&echo)? + "\n"))
}

/// Validates, loads the shared dataset, trains every model and writes the
/// outputs of the first config's `output` section.
pub fn cmd_bench(configs: &[ExperimentConfig]) -> Result<Vec<ModelResult>> {
    validate_lineup(configs)?;
    let loaded = configs[0].dataset.load()?;
    if loaded.skipped_citations > 0 {
        eprintln!(
            "warning: skipped {} citations naming unknown papers",
            loaded.skipped_citations
        );
    }
    let results = run_models(configs, &loaded.dataset)?;
    write_outputs(configs, &results)?;
    Ok(results)
}
