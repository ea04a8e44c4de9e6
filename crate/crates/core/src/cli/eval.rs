use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::json;

use crate::config::canonical_json;
use crate::data::read_token_records;
use crate::error::Result;
use crate::eval::{consistency_rate, metric_conventions, Evaluator, MetricRow, Suite};
use crate::training::load_checkpoint;
use crate::vocab::TokenSequence;

pub(super) fn metrics_map(rows: &[MetricRow]) -> BTreeMap<String, f64> {
    rows.iter()
        .map(|r| (format!("{}/{}", r.metric, r.mode), r.value))
        .collect()
}

pub(super) fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut s = String::from("metric,mode,seed,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.metric, r.mode, r.seed, r.value));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Runs the selected suites and writes `eval.csv` and `summary.json`.
/// With `pairs`, the consistency suite scores the given packed pairs
/// instead of generating.
pub fn cmd_eval(ckpt: &Path, suite: &str, out: &Path, pairs: Option<&Path>) -> Result<()> {
    let suites = Suite::parse(suite)?;
    let ckpt = load_checkpoint(ckpt)?;
    let run = &ckpt.run;
    run.validate()?;
    let source = run.data_source()?;
    let evaluator = Evaluator::new(&ckpt.state.params, run, &source)?;

    let mut rows = Vec::new();
    let mut generated: Vec<Suite> = suites.clone();
    if let Some(path) = pairs {
        if suites.contains(&Suite::Consistency) {
            generated.retain(|s| *s != Suite::Consistency);
            let records = read_token_records(fs::File::open(path)?)?;
            let pairs = records
                .into_iter()
                .map(|ids| {
                    let seq = TokenSequence::new(ids, source.vocab(), source.layout())?;
                    source.pair_from_sequence(&seq)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(MetricRow {
                metric: "consistency".into(),
                mode: "pairs".into(),
                seed: run.eval.seed,
                value: consistency_rate(&pairs, source.world())?,
            });
        }
    }
    rows.extend(evaluator.run_suites(&generated)?);

    fs::create_dir_all(out)?;
    write_csv(&out.join("eval.csv"), &rows)?;
    let summary = json!({
        "checkpoint_step": ckpt.state.step,
        "config_hash": run.hash(),
        "conventions": metric_conventions(),
        "metrics": metrics_map(&rows),
        "seed": run.eval.seed,
        "suites": suites.iter().map(|s| s.name()).collect::<Vec<_>>(),
    });
    fs::write(out.join("summary.json"), canonical_json(&summary) + "\n")?;
    Ok(())
}
