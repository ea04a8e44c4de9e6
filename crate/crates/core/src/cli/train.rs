use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::read_config;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::training::{load_checkpoint, save_checkpoint, train_until, Checkpoint, TrainState};

pub const METRICS_HEADER: &str = "step,loss,lr,wallclock";

/// `out/<config hash>`.
pub fn run_dir_for(out: &Path, run: &RunConfig) -> PathBuf {
    out.join(run.hash())
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Metrics rows already on disk for steps up to `upto`.
fn kept_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines().skip(1) {
        let line = line?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if step.is_some_and(|s| s <= upto) {
            rows.push(line);
        }
    }
    Ok(rows)
}

/// Trains per the config file and returns the run directory. The run
/// directory holds `config.json`, `metrics.csv`, periodic checkpoints under
/// `checkpoints/` and `final.ckpt`.
pub fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>, force: bool) -> Result<PathBuf> {
    let run = read_config(config)?;
    let dir = run_dir_for(out, &run);
    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.run != run {
                return Err(Error::Config(format!(
                    "checkpoint {} was written under a different config",
                    path.display()
                )));
            }
            ckpt.state
        }
        None => {
            if dir.exists() {
                if !force {
                    return Err(Error::Config(format!(
                        "run directory {} already exists; pass --force to overwrite",
                        dir.display()
                    )));
                }
                fs::remove_dir_all(&dir)?;
            }
            TrainState::new(&run.backbone, run.train.seed)?
        }
    };
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(dir.join("config.json"), run.canonical() + "\n")?;

    let metrics_path = dir.join("metrics.csv");
    let kept = kept_rows(&metrics_path, state.step)?;
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    for row in &kept {
        writeln!(metrics, "{row}")?;
    }

    let source = run.data_source()?;
    let schedule = run.noise_schedule()?;
    let start = Instant::now();
    let every = run.train.checkpoint_every;
    let total = run.train.total_steps;
    let save = |state: &TrainState, path: &Path| {
        save_checkpoint(
            &Checkpoint {
                run: run.clone(),
                state: state.clone(),
            },
            path,
        )
    };
    let result = train_until(&mut state, &source, &schedule, &run.train, total, |rep, st| {
        writeln!(
            metrics,
            "{},{},{},{:.3}",
            st.step,
            rep.loss,
            rep.lr,
            start.elapsed().as_secs_f64()
        )?;
        if st.step % every == 0 || st.step == total {
            metrics.flush()?;
            save(st, &ckpt_dir.join(checkpoint_name(st.step)))?;
            eprintln!("step {} loss {:.4}", st.step, rep.loss);
        }
        Ok(())
    });
    metrics.flush()?;
    result?;
    save(&state, &dir.join("final.ckpt"))?;
    Ok(dir)
}
