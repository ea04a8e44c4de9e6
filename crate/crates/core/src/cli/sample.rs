use std::fs;
use std::path::Path;

use serde_json::json;

use super::artifacts::{render_pgm, report_text};
use super::ModeArg;
use crate::config::canonical_json;
use crate::error::{Error, Result};
use crate::sampler::{generate, GenerationMode};
use crate::training::load_checkpoint;
use crate::vocab::unpack;

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Joint => "joint",
        ModeArg::T2i => "t2i",
        ModeArg::I2t => "i2t",
        ModeArg::Prompted => "prompted",
    }
}

/// One condition per non-empty line of space-separated ids.
pub fn read_conditions(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read condition file {}: {e}", path.display())))?;
    let conds = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|w| {
                    w.parse::<u32>()
                        .map_err(|_| Error::Config(format!("bad token id '{w}' in condition file")))
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if conds.is_empty() {
        return Err(Error::Empty("condition file"));
    }
    Ok(conds)
}

/// Writes `pair_NNNN.pgm` and `pair_NNNN.txt` for every sample plus
/// `manifest.json`. Output bytes depend only on the checkpoint, the
/// arguments and the condition file.
pub fn cmd_sample(
    ckpt: &Path,
    mode: ModeArg,
    num: usize,
    seed: u64,
    condition: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let conds = match (mode, condition) {
        (ModeArg::Joint, Some(_)) => {
            return Err(Error::Config("--mode joint takes no --condition".into()))
        }
        (ModeArg::Joint, None) => Vec::new(),
        (_, None) => {
            return Err(Error::Config(format!(
                "--mode {} requires --condition",
                mode_name(mode)
            )))
        }
        (_, Some(path)) => read_conditions(path)?,
    };
    let ckpt = load_checkpoint(ckpt)?;
    let run = &ckpt.run;
    run.validate()?;
    let source = run.data_source()?;
    let schedule = run.noise_schedule()?;
    let modes: Vec<GenerationMode> = (0..num)
        .map(|i| {
            let c = || conds[i % conds.len()].clone();
            match mode {
                ModeArg::Joint => GenerationMode::JointUnconditional,
                ModeArg::T2i => GenerationMode::ReportToImage(c()),
                ModeArg::I2t => GenerationMode::ImageToReport(c()),
                ModeArg::Prompted => GenerationMode::PromptedJoint(c()),
            }
        })
        .collect();
    let seqs = generate(
        &ckpt.state.params,
        &modes,
        &run.sampler,
        &schedule,
        source.vocab(),
        source.layout(),
        seed,
    )?;

    fs::create_dir_all(out)?;
    let mut files = Vec::with_capacity(num);
    for (i, seq) in seqs.iter().enumerate() {
        let (report, image) = unpack(seq, source.vocab())?;
        let stem = format!("pair_{i:04}");
        fs::write(
            out.join(format!("{stem}.pgm")),
            render_pgm(&image, run.data.grid_size, source.vocab().k_img()),
        )?;
        fs::write(out.join(format!("{stem}.txt")), report_text(&report))?;
        files.push(json!({
            "image": format!("{stem}.pgm"),
            "report": format!("{stem}.txt"),
            "image_tokens": image,
            "report_tokens": report,
        }));
    }
    let manifest = json!({
        "checkpoint_step": ckpt.state.step,
        "config_hash": run.hash(),
        "mode": mode_name(mode),
        "num": num,
        "pairs": files,
        "sampler": serde_json::to_value(&run.sampler)?,
        "seed": seed,
    });
    fs::write(out.join("manifest.json"), canonical_json(&manifest) + "\n")?;
    Ok(())
}
