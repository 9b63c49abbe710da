use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use so3_mar::dataset::Dataset;
use so3_mar::kinematics::Skeleton;
use so3_mar::model::Model;
use so3_mar::training::{train, TrainConfig, METRICS_HEADER};
use so3_mar::Error;

use crate::gen::SKELETON_FILE;
use crate::{echo, ensure_dir, read_text};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_cond: PathBuf,
    #[arg(long)]
    data_uncond: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
}

/// The skeleton written next to the conditional corpus, or the default one.
fn skeleton_for(data: &Path) -> anyhow::Result<Skeleton> {
    let path = data.parent().unwrap_or(Path::new(".")).join(SKELETON_FILE);
    if path.exists() {
        Ok(Skeleton::from_text(&read_text(&path)?, &path.display().to_string())?)
    } else {
        Ok(Skeleton::default())
    }
}

/// Keeps the header and the rows of steps before `steps_done`.
fn truncate_log(path: &Path, steps_done: u64) -> anyhow::Result<()> {
    let text = read_text(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = if i == 0 {
            line == METRICS_HEADER
        } else {
            line.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < steps_done)
        };
        if i == 0 && !keep {
            return Err(Error::format(format!("{}:1", path.display()), "not a loss log").into());
        }
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let text = read_text(&a.config)?;
    let cfg = TrainConfig::parse(&text)?;
    let mut pairs: Vec<(&str, String)> = text
        .lines()
        .filter_map(|l| l.split('#').next())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim().to_string()))
        .collect();
    pairs.sort();
    pairs.push(("resume", a.resume.to_string()));
    echo("train", &pairs);

    let skel = skeleton_for(&a.data_cond)?;
    let cond = Dataset::read(&a.data_cond)?;
    let uncond = Dataset::read(&a.data_uncond)?;
    if !cond.header.conditional || uncond.header.conditional {
        return Err(Error::Incompatible("expected one conditional and one unconditional corpus".into()).into());
    }

    ensure_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(METRICS_FILE);
    let mut model = if a.resume {
        let (m, meta) = Model::load(&ckpt)?;
        if meta.get("seed").map(String::as_str) != Some(cfg.seed.to_string().as_str()) {
            return Err(Error::Incompatible("checkpoint was trained with a different seed".into()).into());
        }
        if m.skeleton != skel {
            return Err(Error::Incompatible("checkpoint skeleton differs from the dataset skeleton".into()).into());
        }
        truncate_log(&log_path, m.store.adam_steps())?;
        println!("resuming at step {}", m.store.adam_steps());
        m
    } else {
        std::fs::write(&log_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        Model::new(cfg.model, skel, cfg.seed)?
    };

    let file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log: BufWriter<File> = BufWriter::new(file);
    let meta = [("seed", cfg.seed.to_string())];
    let every = cfg.checkpoint_every.max(1);
    train(&cfg, &mut model, &cond, &uncond, |step, values, model| {
        writeln!(log, "{}", values.csv_row(step)).map_err(|e| Error::io(&log_path, e))?;
        let done = step + 1;
        if done % every == 0 || done == cfg.steps {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            model.save(&ckpt, &meta)?;
            println!(
                "step {done}/{}: l_diff {:.5} l_3d {:.5} l_2d {:.5} total {:.5}",
                cfg.steps, values.l_diff, values.l_3d, values.l_2d, values.total
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if model.store.adam_steps() == 0 || !ckpt.exists() {
        model.save(&ckpt, &meta)?;
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
