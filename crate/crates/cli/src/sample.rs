use std::path::PathBuf;
use std::time::Instant;

use so3_mar::dataset::{Dataset, DatasetHeader, Record, DATASET_FORMAT, DATASET_VERSION};
use so3_mar::mar::{generate_indices, GenerationConfig};
use so3_mar::model::Model;
use so3_mar::Error;

use crate::{echo, usage};

/// Unconditional hypotheses are generated in groups of this size.
const UNCOND_BATCH: usize = 20;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Cond,
    Uncond,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Dataset whose records supply the observations (conditional mode).
    #[arg(long)]
    obs_file: Option<PathBuf>,
    /// Hypotheses per observation, or total samples when unconditional.
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 1)]
    k_steps: usize,
    #[arg(long, default_value_t = 75)]
    t_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn timing_path(out: &std::path::Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.csv");
    out.with_file_name(name)
}

pub fn run(a: Args) -> anyhow::Result<()> {
    echo(
        "sample",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("mode", format!("{:?}", a.mode).to_lowercase()),
            ("obs_file", a.obs_file.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("q", a.q.to_string()),
            ("k_steps", a.k_steps.to_string()),
            ("t_steps", a.t_steps.to_string()),
            ("eta", a.eta.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    if a.q == 0 {
        return Err(usage("--q must be at least 1"));
    }
    let conditional = a.mode == Mode::Cond;
    let obs = match (conditional, &a.obs_file) {
        (true, Some(p)) => Some(Dataset::read(p)?),
        (true, None) => return Err(usage("--mode cond requires --obs-file")),
        (false, Some(_)) => return Err(usage("--obs-file is only valid with --mode cond")),
        (false, None) => None,
    };
    let (model, _) = Model::load(&a.ckpt)?;
    let cfg = GenerationConfig {
        k: a.k_steps,
        steps: a.t_steps,
        eta: a.eta,
        conditional,
        seed: a.seed,
    };
    cfg.validate(model.skeleton.num_joints())?;
    if let Some(ds) = &obs {
        ds.check_skeleton(&model.skeleton)?;
    }

    let mut records = Vec::new();
    let mut timing = String::from("item,hypotheses,seconds,seconds_per_sample\n");
    let mut emit = |item: usize, count: usize, secs: f64| {
        timing.push_str(&format!("{item},{count},{secs},{}\n", secs / count as f64));
    };
    match &obs {
        Some(ds) => {
            for (i, rec) in ds.records.iter().enumerate() {
                let start = Instant::now();
                let first = (i * a.q) as u64;
                let indices: Vec<u64> = (first..first + a.q as u64).collect();
                let o = rec.observation();
                for (pose, _) in generate_indices(&model, Some(&o), &cfg, &indices)? {
                    records.push(Record::from_pose(&pose, rec.visible.clone(), None, &model.skeleton)?);
                }
                emit(i, a.q, start.elapsed().as_secs_f64());
            }
        }
        None => {
            let all: Vec<u64> = (0..a.q as u64).collect();
            for (b, chunk) in all.chunks(UNCOND_BATCH).enumerate() {
                let start = Instant::now();
                for (pose, _) in generate_indices(&model, None, &cfg, chunk)? {
                    let visible = vec![true; model.skeleton.num_joints()];
                    records.push(Record::from_pose(&pose, visible, None, &model.skeleton)?);
                }
                emit(b, chunk.len(), start.elapsed().as_secs_f64());
            }
        }
    }

    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        joints: model.skeleton.num_joints(),
        bones: model.skeleton.num_bones(),
        skeleton_hash: model.skeleton.hash(),
        conditional,
        count: records.len(),
        seed: a.seed,
        world: "samples".into(),
    };
    let n = records.len();
    Dataset::new(header, records).write(&a.out)?;
    // wall-clock timings vary run to run, so they live outside the sample file
    let tpath = timing_path(&a.out);
    std::fs::write(&tpath, timing).map_err(|e| Error::io(&tpath, e))?;
    println!("wrote {n} samples to {}", a.out.display());
    Ok(())
}
