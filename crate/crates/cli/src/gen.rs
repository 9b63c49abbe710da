use std::path::PathBuf;

use so3_mar::config::KeyValues;
use so3_mar::dataset::{build_dataset_from, DatasetSpec, NuisanceSpec, Occlusion};
use so3_mar::kinematics::{ambiguity_benchmark, point_mass, PoseMixture, Skeleton};

use crate::{echo, ensure_dir, read_text, usage};

pub const COND_FILE: &str = "cond.txt";
pub const UNCOND_FILE: &str = "uncond.txt";
pub const SKELETON_FILE: &str = "skeleton.txt";

/// Unconditional records draw from streams past this index.
const UNCOND_STREAM: u64 = 1 << 40;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

struct GenConfig {
    world: String,
    mixture: PoseMixture,
    n_cond: usize,
    n_uncond: usize,
    occlusion: Occlusion,
    nuisance: NuisanceSpec,
    raw: Vec<(&'static str, String)>,
}

fn parse(text: &str) -> anyhow::Result<GenConfig> {
    let mut kv = KeyValues::parse(text)?;
    let world: String = kv.get("world")?;
    let mode_std: f64 = kv.get("mode_std")?;
    let occ_text: String = kv.get("occlusion")?;
    let cfg = GenConfig {
        n_cond: kv.get("n_cond")?,
        n_uncond: kv.get("n_uncond")?,
        occlusion: Occlusion::parse(&occ_text)?,
        nuisance: NuisanceSpec {
            beta_std: kv.get("beta_std")?,
            scale_min: kv.get("scale_min")?,
            scale_max: kv.get("scale_max")?,
            shift: kv.get("shift")?,
        },
        mixture: match world.as_str() {
            "benchmark" => ambiguity_benchmark(mode_std)?,
            // the first benchmark mode, held fixed
            "point-mass" => point_mass(ambiguity_benchmark(0.0)?.modes[0].means.clone())?,
            other => return Err(usage(format!("unknown world {other:?} (expected benchmark or point-mass)"))),
        },
        raw: vec![("world", world.clone()), ("mode_std", mode_std.to_string()), ("occlusion", occ_text)],
        world,
    };
    kv.finish()?;
    Ok(cfg)
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let cfg = parse(&read_text(&a.config)?)?;
    let mut pairs = cfg.raw.clone();
    pairs.extend([
        ("n_cond", cfg.n_cond.to_string()),
        ("n_uncond", cfg.n_uncond.to_string()),
        ("beta_std", cfg.nuisance.beta_std.to_string()),
        ("scale_min", cfg.nuisance.scale_min.to_string()),
        ("scale_max", cfg.nuisance.scale_max.to_string()),
        ("shift", cfg.nuisance.shift.to_string()),
        ("seed", a.seed.to_string()),
    ]);
    echo("gen-data", &pairs);

    let skel = Skeleton::default();
    let spec = |occlusion: Occlusion, conditional: bool| DatasetSpec {
        world_name: &cfg.world,
        mixture: &cfg.mixture,
        skeleton: &skel,
        nuisance: cfg.nuisance,
        occlusion,
        conditional,
    };
    // both corpora are built before anything is written
    let cond = build_dataset_from(&spec(cfg.occlusion.clone(), true), cfg.n_cond, a.seed, 0)?;
    let uncond = build_dataset_from(&spec(Occlusion::None, false), cfg.n_uncond, a.seed, UNCOND_STREAM)?;

    ensure_dir(&a.out)?;
    let skel_path = a.out.join(SKELETON_FILE);
    std::fs::write(&skel_path, skel.to_text()).map_err(|e| so3_mar::Error::io(&skel_path, e))?;
    cond.write(&a.out.join(COND_FILE))?;
    uncond.write(&a.out.join(UNCOND_FILE))?;
    println!(
        "wrote {} conditional and {} unconditional records to {}",
        cond.records.len(),
        uncond.records.len(),
        a.out.display()
    );
    Ok(())
}
