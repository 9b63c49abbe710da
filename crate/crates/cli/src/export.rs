use std::path::PathBuf;

use so3_mar::dataset::Dataset;
use so3_mar::kinematics::fmt_f64;
use so3_mar::Error;

use crate::echo;

pub const CSV_HEADER: &str = "record,joint,x,y,z,u,v,visible";

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Dataset or sample file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    echo(
        "export",
        &[("input", a.input.display().to_string()), ("out", a.out.display().to_string())],
    );
    let ds = Dataset::read(&a.input)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (i, r) in ds.records.iter().enumerate() {
        let obs = r.observation();
        for (j, p) in r.j3d.iter().enumerate() {
            let (u, v) = match obs.keypoint(j) {
                Some([u, v]) => (fmt_f64(u), fmt_f64(v)),
                None => (String::new(), String::new()),
            };
            csv.push_str(&format!(
                "{i},{j},{},{},{},{u},{v},{}\n",
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                fmt_f64(p[2]),
                u8::from(r.visible[j])
            ));
        }
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} records", ds.records.len());
    Ok(())
}
