use so3_mar::checks::{self, CheckReport};

use crate::echo;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Check {
    ExpLog,
    Grad,
    ReverseConsistency,
    Posterior,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    check: Check,
    /// Number of random cases (parameter entries for `grad`).
    #[arg(long)]
    n: Option<usize>,
    /// Timesteps of the chain in `reverse-consistency`.
    #[arg(long, default_value_t = 75)]
    t_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let n = a.n.unwrap_or(match a.check {
        Check::ExpLog => 100_000,
        Check::Grad => 200,
        Check::ReverseConsistency => 1000,
        Check::Posterior => 1000,
    });
    echo(
        "oracle",
        &[
            ("check", format!("{:?}", a.check)),
            ("n", n.to_string()),
            ("t_steps", a.t_steps.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let report: CheckReport = match a.check {
        Check::ExpLog => checks::exp_log(n, a.seed)?,
        Check::Grad => checks::grad(n, a.seed)?,
        Check::ReverseConsistency => checks::reverse_consistency(n, a.t_steps, a.seed)?,
        Check::Posterior => checks::posterior(n, a.seed)?,
    };
    print!("{report}");
    if report.passes() {
        Ok(())
    } else {
        anyhow::bail!("{} check failed", report.check)
    }
}
