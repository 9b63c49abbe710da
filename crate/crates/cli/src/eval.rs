use std::path::PathBuf;

use so3_mar::dataset::{Dataset, Record};
use so3_mar::kinematics::{posterior_modes, AMBIGUOUS_JOINTS};
use so3_mar::metrics::{
    apd_joints, best_of_q, fid, joint_features, mode_coverage, mpjpe, pa_mpjpe, EvalReport, MetricRow,
};
use so3_mar::{Error, Result};

use crate::{echo, usage};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Metric {
    Mpjpe,
    Pa,
    Apd,
    Fid,
    Coverage,
}

impl Metric {
    fn parse(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "mpjpe" => Metric::Mpjpe,
            "pa" => Metric::Pa,
            "apd" => Metric::Apd,
            "fid" => Metric::Fid,
            "coverage" => Metric::Coverage,
            other => return Err(usage(format!("unknown metric {other:?} (expected mpjpe, pa, apd, fid, coverage)"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Mpjpe => "mpjpe",
            Metric::Pa => "pa",
            Metric::Apd => "apd",
            Metric::Fid => "fid",
            Metric::Coverage => "coverage",
        }
    }

    fn paired(self) -> bool {
        matches!(self, Metric::Mpjpe | Metric::Pa | Metric::Coverage)
    }

    /// Best-of-Q errors should not grow with Q.
    fn monotone(self) -> bool {
        matches!(self, Metric::Mpjpe | Metric::Pa)
    }
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "mpjpe,pa,apd")]
    metrics: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25")]
    q_list: Vec<usize>,
    /// Mean geodesic threshold on the ambiguous joints, radians.
    #[arg(long, default_value_t = 0.3)]
    coverage_threshold: f64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub const CSV_HEADER: &str = "q,metric,mean,ci95,n,monotone";

/// Hypothesis groups: `groups[i]` holds the samples for item `i`.
fn evaluate(
    metrics: &[Metric],
    q: usize,
    groups: &[&[Record]],
    gt: &Dataset,
    threshold: f64,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut pa_fallbacks = 0;
    for &m in metrics {
        let values: Vec<f64> = match m {
            Metric::Mpjpe => groups
                .iter()
                .zip(&gt.records)
                .map(|(g, t)| best_of_q(&g[..q], |h| mpjpe(&h.j3d, &t.j3d)))
                .collect::<Result<_>>()?,
            Metric::Pa => groups
                .iter()
                .zip(&gt.records)
                .map(|(g, t)| {
                    best_of_q(&g[..q], |h| {
                        let r = pa_mpjpe(&h.j3d, &t.j3d)?;
                        pa_fallbacks += usize::from(r.fallback);
                        Ok(r.mm)
                    })
                })
                .collect::<Result<_>>()?,
            Metric::Apd => {
                if q < 2 {
                    continue;
                }
                groups
                    .iter()
                    .map(|g| apd_joints(&g[..q].iter().map(|r| r.j3d.clone()).collect::<Vec<_>>()))
                    .collect::<Result<_>>()?
            }
            Metric::Fid => {
                let reference: Vec<Vec<f64>> = gt.records.iter().map(|r| joint_features(&r.j3d)).collect();
                let feats = |g: &[Record]| g[..q].iter().map(|r| joint_features(&r.j3d)).collect::<Vec<_>>();
                if gt.header.conditional {
                    let pooled: Vec<Vec<f64>> = groups.iter().flat_map(|g| feats(g)).collect();
                    vec![fid(&pooled, &reference)?]
                } else {
                    groups.iter().map(|g| fid(&feats(g), &reference)).collect::<Result<_>>()?
                }
            }
            Metric::Coverage => groups
                .iter()
                .zip(&gt.records)
                .map(|(g, t)| {
                    let samples: Vec<_> = g[..q].iter().map(|r| r.theta.clone()).collect();
                    let modes = posterior_modes(&t.theta);
                    Ok(mode_coverage(&samples, &modes, &AMBIGUOUS_JOINTS, threshold)?.fraction)
                })
                .collect::<Result<_>>()?,
        };
        rows.push(MetricRow::from_items(m.name(), &values));
    }
    Ok(EvalReport { q, rows, pa_fallbacks })
}

pub fn run(a: Args) -> anyhow::Result<()> {
    echo(
        "eval",
        &[
            ("pred", a.pred.display().to_string()),
            ("gt", a.gt.display().to_string()),
            ("metrics", a.metrics.join(",")),
            ("q_list", a.q_list.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ("coverage_threshold", a.coverage_threshold.to_string()),
        ],
    );
    let metrics = a.metrics.iter().map(|m| Metric::parse(m.trim())).collect::<anyhow::Result<Vec<_>>>()?;
    let mut q_list = a.q_list.clone();
    q_list.sort_unstable();
    q_list.dedup();
    let q_max = match q_list.last() {
        Some(&q) if q_list[0] >= 1 => q,
        _ => return Err(usage("--q-list needs positive values")),
    };
    let pred = Dataset::read(&a.pred)?;
    let gt = Dataset::read(&a.gt)?;
    if pred.header.skeleton_hash != gt.header.skeleton_hash {
        return Err(Error::Incompatible("prediction and ground-truth skeletons differ".into()).into());
    }
    if pred.records.len() % q_max != 0 {
        return Err(Error::Incompatible(format!(
            "{} predictions do not divide into groups of {q_max}",
            pred.records.len()
        ))
        .into());
    }
    let groups: Vec<&[Record]> = pred.records.chunks(q_max).collect();
    if metrics.iter().any(|m| m.paired()) {
        if !gt.header.conditional {
            return Err(usage("mpjpe, pa and coverage need a conditional ground-truth file"));
        }
        if groups.len() != gt.records.len() {
            return Err(Error::Incompatible(format!(
                "{} hypothesis groups for {} ground-truth records",
                groups.len(),
                gt.records.len()
            ))
            .into());
        }
    }

    let reports = q_list
        .iter()
        .map(|&q| evaluate(&metrics, q, &groups, &gt, a.coverage_threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (i, rep) in reports.iter().enumerate() {
        // keep standard output parseable when it carries the CSV
        if a.out.is_some() {
            print!("{}", rep.summary());
        } else {
            eprint!("{}", rep.summary());
        }
        for row in &rep.rows {
            let metric = metrics.iter().find(|m| m.name() == row.name).expect("row from a requested metric");
            let prev = i.checked_sub(1).and_then(|p| reports[p].row(&row.name));
            let mono = match prev {
                Some(p) if metric.monotone() => {
                    if row.mean <= p.mean {
                        "pass"
                    } else {
                        "fail"
                    }
                }
                _ => "-",
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{mono}\n",
                rep.q,
                row.name,
                so3_mar::kinematics::fmt_f64(row.mean),
                so3_mar::kinematics::fmt_f64(row.ci95),
                row.n
            ));
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
