//! CSV export and import.
//!
//! Files start with `#`-prefixed `key = value` header lines followed by a
//! column header and one row per record. Floats are written with Rust's
//! shortest round-trip formatting, so reading a file back is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::analysis::{SweepResult, ThresholdReport};
use crate::chain::{ChainError, ControlAction, Grid};
use crate::model::{ModelError, Rate, RateBounds, Regime};
use crate::simulate::VerifyReport;
use crate::solver::Solution;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header field `{0}`")]
    MissingField(&'static str),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Run metadata written above the solution rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionHeader {
    pub model: String,
    pub discount: f64,
    pub tolerance: f64,
}

fn rates_to_string(rates: &[Rate]) -> String {
    rates
        .iter()
        .map(|r| match r {
            Rate::Finite(v) => format!("{v}"),
            Rate::Unbounded => "inf".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_rates(s: &str, line: usize) -> Result<Vec<Rate>, IoError> {
    s.split_whitespace()
        .map(|t| {
            if t == "inf" {
                Ok(Rate::Unbounded)
            } else {
                t.parse::<f64>().map(Rate::Finite).map_err(|e| IoError::Parse {
                    line,
                    message: format!("bad rate `{t}`: {e}"),
                })
            }
        })
        .collect()
}

/// Renders a solution as CSV text.
pub fn solution_to_csv(solution: &Solution, header: &SolutionHeader) -> String {
    let g = &solution.grid;
    let d = g.dim();
    let mut out = String::new();
    let _ = writeln!(out, "# model = {}", header.model);
    let _ = writeln!(out, "# regime = {}", solution.regime);
    let _ = writeln!(out, "# dim = {d}");
    let _ = writeln!(out, "# h = {}", g.h());
    let _ = writeln!(out, "# upper = {}", g.requested_upper());
    let _ = writeln!(out, "# extent = {}", g.extent());
    let _ = writeln!(out, "# discount = {}", header.discount);
    let _ = writeln!(out, "# tolerance = {}", header.tolerance);
    let _ = writeln!(out, "# iterations = {}", solution.iterations);
    let _ = writeln!(out, "# converged = {}", solution.converged);
    let _ = writeln!(out, "# final_change = {}", solution.final_residual());
    let _ = writeln!(out, "# bellman_residual = {}", solution.bellman_residual);
    let _ = writeln!(out, "# seed_bounds = {}", rates_to_string(&solution.bounds.seed));
    let _ = writeln!(out, "# harvest_bounds = {}", rates_to_string(&solution.bounds.harvest));
    let mut cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    cols.push("value".into());
    cols.push("action".into());
    cols.extend((1..=d).map(|i| format!("seed{i}")));
    cols.extend((1..=d).map(|i| format!("harvest{i}")));
    let _ = writeln!(out, "{}", cols.join(","));
    let mut x = vec![0.0; d];
    for n in 0..g.node_count() {
        g.coords_into(n, &mut x);
        let action = &solution.policy[n];
        let (seed, harvest) = match action {
            ControlAction::Diffusion { seed, harvest } => (seed.clone(), harvest.clone()),
            _ => (vec![0.0; d], vec![0.0; d]),
        };
        let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        row.push(format!("{}", solution.values[n]));
        row.push(action.code().to_string());
        row.extend(seed.iter().map(|v| format!("{v}")));
        row.extend(harvest.iter().map(|v| format!("{v}")));
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_solution(
    path: &Path,
    solution: &Solution,
    header: &SolutionHeader,
) -> Result<(), IoError> {
    write_text(path, &solution_to_csv(solution, header))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn action_from_code(code: i32, seed: Vec<f64>, harvest: Vec<f64>) -> Option<ControlAction> {
    match code {
        0 => Some(ControlAction::Diffusion { seed, harvest }),
        c if c > 100 => Some(ControlAction::Reflect((c - 101) as usize)),
        c if c > 0 => Some(ControlAction::HarvestJump((c - 1) as usize)),
        c => Some(ControlAction::SeedJump((-c - 1) as usize)),
    }
}

/// Parses a solution CSV back into its header and a [`Solution`]. The
/// iteration history is reduced to the final change recorded in the header.
pub fn solution_from_csv(text: &str) -> Result<(SolutionHeader, Solution), IoError> {
    let mut fields = std::collections::BTreeMap::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, l)) = lines.peek() {
        let Some(rest) = l.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        lines.next();
    }
    let get = |k: &'static str| fields.get(k).ok_or(IoError::MissingField(k));
    let num = |k: &'static str| -> Result<f64, IoError> {
        get(k)?.parse::<f64>().map_err(|e| IoError::Parse {
            line: 0,
            message: format!("header `{k}`: {e}"),
        })
    };
    let d = num("dim")? as usize;
    let h = num("h")?;
    let upper = num("upper")?;
    let regime = get("regime")?
        .chars()
        .next()
        .and_then(Regime::from_letter)
        .ok_or(IoError::Parse {
            line: 0,
            message: "unknown regime".into(),
        })?;
    let bounds = RateBounds::new(
        parse_rates(get("seed_bounds")?, 0)?,
        parse_rates(get("harvest_bounds")?, 0)?,
    )?;
    let grid = Grid::build(upper, h, regime, d)?;
    let header = SolutionHeader {
        model: get("model")?.clone(),
        discount: num("discount")?,
        tolerance: num("tolerance")?,
    };
    let iterations = num("iterations")? as usize;
    let converged = get("converged")? == "true";
    let final_change = num("final_change")?;
    let bellman_residual = num("bellman_residual")?;

    lines.next(); // column header
    let mut values = vec![f64::NAN; grid.node_count()];
    let mut policy = vec![None; grid.node_count()];
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = l.split(',').collect();
        if cols.len() != 3 * d + 2 {
            return Err(IoError::Parse {
                line: lineno,
                message: format!("expected {} columns, found {}", 3 * d + 2, cols.len()),
            });
        }
        let f = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| IoError::Parse {
                line: lineno,
                message: format!("`{s}`: {e}"),
            })
        };
        let x: Vec<f64> = cols[..d].iter().map(|s| f(s)).collect::<Result<_, _>>()?;
        let node = grid.node_at(&x).ok_or(IoError::Parse {
            line: lineno,
            message: format!("{x:?} is not a lattice node"),
        })?;
        values[node] = f(cols[d])?;
        let code: i32 = cols[d + 1].trim().parse().map_err(|e| IoError::Parse {
            line: lineno,
            message: format!("action code: {e}"),
        })?;
        let seed = cols[d + 2..2 * d + 2].iter().map(|s| f(s)).collect::<Result<_, _>>()?;
        let harvest = cols[2 * d + 2..].iter().map(|s| f(s)).collect::<Result<_, _>>()?;
        policy[node] = action_from_code(code, seed, harvest);
    }
    let policy = policy
        .into_iter()
        .enumerate()
        .map(|(n, a)| {
            a.ok_or(IoError::Parse {
                line: 0,
                message: format!("node {n} missing"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        header,
        Solution {
            grid,
            regime,
            bounds,
            values,
            policy,
            iterations,
            residual_history: vec![final_change],
            converged,
            bellman_residual,
            max_decrease: 0.0,
        },
    ))
}

pub fn read_solution(path: &Path) -> Result<(SolutionHeader, Solution), IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    solution_from_csv(&text)
}

pub fn thresholds_to_csv(report: &ThresholdReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# species = {}", report.species + 1);
    let _ = writeln!(out, "# contiguity_warnings = {}", report.contiguity_warnings.len());
    if report.lines.is_empty() {
        let _ = writeln!(out, "L1,L2,has_seeding,has_harvesting");
        let _ = writeln!(
            out,
            "{},{},{},{}",
            report.l1[0], report.l2[0], report.has_seeding[0], report.has_harvesting[0]
        );
    } else {
        let _ = writeln!(out, "other,L1,L2,has_seeding,has_harvesting");
        for k in 0..report.lines.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                report.lines[k], report.l1[k], report.l2[k], report.has_seeding[k], report.has_harvesting[k]
            );
        }
    }
    out
}

/// One row per sweep value. For two-species sweeps `L1` is the largest
/// seeding threshold and `L2` the smallest harvesting threshold over lines.
pub fn sweep_to_csv(result: &SweepResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# parameter = {}", result.parameter);
    for (k, p) in result.probes.iter().enumerate() {
        let _ = writeln!(out, "# probe{} = {:?}", k + 1, p);
    }
    let mut cols = vec![
        result.parameter.clone(),
        "status".into(),
        "L1".into(),
        "L2".into(),
        "has_seeding".into(),
        "has_harvesting".into(),
        "iterations".into(),
        "converged".into(),
    ];
    cols.extend((1..=result.probes.len()).map(|k| format!("V_probe{k}")));
    let _ = writeln!(out, "{}", cols.join(","));
    for p in &result.points {
        match &p.outcome {
            Ok(o) => {
                let r = &o.report;
                let l1 = r.l1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let l2 = r.l2.iter().copied().fold(f64::INFINITY, f64::min);
                let mut row = vec![
                    format!("{}", p.value),
                    "ok".into(),
                    format!("{l1}"),
                    format!("{l2}"),
                    r.has_seeding.iter().any(|&b| b).to_string(),
                    r.has_harvesting.iter().any(|&b| b).to_string(),
                    o.iterations.to_string(),
                    o.converged.to_string(),
                ];
                row.extend(o.probe_values.iter().map(|v| format!("{v}")));
                let _ = writeln!(out, "{}", row.join(","));
            }
            Err(e) => {
                let mut row = vec![
                    format!("{}", p.value),
                    format!("error: {}", e.replace(',', ";")),
                ];
                row.extend(std::iter::repeat_n(String::new(), 6 + result.probes.len()));
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
    }
    out
}

pub fn verify_to_csv(report: &VerifyReport) -> String {
    let mut out = String::new();
    let d = report.rows.first().map_or(1, |r| r.state.len());
    let mut cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    cols.extend(
        ["value", "mc_mean", "mc_stderr", "difference", "tolerance", "pass", "paths", "tail_bound", "extinction_fraction", "jump_cap_hits"]
            .iter()
            .map(|s| s.to_string()),
    );
    let _ = writeln!(out, "{}", cols.join(","));
    for r in &report.rows {
        let mut row: Vec<String> = r.state.iter().map(|v| format!("{v}")).collect();
        row.push(format!("{}", r.value));
        row.push(format!("{}", r.estimate.mean));
        row.push(format!("{}", r.estimate.stderr));
        row.push(format!("{}", r.difference));
        row.push(format!("{}", r.tolerance));
        row.push(r.pass.to_string());
        row.push(r.estimate.paths.to_string());
        row.push(format!("{}", r.estimate.tail_bound));
        row.push(format!("{}", r.estimate.extinction_fraction));
        row.push(r.estimate.jump_cap_hits.to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
