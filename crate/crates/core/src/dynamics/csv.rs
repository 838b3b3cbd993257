//! Plain-text trajectory export: one row per (step, particle).

use std::fmt::Write as _;
use std::path::Path;

use super::{SystemState, Trajectory};
use crate::error::{Error, Result};

fn header(d: usize, velocities: bool) -> String {
    let mut h = String::from("step,particle");
    for a in 0..d {
        write!(h, ",x{a}").expect("string write");
    }
    if velocities {
        for a in 0..d {
            write!(h, ",v{a}").expect("string write");
        }
    }
    h
}

/// Shortest round-trip formatting keeps the files byte-stable and lossless.
fn push_row(out: &mut String, step: usize, i: usize, values: impl Iterator<Item = f64>) {
    write!(out, "{step},{i}").expect("string write");
    for v in values {
        write!(out, ",{v}").expect("string write");
    }
    out.push('\n');
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let d = traj.d;
    let mut out = header(d, true);
    out.push('\n');
    for (k, s) in traj.states.iter().enumerate() {
        for i in 0..s.n {
            push_row(&mut out, k, i, s.position(i).iter().chain(s.velocity(i)).copied());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Final positions of many trajectories: `trajectory,particle,x0..`.
pub fn write_endpoints_csv(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let d = trajs.first().map_or(0, |t| t.d);
    let mut out = header(d, false).replacen("step", "trajectory", 1);
    out.push('\n');
    for (m, t) in trajs.iter().enumerate() {
        let s = t.final_state();
        for i in 0..s.n {
            push_row(&mut out, m, i, s.position(i).iter().copied());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a file written by [`write_trajectory_csv`] back into states.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<SystemState>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = head.split(',').collect();
    if cols.len() < 4 || cols[0] != "step" || cols[1] != "particle" || (cols.len() - 2) % 2 != 0 {
        return Err(Error::Parse(format!("{}: unexpected header `{head}`", path.display())));
    }
    let d = (cols.len() - 2) / 2;
    let mut states: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("{}: line {}", path.display(), ln + 2));
        if f.len() != cols.len() {
            return Err(bad());
        }
        let step: usize = f[0].parse().map_err(|_| bad())?;
        let nums = f[2..].iter().map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        if step == states.len() {
            states.push((Vec::new(), Vec::new()));
        } else if step + 1 != states.len() {
            return Err(bad());
        }
        let (r, v) = states.last_mut().expect("pushed");
        r.extend_from_slice(&nums[..d]);
        v.extend_from_slice(&nums[d..]);
    }
    let n = states.first().map_or(0, |(r, _)| r.len() / d);
    states
        .into_iter()
        .enumerate()
        .map(|(k, (r, v))| {
            let mut s = SystemState::new(n, d, r, v)?;
            s.t_index = k;
            Ok(s)
        })
        .collect()
}
