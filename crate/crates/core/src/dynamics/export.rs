//! CSV export of covariance trajectories.

use std::io::Write;

use super::{logdet_rate, CovTrajectory};
use crate::error::Result;

const AXES: [char; 3] = ['x', 'y', 'z'];

fn entry_name(i: usize, j: usize, n: usize) -> String {
    if n <= 3 {
        format!("R_{}{}", AXES[i], AXES[j])
    } else {
        format!("R_{i}{j}")
    }
}

/// Writes `t, R_xx, R_xy, R_xz, R_yy, R_yz, R_zz, logdet, rate`.
///
/// Only the upper triangle is written. `rate` on row `k` is the backward
/// difference into step `k`, so the first row leaves it empty. `t0` is the
/// time of the first matrix.
pub fn write_trajectory_csv<W: Write>(traj: &CovTrajectory, t0: f64, mut out: W) -> Result<()> {
    let n = traj.dim();
    let mut header = vec!["t".to_string()];
    for i in 0..n {
        for j in i..n {
            header.push(entry_name(i, j, n));
        }
    }
    header.push("logdet".into());
    header.push("rate".into());
    writeln!(out, "{}", header.join(","))?;

    let rates = if traj.len() >= 2 {
        logdet_rate(traj)?
    } else {
        Vec::new()
    };
    for (k, m) in traj.mats.iter().enumerate() {
        let mut row = vec![format!("{}", t0 + k as f64 * traj.delta_t)];
        for i in 0..n {
            for j in i..n {
                row.push(format!("{}", m.get(i, j)));
            }
        }
        row.push(format!("{}", m.logdet()?));
        row.push(if k == 0 {
            String::new()
        } else {
            format!("{}", rates[k - 1])
        });
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
