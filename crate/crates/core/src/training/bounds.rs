//! Exact enumeration of the cross-entropy bound on small discrete
//! distributions.

use crate::error::{Error, Result};

const MAX_SUPPORT: usize = 16;
const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    /// `-E log2 q(y | z)` in bits.
    pub cross_entropy: f64,
    /// `H(Y | Z)` in bits.
    pub conditional_entropy: f64,
    pub gap: f64,
}

fn check_pmf(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} has negative or non-finite mass")));
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn plogq(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        -p * q.log2()
    }
}

/// `joint[y][z]` is `p(y, z)`; `q[z][y]` is a candidate conditional
/// `q(y | z)`, one normalized row per `z`.
pub fn verify_variational_bound(joint: &[Vec<f64>], q: &[Vec<f64>]) -> Result<BoundReport> {
    let ny = joint.len();
    let nz = joint.first().map_or(0, Vec::len);
    if ny == 0 || nz == 0 || ny > MAX_SUPPORT || nz > MAX_SUPPORT {
        return Err(Error::InvalidArgument(format!(
            "supports must hold 1..={MAX_SUPPORT} values, got {ny} x {nz}"
        )));
    }
    if joint.iter().any(|r| r.len() != nz) || q.len() != nz || q.iter().any(|r| r.len() != ny) {
        return Err(Error::InvalidArgument("ragged or mismatched pmf tables".into()));
    }
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_pmf(&flat, "joint pmf")?;
    for (z, row) in q.iter().enumerate() {
        check_pmf(row, &format!("q(. | z={z})"))?;
    }
    let mut cross = 0.0;
    let mut cond = 0.0;
    for z in 0..nz {
        let pz: f64 = (0..ny).map(|y| joint[y][z]).sum();
        for y in 0..ny {
            let p = joint[y][z];
            cross += plogq(p, q[z][y]);
            if p > 0.0 {
                cond += plogq(p, p / pz);
            }
        }
    }
    Ok(BoundReport {
        cross_entropy: cross,
        conditional_entropy: cond,
        gap: cross - cond,
    })
}

/// `(H(Z), H(Z, V))` in bits for a joint table `joint[z][v]`.
pub fn entropy_chain(joint: &[Vec<f64>]) -> Result<(f64, f64)> {
    let nv = joint.first().map_or(0, Vec::len);
    if joint.is_empty() || nv == 0 || joint.iter().any(|r| r.len() != nv) {
        return Err(Error::InvalidArgument("ragged or empty joint pmf".into()));
    }
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_pmf(&flat, "joint pmf")?;
    let hz = joint
        .iter()
        .map(|r| {
            let m: f64 = r.iter().sum();
            plogq(m, m)
        })
        .sum();
    let hzv = flat.iter().map(|&p| plogq(p, p)).sum();
    Ok((hz, hzv))
}
