use crate::error::{Error, Result};
use crate::types::EmpiricalMeasure;

use super::build_cost_matrix;

/// Replicated atoms per side accepted unconditionally; larger instances are
/// accepted only while the number of distinct assignments stays below
/// [`ORACLE_MAX_ASSIGNMENTS`].
pub const ORACLE_MAX_ATOMS: usize = 10;
/// `10!`, the assignment count of the largest unconditional instance.
pub const ORACLE_MAX_ASSIGNMENTS: u128 = 3_628_800;

/// Reference EMD by exhaustive search over assignments.
///
/// Both measures must be uniform. Each atom is replicated so that both sides
/// have `lcm(m, n)` unit atoms, and every assignment of source units to target
/// units is enumerated (with branch pruning on partial cost). Coincident
/// target atoms are pooled, so the enumeration runs over distinct multiset
/// assignments. Independent of the network simplex.
pub fn oracle_emd(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if !(a.is_uniform() && b.is_uniform()) {
        return Err(Error::OracleTooLarge(
            "the exhaustive oracle only handles uniformly weighted measures".into(),
        ));
    }
    let (m, n) = (a.len(), b.len());
    let g = {
        let (mut x, mut y) = (m, n);
        while y != 0 {
            (x, y) = (y, x % y);
        }
        x
    };
    let size = m / g * n;
    let base = build_cost_matrix(a, b)?;
    let (ra, rb) = (size / m, size / n);

    // pool identical target atoms into groups with a shared capacity
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for j in 0..n {
        match groups.iter_mut().find(|(rep, _)| b.point(*rep) == b.point(j)) {
            Some((_, cap)) => *cap += rb,
            None => groups.push((j, rb)),
        }
    }
    let count = assignment_count(size, groups.iter().map(|&(_, c)| c));
    if size > ORACLE_MAX_ATOMS && count.is_none_or(|c| c > ORACLE_MAX_ASSIGNMENTS) {
        return Err(Error::OracleTooLarge(format!(
            "{m} x {n} atoms replicate to {size} per side with more than \
             {ORACLE_MAX_ASSIGNMENTS} distinct assignments"
        )));
    }

    let cost: Vec<Vec<f64>> = (0..size)
        .map(|i| groups.iter().map(|&(rep, _)| base.get(i / ra, rep)).collect())
        .collect();
    let mut caps: Vec<usize> = groups.iter().map(|&(_, c)| c).collect();
    let mut best = f64::INFINITY;
    search(&cost, 0, 0.0, &mut caps, &mut best);
    Ok(best / size as f64)
}

/// Multinomial `size! / prod(c!)`, or `None` once it exceeds `u128`.
fn assignment_count(size: usize, caps: impl Iterator<Item = usize>) -> Option<u128> {
    // product of binomials C(remaining, c)
    let mut remaining = size as u128;
    let mut total: u128 = 1;
    for c in caps {
        let mut binom: u128 = 1;
        for t in 0..c as u128 {
            binom = binom.checked_mul(remaining - t)? / (t + 1);
        }
        total = total.checked_mul(binom)?;
        remaining -= c as u128;
    }
    Some(total)
}

fn search(cost: &[Vec<f64>], row: usize, partial: f64, caps: &mut [usize], best: &mut f64) {
    if row == cost.len() {
        if partial < *best {
            *best = partial;
        }
        return;
    }
    for j in 0..caps.len() {
        if caps[j] == 0 {
            continue;
        }
        let next = partial + cost[row][j];
        // costs are non-negative so a partial sum already above the best
        // complete assignment cannot improve on it
        if next > *best {
            continue;
        }
        caps[j] -= 1;
        search(cost, row + 1, next, caps, best);
        caps[j] += 1;
    }
}
