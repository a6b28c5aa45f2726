//! Circular alignment of weekly patterns by mean absolute error to the
//! column-wise median.
//!
//! The loop recomputes the median template, moves every row to the hourly
//! rotation closest to it, and stops as soon as the total error
//! (sum over rows of MAE to the median of the aligned matrix) fails to
//! decrease strictly. Before the loop, rows are pre-aligned onto the rotated
//! row that best explains the others; without it, two rows offset by a few
//! hours sit symmetrically around their median and never move.

use rayon::prelude::*;

use super::TemporalError;
use crate::ingest::WEEK_HOURS;

/// Candidate hourly rotations in tie-break order: smallest magnitude first,
/// negative before positive.
pub const SHIFT_CANDIDATES: [i64; 24] = [
    0, -1, 1, -2, 2, -3, 3, -4, 4, -5, 5, -6, 6, -7, 7, -8, 8, -9, 9, -10, 10, -11, 11, -12,
];

/// Largest relative rotation examined while seeding.
const MAX_RELATIVE: i64 = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignParams {
    pub max_iterations: usize,
    /// Upper bound on rows tried as the seed template.
    pub seed_candidates: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            seed_candidates: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// Time-zone shift per row in `[0, 23]`; east of the template is positive.
    pub shifts: Vec<u8>,
    /// Net rotation per row: `aligned[i] == rotate(source[i], rotations[i])`.
    pub rotations: Vec<usize>,
    pub aligned: Vec<Vec<f64>>,
    /// MAE of each aligned row to the median of `aligned`.
    pub row_errors: Vec<f64>,
    pub total_error: f64,
    /// Outer iterations run, including the final non-improving one.
    pub iterations: usize,
    /// `(iteration, total_error)` of every accepted state; iteration 0 is the
    /// seeded start.
    pub log: Vec<(usize, f64)>,
}

/// `rotate(w, s)[i] == w[(i + s) mod len]`.
pub fn rotate(w: &[f64], s: i64) -> Vec<f64> {
    let n = w.len();
    if n == 0 {
        return Vec::new();
    }
    let k = s.rem_euclid(n as i64) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&w[k..]);
    out.extend_from_slice(&w[..k]);
    out
}

pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// MAE between `rotate(a, s)` and `b` without materializing the rotation.
fn rotated_mae(a: &[f64], s: i64, b: &[f64]) -> f64 {
    let n = a.len();
    let k = s.rem_euclid(n as i64) as usize;
    let (head, tail) = a.split_at(k);
    let sum: f64 = tail
        .iter()
        .chain(head)
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .sum();
    sum / n as f64
}

/// Column-wise median; even counts average the two middle values.
pub fn column_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    let mut col = Vec::with_capacity(n);
    (0..width)
        .map(|c| {
            col.clear();
            col.extend(rows.iter().map(|r| r[c]));
            col.sort_unstable_by(f64::total_cmp);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Sum over rows of MAE to the column median of `rows`.
pub fn total_error(rows: &[Vec<f64>]) -> f64 {
    let m = column_median(rows);
    rows.iter().map(|r| mae(r, &m)).sum()
}

/// Best candidate rotation of `row` toward `template`, first in tie order.
fn best_shift(row: &[f64], template: &[f64]) -> (i64, f64) {
    let mut best = (0, f64::INFINITY);
    for &s in &SHIFT_CANDIDATES {
        let e = rotated_mae(row, s, template);
        if e < best.1 {
            best = (s, e);
        }
    }
    best
}

/// `d[u + 23] = MAE(rotate(row, u), template)` for `u` in `-23..=23`.
fn relative_errors(row: &[f64], template: &[f64]) -> [f64; 47] {
    let mut d = [0.0; 47];
    for (slot, u) in d.iter_mut().zip(-MAX_RELATIVE..=MAX_RELATIVE) {
        *slot = rotated_mae(row, u, template);
    }
    d
}

/// Best candidate `s` for a row when the template is the seed row rotated by
/// `t`: `MAE(rotate(row, s), rotate(seed, t)) == d[s - t]`.
fn best_against_rotated(d: &[f64; 47], t: i64) -> (i64, f64) {
    let mut best = (0, f64::INFINITY);
    for &s in &SHIFT_CANDIDATES {
        let e = d[(s - t + MAX_RELATIVE) as usize];
        if e < best.1 {
            best = (s, e);
        }
    }
    best
}

fn seed_candidate_rows(n: usize, limit: usize) -> Vec<usize> {
    let k = limit.max(1);
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|i| i * n / k).collect()
    }
}

/// Chooses the rotated row minimizing the summed best-rotation error of all
/// rows, and returns each row's rotation onto it.
fn seed_shifts(rows: &[Vec<f64>], params: &AlignParams) -> Vec<i64> {
    let candidates = seed_candidate_rows(rows.len(), params.seed_candidates);
    let scored: Vec<(f64, i64)> = candidates
        .par_iter()
        .map(|&r| {
            let dists: Vec<[f64; 47]> = rows
                .iter()
                .map(|row| relative_errors(row, &rows[r]))
                .collect();
            let mut best = (f64::INFINITY, 0);
            for &t in &SHIFT_CANDIDATES {
                let score: f64 = dists.iter().map(|d| best_against_rotated(d, t).1).sum();
                if score < best.0 {
                    best = (score, t);
                }
            }
            best
        })
        .collect();
    let (pick, &(_, t)) = scored
        .iter()
        .enumerate()
        .fold(
            None,
            |acc: Option<(usize, &(f64, i64))>, (i, cand)| match acc {
                Some((_, b)) if b.0 <= cand.0 => acc,
                _ => Some((i, cand)),
            },
        )
        .expect("at least one candidate");
    let seed = &rows[candidates[pick]];
    rows.par_iter()
        .map(|row| best_against_rotated(&relative_errors(row, seed), t).0)
        .collect()
}

/// Aligns normalized 168-hour patterns onto a common template.
pub fn align(rows: &[Vec<f64>], params: &AlignParams) -> Result<AlignmentResult, TemporalError> {
    if rows.is_empty() {
        return Err(TemporalError::NoRows);
    }
    if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != WEEK_HOURS) {
        return Err(TemporalError::BadRowLength { row, len: r.len() });
    }

    let mut rotation = seed_shifts(rows, params);
    let mut aligned: Vec<Vec<f64>> = rows
        .iter()
        .zip(&rotation)
        .map(|(r, &s)| rotate(r, s))
        .collect();
    let mut error = total_error(&aligned);
    let mut log = vec![(0, error)];
    let mut iterations = 0;

    while iterations < params.max_iterations {
        iterations += 1;
        let template = column_median(&aligned);
        let moves: Vec<i64> = aligned
            .par_iter()
            .map(|row| best_shift(row, &template).0)
            .collect();
        let candidate: Vec<Vec<f64>> = aligned
            .iter()
            .zip(&moves)
            .map(|(r, &s)| if s == 0 { r.clone() } else { rotate(r, s) })
            .collect();
        let candidate_error = total_error(&candidate);
        if candidate_error < error {
            aligned = candidate;
            error = candidate_error;
            for (acc, s) in rotation.iter_mut().zip(&moves) {
                *acc = (*acc + s).rem_euclid(WEEK_HOURS as i64);
            }
            log.push((iterations, error));
        } else {
            break;
        }
    }

    let median = column_median(&aligned);
    let row_errors = aligned.iter().map(|r| mae(r, &median)).collect();
    Ok(AlignmentResult {
        shifts: rotation
            .iter()
            .map(|&r| (-r).rem_euclid(24) as u8)
            .collect(),
        rotations: rotation
            .iter()
            .map(|&r| r.rem_euclid(WEEK_HOURS as i64) as usize)
            .collect(),
        aligned,
        row_errors,
        total_error: error,
        iterations,
        log,
    })
}
