//! Brute-force EER: every operating point is counted from scratch.

use rand::Rng as _;
use spkver::evaluation::{ScoreRecord, TrialLabel};
use spkver::rng::Rng;

/// `(far, frr)` at threshold `t`, counting every record.
fn rates(records: &[ScoreRecord], t: f64) -> (f64, f64) {
    let (mut nt, mut nn, mut fr, mut fa) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match r.label {
            TrialLabel::Target => {
                nt += 1;
                fr += usize::from(r.raw < t);
            }
            TrialLabel::Nontarget => {
                nn += 1;
                fa += usize::from(r.raw >= t);
            }
        }
    }
    (fa as f64 / nn as f64, fr as f64 / nt as f64)
}

/// EER from a threshold sweep over every distinct score plus one threshold
/// above them all, interpolating linearly across the sign change of
/// `frr - far`.
pub fn exhaustive_eer(records: &[ScoreRecord]) -> f64 {
    let mut thresholds: Vec<f64> = records.iter().map(|r| r.raw).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds.iter().map(|&t| rates(records, t)).collect();
    for pair in points.windows(2) {
        let ((far_a, frr_a), (far_b, frr_b)) = (pair[0], pair[1]);
        let (da, db) = (frr_a - far_a, frr_b - far_b);
        if da < 0.0 && db >= 0.0 {
            let alpha = -da / (db - da);
            return frr_a + alpha * (frr_b - frr_a);
        }
    }
    unreachable!("the last operating point rejects everything")
}

/// Random records with both labels present, sometimes with heavy ties.
pub fn random_records(rng: &mut Rng) -> Vec<ScoreRecord> {
    let n = rng.random_range(2..=50);
    let coarse = rng.random_bool(0.5);
    let shift = rng.random_range(0.0..1.0);
    let mut records: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let target = rng.random_bool(0.5);
            let mut raw: f64 = rng.random_range(-1.0..1.0) + if target { shift } else { 0.0 };
            if coarse {
                raw = (raw * 4.0).round() / 4.0;
            }
            let label = if target { TrialLabel::Target } else { TrialLabel::Nontarget };
            ScoreRecord { trial_id: format!("t{i}"), raw, tnorm: None, label }
        })
        .collect();
    records[0].label = TrialLabel::Target;
    records[1].label = TrialLabel::Nontarget;
    records
}
