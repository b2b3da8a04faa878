//! Objective evaluation: DTW alignment, mel-cepstral distortion and F0
//! RMSE, plus tabulated reports over groups of conversion pairs.

pub mod report;

use crate::error::{Error, Result};
use crate::sigproc::{F0Track, MccSequence};

pub use report::{make_report, EvalConfig, EvalPair, EvalReport, FeatureInput, GroupRow, PairMetrics};

/// 10 / ln 10.
const DB_SCALE: f64 = 4.342944819032518;

/// Monotone alignment between two sequences. Pairs (i, j) index the
/// first and second argument of [`dtw_align`] respectively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpPath {
    pub pairs: Vec<(usize, usize)>,
}

impl WarpPath {
    pub fn identity(n: usize) -> WarpPath {
        WarpPath {
            pairs: (0..n).map(|i| (i, i)).collect(),
        }
    }

    /// Checks endpoint, step and monotonicity invariants against the
    /// sequence lengths.
    pub fn validate(&self, na: usize, nb: usize) -> Result<()> {
        let first = self.pairs.first().copied();
        let last = self.pairs.last().copied();
        if first != Some((0, 0)) {
            return Err(Error::InvalidArg(format!("warp path must start at (0,0), got {first:?}")));
        }
        if last != Some((na - 1, nb - 1)) {
            return Err(Error::InvalidArg(format!(
                "warp path must end at ({},{}), got {:?}",
                na - 1,
                nb - 1,
                last
            )));
        }
        for w in self.pairs.windows(2) {
            let (di, dj) = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::InvalidArg(format!(
                    "illegal warp step {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

fn frame_dist(a: &MccSequence, i: usize, b: &MccSequence, j: usize) -> f64 {
    let ra = a.frames.row(i);
    let rb = b.frames.row(j);
    let mut acc = 0.0f64;
    for (&x, &y) in ra.iter().zip(rb) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// Minimal-cost monotone alignment under per-frame Euclidean distance.
/// Cost counts every node on the path, including (0,0). Ties prefer the
/// diagonal step.
pub fn dtw_align(a: &MccSequence, b: &MccSequence) -> Result<(WarpPath, f64)> {
    let na = a.num_frames();
    let nb = b.num_frames();
    if na == 0 || nb == 0 {
        return Err(Error::InvalidArg("cannot align an empty sequence".into()));
    }
    if a.order != b.order {
        return Err(Error::InvalidArg(format!(
            "sequence orders differ: {} vs {}",
            a.order, b.order
        )));
    }
    let idx = |i: usize, j: usize| i * nb + j;
    let mut cost = vec![0.0f64; na * nb];
    for i in 0..na {
        for j in 0..nb {
            let d = frame_dist(a, i, b, j);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cost[idx(0, j - 1)],
                (_, 0) => cost[idx(i - 1, 0)],
                _ => cost[idx(i - 1, j - 1)]
                    .min(cost[idx(i - 1, j)])
                    .min(cost[idx(i, j - 1)]),
            };
            cost[idx(i, j)] = d + best;
        }
    }
    let mut pairs = Vec::with_capacity(na + nb);
    let (mut i, mut j) = (na - 1, nb - 1);
    pairs.push((i, j));
    while i > 0 || j > 0 {
        let (pi, pj) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = cost[idx(i - 1, j - 1)];
                let up = cost[idx(i - 1, j)];
                let left = cost[idx(i, j - 1)];
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        pairs.push((pi, pj));
        i = pi;
        j = pj;
    }
    pairs.reverse();
    let total = cost[idx(na - 1, nb - 1)];
    Ok((WarpPath { pairs }, total))
}

/// Exhaustive minimal path cost over all monotone paths. Exponential;
/// reference implementation for validating [`dtw_align`].
pub fn dtw_brute_force(a: &MccSequence, b: &MccSequence) -> f64 {
    fn go(a: &MccSequence, b: &MccSequence, i: usize, j: usize) -> f64 {
        let here = frame_dist(a, i, b, j);
        if i == 0 && j == 0 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 {
            best = best.min(go(a, b, i - 1, j - 1));
        }
        if i > 0 {
            best = best.min(go(a, b, i - 1, j));
        }
        if j > 0 {
            best = best.min(go(a, b, i, j - 1));
        }
        here + best
    }
    go(a, b, a.num_frames() - 1, b.num_frames() - 1)
}

/// Mel-cepstral distortion in dB: aligns by DTW, then averages
/// 10/ln10 · √(2·Σ_d diff²) over the aligned pairs. c0 is excluded by
/// construction of [`MccSequence`].
pub fn mcd(converted: &MccSequence, reference: &MccSequence) -> Result<f64> {
    if converted.order != reference.order {
        return Err(Error::InvalidArg(format!(
            "MCC order mismatch: converted {} vs reference {}",
            converted.order, reference.order
        )));
    }
    let (path, _) = dtw_align(converted, reference)?;
    let mut acc = 0.0f64;
    for &(i, j) in &path.pairs {
        let mut sq = 0.0f64;
        for (&x, &y) in converted.frames.row(i).iter().zip(reference.frames.row(j)) {
            let d = x as f64 - y as f64;
            sq += d * d;
        }
        acc += DB_SCALE * (2.0 * sq).sqrt();
    }
    Ok(acc / path.pairs.len() as f64)
}

/// F0 root-mean-square error in Hz over aligned pairs where the
/// reference frame is voiced. By the default convention an unvoiced
/// converted frame counts the full reference F0 as error; with
/// `skip_unvoiced_converted` those pairs are dropped instead.
pub fn f0_rmse_with(
    converted: &F0Track,
    reference: &F0Track,
    path: &WarpPath,
    skip_unvoiced_converted: bool,
) -> Result<f64> {
    if !reference.voiced.iter().any(|&v| v) {
        return Err(Error::InvalidArg(
            "reference track has no voiced frames".into(),
        ));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for &(i, j) in &path.pairs {
        if !reference.voiced[j] {
            continue;
        }
        let err = if converted.voiced[i] {
            converted.values[i] as f64 - reference.values[j] as f64
        } else if skip_unvoiced_converted {
            continue;
        } else {
            reference.values[j] as f64
        };
        acc += err * err;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArg(
            "no aligned pairs with a voiced reference frame".into(),
        ));
    }
    Ok((acc / count as f64).sqrt())
}

/// [`f0_rmse_with`] under the default full-error convention.
pub fn f0_rmse(converted: &F0Track, reference: &F0Track, path: &WarpPath) -> Result<f64> {
    f0_rmse_with(converted, reference, path, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f32]]) -> MccSequence {
        let order = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MccSequence {
            frames: Tensor::from_vec(&[rows.len(), order], data).unwrap(),
            order,
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, n: usize, order: usize) -> MccSequence {
        let data: Vec<f32> = (0..n * order).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MccSequence {
            frames: Tensor::from_vec(&[n, order], data).unwrap(),
            order,
        }
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let a = seq(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0]]);
        let (path, cost) = dtw_align(&a, &a).unwrap();
        assert_eq!(path.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn degenerate_lengths() {
        let a = seq(&[&[0.0]]);
        let b = seq(&[&[0.0], &[0.0], &[0.0]]);
        let (path, cost) = dtw_align(&a, &b).unwrap();
        assert_eq!(path.pairs, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let na = rng.gen_range(1..=8);
            let nb = rng.gen_range(1..=8);
            let a = random_seq(&mut rng, na, 3);
            let b = random_seq(&mut rng, nb, 3);
            let (path, cost) = dtw_align(&a, &b).unwrap();
            path.validate(na, nb).unwrap();
            let brute = dtw_brute_force(&a, &b);
            assert!(
                (cost - brute).abs() < 1e-9,
                "trial {trial}: dp {cost} vs brute {brute}"
            );
        }
    }

    #[test]
    fn path_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let na = rng.gen_range(1..=20);
            let nb = rng.gen_range(1..=20);
            let a = random_seq(&mut rng, na, 4);
            let b = random_seq(&mut rng, nb, 4);
            let (path, _) = dtw_align(&a, &b).unwrap();
            path.validate(na, nb).unwrap();
        }
    }

    #[test]
    fn mcd_identity_is_zero() {
        let a = seq(&[&[0.3, -0.2], &[0.1, 0.9]]);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mcd_single_frame_values() {
        let a = seq(&[&[1.0]]);
        let b = seq(&[&[0.0]]);
        let got = mcd(&a, &b).unwrap();
        assert!((got - 6.141851463713754).abs() < 1e-9, "got {got}");

        let mut x = vec![0.0f32; 25];
        let y = vec![0.0f32; 25];
        x[7] = 0.5;
        let a = seq(&[&x]);
        let b = seq(&[&y]);
        let got = mcd(&a, &b).unwrap();
        let want = DB_SCALE * (2.0f64 * 0.25).sqrt();
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
        assert!((got - 3.071).abs() < 1e-3);
    }

    #[test]
    fn mcd_order_mismatch_errors() {
        let a = seq(&[&[1.0]]);
        let b = seq(&[&[0.0, 0.0]]);
        assert!(mcd(&a, &b).is_err());
    }

    #[test]
    fn mcd_symmetry_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let na = rng.gen_range(2..=10);
            let nb = rng.gen_range(2..=10);
            let a = random_seq(&mut rng, na, 5);
            let b = random_seq(&mut rng, nb, 5);
            let ab = mcd(&a, &b).unwrap();
            let ba = mcd(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        }
        // scale law on an identity-path pair: k times the coefficient
        // difference means k times the distortion
        let a = seq(&[&[0.2, 0.4], &[0.0, 0.1]]);
        let zero = seq(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let m1 = mcd(&a, &zero).unwrap();
        let mut scaled = a.clone();
        for v in scaled.frames.data_mut() {
            *v *= 3.0;
        }
        let m3 = mcd(&scaled, &zero).unwrap();
        assert!((m3 - 3.0 * m1).abs() < 1e-6, "{m3} vs {}", 3.0 * m1);
    }

    #[test]
    fn f0_rmse_examples() {
        let r = F0Track::from_values(vec![100.0, 200.0]);
        let c = F0Track::from_values(vec![110.0, 190.0]);
        let path = WarpPath::identity(2);
        let got = f0_rmse(&c, &r, &path).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "got {got}");
        assert_eq!(f0_rmse(&r, &r, &path).unwrap(), 0.0);
    }

    #[test]
    fn f0_rmse_unvoiced_reference_errors() {
        let r = F0Track::from_values(vec![0.0, 0.0]);
        let c = F0Track::from_values(vec![100.0, 100.0]);
        assert!(f0_rmse(&c, &r, &WarpPath::identity(2)).is_err());
    }

    #[test]
    fn f0_rmse_unvoiced_converted_conventions() {
        let r = F0Track::from_values(vec![100.0, 200.0]);
        let c = F0Track::from_values(vec![0.0, 200.0]);
        let path = WarpPath::identity(2);
        // full-error: sqrt((100^2 + 0)/2)
        let full = f0_rmse(&c, &r, &path).unwrap();
        assert!((full - (10000.0f64 / 2.0).sqrt()).abs() < 1e-9);
        // skip: only the voiced pair remains, which matches exactly
        let skip = f0_rmse_with(&c, &r, &path, true).unwrap();
        assert_eq!(skip, 0.0);
    }

    #[test]
    fn f0_rmse_ignores_mutually_unvoiced_padding() {
        let r = F0Track::from_values(vec![100.0, 200.0]);
        let c = F0Track::from_values(vec![110.0, 190.0]);
        let base = f0_rmse(&c, &r, &WarpPath::identity(2)).unwrap();
        let r2 = F0Track::from_values(vec![100.0, 200.0, 0.0, 0.0]);
        let c2 = F0Track::from_values(vec![110.0, 190.0, 0.0, 0.0]);
        let padded = f0_rmse(&c2, &r2, &WarpPath::identity(4)).unwrap();
        assert!((base - padded).abs() < 1e-12);
    }
}
