//! Deterministic 2D projection of embeddings via PCA.

use crate::error::{Error, Result};

/// Jacobi eigendecomposition of a symmetric matrix given as rows.
/// Returns (eigenvalues, eigenvectors-as-columns) sorted by decreasing
/// eigenvalue.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-30 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).expect("finite eigenvalue"));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (values, vectors)
}

/// Projects embeddings onto their top-2 principal directions. Sign
/// convention: each direction is flipped so its largest-magnitude
/// component is positive.
pub fn project_2d(embeddings: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    if embeddings.len() < 3 {
        return Err(Error::InvalidArg(format!(
            "need at least 3 embeddings to project, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArg(
            "embeddings have inconsistent dimensions".into(),
        ));
    }
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for e in embeddings {
        for (m, &x) in mean.iter_mut().zip(e) {
            *m += x as f64 / n;
        }
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();
    let mut cov = vec![vec![0.0f64; dim]; dim];
    for row in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += row[i] * row[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let scale: f64 = values.iter().map(|v| v.abs()).sum();
    if values[0] <= scale.max(1.0) * 1e-12 || values[0] <= 0.0 {
        return Err(Error::InvalidArg(
            "embeddings are all identical: no principal direction (rank 0)".into(),
        ));
    }
    let mut axes: Vec<Vec<f64>> = vectors.into_iter().take(2).collect();
    if dim < 2 {
        axes.push(vec![0.0; dim]);
    }
    for axis in axes.iter_mut() {
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            for x in axis.iter_mut() {
                *x = -*x;
            }
        }
    }
    Ok(centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&axes[0]).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&axes[1]).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigen_recovers_diagonal() {
        let m = vec![
            vec![3.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ];
        let (values, vectors) = symmetric_eigen(&m);
        assert!((values[0] - 3.0).abs() < 1e-12);
        assert!((values[1] - 2.0).abs() < 1e-12);
        assert!((values[2] - 1.0).abs() < 1e-12);
        assert!(vectors[0][0].abs() > 0.999);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mut m = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        let (values, vectors) = symmetric_eigen(&m);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += values[k] * vectors[k][i] * vectors[k][j];
                }
                assert!((acc - m[i][j]).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn two_d_input_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<Vec<f32>> = (0..12)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let proj = project_2d(&points).unwrap();
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let orig = ((points[i][0] - points[j][0]).powi(2)
                    + (points[i][1] - points[j][1]).powi(2)) as f64;
                let got = (proj[i].0 - proj[j].0).powi(2) + (proj[i].1 - proj[j].1).powi(2);
                assert!(
                    (orig.sqrt() - got.sqrt()).abs() < 1e-6,
                    "pair ({i},{j}): {} vs {}",
                    orig.sqrt(),
                    got.sqrt()
                );
            }
        }
    }

    #[test]
    fn identical_embeddings_error() {
        let points = vec![vec![0.5f32, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(project_2d(&points).is_err());
    }

    #[test]
    fn duplicates_map_to_duplicates() {
        let points = vec![
            vec![1.0f32, 0.0, 0.2],
            vec![0.0, 1.0, -0.3],
            vec![1.0, 0.0, 0.2],
            vec![0.4, 0.4, 0.0],
        ];
        let proj = project_2d(&points).unwrap();
        assert!((proj[0].0 - proj[2].0).abs() < 1e-12);
        assert!((proj[0].1 - proj[2].1).abs() < 1e-12);
    }

    #[test]
    fn tight_clusters_stay_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sigma = 0.05f32;
        let mut points = Vec::new();
        for _ in 0..20 {
            points.push(vec![
                rng.gen_range(-sigma..sigma),
                rng.gen_range(-sigma..sigma),
                rng.gen_range(-sigma..sigma) + 0.0,
                rng.gen_range(-sigma..sigma),
            ]);
        }
        for _ in 0..20 {
            points.push(vec![
                rng.gen_range(-sigma..sigma) + 1.0,
                rng.gen_range(-sigma..sigma) + 1.0,
                rng.gen_range(-sigma..sigma),
                rng.gen_range(-sigma..sigma),
            ]);
        }
        let proj = project_2d(&points).unwrap();
        let centroid = |range: std::ops::Range<usize>| {
            let len = range.len() as f64;
            let mut c = (0.0, 0.0);
            for i in range {
                c.0 += proj[i].0 / len;
                c.1 += proj[i].1 / len;
            }
            c
        };
        let c0 = centroid(0..20);
        let c1 = centroid(20..40);
        let between = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
        let mut within = 0.0;
        for (i, p) in proj.iter().enumerate() {
            let c = if i < 20 { c0 } else { c1 };
            within += ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() / 40.0;
        }
        assert!(
            between > 3.0 * within,
            "between {between} vs within {within}"
        );
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let points = vec![
            vec![1.0f32, 2.0, 0.0],
            vec![2.0, 4.0, 0.1],
            vec![3.0, 6.0, -0.1],
            vec![4.0, 8.0, 0.05],
        ];
        let a = project_2d(&points).unwrap();
        let b = project_2d(&points).unwrap();
        assert_eq!(a, b);
        // dominant variance direction is (1,2,0)/√5; its largest
        // component is positive, so x must grow with the point index
        assert!(a[3].0 > a[0].0);
    }
}
