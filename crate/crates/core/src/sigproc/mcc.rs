use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::sigproc::{MccSequence, MelSpectrogram};

/// Orthonormal DCT-II basis row for coefficient `k` over `b` bands.
fn dct_row(k: usize, bands: usize) -> Vec<f64> {
    let scale = if k == 0 {
        (1.0 / bands as f64).sqrt()
    } else {
        (2.0 / bands as f64).sqrt()
    };
    (0..bands)
        .map(|b| {
            scale * (std::f64::consts::PI * (b as f64 + 0.5) * k as f64 / bands as f64).cos()
        })
        .collect()
}

/// Per-frame orthonormal cosine transform of the log-mel vector, keeping
/// coefficients 1..=D and dropping c0. A transform over B bands has B-1
/// non-DC coefficients, so the retained order is `min(D, B-1)`.
pub fn mel_to_mcc(m: &MelSpectrogram, order: usize) -> Result<MccSequence> {
    let bands = m.bands();
    if order == 0 || order > bands {
        return Err(Error::InvalidArg(format!(
            "mcc order {order} must be in 1..={bands}"
        )));
    }
    let keep = order.min(bands - 1);
    let basis: Vec<Vec<f64>> = (1..=keep).map(|k| dct_row(k, bands)).collect();
    let n = m.num_frames();
    let mut frames = Tensor::zeros(&[n, keep]);
    for t in 0..n {
        let x = m.frames.row(t);
        let out = frames.row_mut(t);
        for (j, row) in basis.iter().enumerate() {
            let mut acc = 0.0f64;
            for (w, &v) in row.iter().zip(x) {
                acc += w * v as f64;
            }
            out[j] = acc as f32;
        }
    }
    Ok(MccSequence { frames, order: keep })
}

/// Inverse transform used by tests: rebuilds log-mel from coefficients
/// 1..=order plus an explicitly supplied per-frame c0.
pub fn mcc_to_mel_with_c0(mcc: &MccSequence, c0: &[f32], bands: usize) -> Result<Tensor<f32>> {
    let n = mcc.frames.rows();
    if c0.len() != n {
        return Err(Error::shape("mcc_to_mel_with_c0", n, c0.len()));
    }
    let rows: Vec<Vec<f64>> = (0..=mcc.order).map(|k| dct_row(k, bands)).collect();
    let mut mel = Tensor::zeros(&[n, bands]);
    for t in 0..n {
        let out = mel.row_mut(t);
        for b in 0..bands {
            let mut acc = rows[0][b] * c0[t] as f64;
            for k in 1..=mcc.order {
                acc += rows[k][b] * mcc.frames.at2(t, k - 1) as f64;
            }
            out[b] = acc as f32;
        }
    }
    Ok(mel)
}

/// The c0 coefficients that [`mel_to_mcc`] drops; used by round-trip tests.
pub fn mcc_c0(m: &MelSpectrogram) -> Vec<f32> {
    let bands = m.bands();
    let row = dct_row(0, bands);
    (0..m.num_frames())
        .map(|t| {
            let mut acc = 0.0f64;
            for (w, &v) in row.iter().zip(m.frames.row(t)) {
                acc += w * v as f64;
            }
            acc as f32
        })
        .collect()
}
