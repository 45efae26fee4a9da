//! Small shared building blocks for the encoder and denoiser networks:
//! signal framing, linear layers, layer normalization composed from tape
//! primitives, sinusoidal encodings, and overlap-add synthesis.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{gauss, Tensor};

/// Number of full frames of length `win` with hop `hop` covering `len`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    assert!(len >= win && hop > 0, "bad framing: len {len}, win {win}, hop {hop}");
    (len - win) / hop + 1
}

/// Slice a 1-D signal into overlapping frames, stacked as rows.
pub fn frame_signal(x: &Tensor, win: usize, hop: usize) -> Result<Tensor> {
    let n_frames = frame_count(x.numel(), win, hop);
    let mut rows = x.slice(0, win)?.reshape(&[1, win])?;
    for f in 1..n_frames {
        let row = x.slice(f * hop, win)?.reshape(&[1, win])?;
        rows = rows.concat(&row, 0)?;
    }
    Ok(rows)
}

/// `x @ w + bias`, the bias broadcast over rows via a ones column.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let out = x.matmul(w)?;
    match b {
        Some(b) => {
            let ones = Tensor::ones(&[out.rows(), 1]);
            out.add(&ones.matmul(b)?)
        }
        None => Ok(out),
    }
}

/// Broadcast a `[1, d]` row over `rows` rows.
pub fn broadcast_rows(row: &Tensor, rows: usize) -> Result<Tensor> {
    Tensor::ones(&[rows, 1]).matmul(row)
}

/// Row-wise layer normalization with learned gain and bias (`[1, d]` each).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = (x.rows(), x.cols());
    let avg = Tensor::from_vec(vec![d, 1], vec![1.0 / d as f64; d]);
    let row_mean = x.matmul(&avg)?;
    let centered = x.sub(&row_mean.matmul(&Tensor::ones(&[1, d]))?)?;
    let row_var = centered.mul(&centered)?.matmul(&avg)?;
    // inverse standard deviation = exp(-0.5 * ln(var + eps))
    let inv_sd = row_var.add_scalar(eps).log().mul_scalar(-0.5).exp();
    let normalized = centered.mul(&inv_sd.matmul(&Tensor::ones(&[1, d]))?)?;
    let scaled = normalized.mul(&broadcast_rows(gain, rows)?)?;
    scaled.add(&broadcast_rows(bias, rows)?)
}

/// Sinusoidal positional table `[n, dim]` (constant, not learned).
pub fn positional_encoding(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::matrix(n, dim, data)
}

/// Sinusoidal embedding of a diffusion step, as a `[1, dim]` row.
pub fn time_encoding(t: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::matrix(1, dim, data)
}

/// Constant overlap-add synthesis matrix `[n_frames * win, len]` using a
/// triangular window with per-sample normalization, so that synthesis of
/// unmodified frames reproduces the framed signal exactly.
pub fn overlap_add_matrix(len: usize, win: usize, hop: usize) -> Tensor {
    let n_frames = frame_count(len, win, hop);
    let tri: Vec<f64> = (0..win)
        .map(|j| {
            let center = (win - 1) as f64 / 2.0;
            1.0 - (j as f64 - center).abs() / (center + 1.0)
        })
        .collect();
    let mut norm = vec![0.0; len];
    for f in 0..n_frames {
        for j in 0..win {
            norm[f * hop + j] += tri[j];
        }
    }
    let mut data = vec![0.0; n_frames * win * len];
    for f in 0..n_frames {
        for j in 0..win {
            let n = f * hop + j;
            data[(f * win + j) * len + n] = tri[j] / norm[n];
        }
    }
    Tensor::matrix(n_frames * win, len, data)
}

/// Orthonormal cosine/sine analysis basis for frames of even length `n`,
/// as an `[n, n]` matrix whose columns are the basis vectors. Multiplying
/// framed signals by it moves them into a frequency-like coordinate system;
/// multiplying by its transpose inverts exactly.
pub fn frame_basis(n: usize) -> Tensor {
    assert!(n >= 2 && n.is_multiple_of(2), "frame basis needs even length, got {n}");
    let tau = std::f64::consts::TAU;
    let mut data = vec![0.0; n * n];
    for s in 0..n {
        for j in 0..n {
            let v = if j == 0 {
                1.0 / (n as f64).sqrt()
            } else if j == n - 1 {
                (std::f64::consts::PI * s as f64).cos() / (n as f64).sqrt()
            } else {
                let k = j.div_ceil(2);
                let angle = tau * k as f64 * s as f64 / n as f64;
                let val = if j % 2 == 1 { angle.cos() } else { angle.sin() };
                val * (2.0 / n as f64).sqrt()
            };
            data[s * n + j] = v;
        }
    }
    Tensor::matrix(n, n, data)
}

/// Constant `[n, n/2 + 1]` matrix summing squared basis coefficients into
/// per-frequency energy bins (DC and Nyquist alone, cosine/sine in pairs).
pub fn bin_pairing(n: usize) -> Tensor {
    let bins = n / 2 + 1;
    let mut data = vec![0.0; n * bins];
    data[0] = 1.0; // DC
    data[(n - 1) * bins + (bins - 1)] = 1.0; // Nyquist
    for j in 1..n - 1 {
        let k = j.div_ceil(2);
        data[j * bins + k] = 1.0;
    }
    Tensor::matrix(n, bins, data)
}

/// Constant first-difference matrix over rows: row 0 maps to zero, row f to
/// `x[f] - x[f-1]`.
pub fn row_delta_matrix(rows: usize) -> Tensor {
    let mut data = vec![0.0; rows * rows];
    for f in 1..rows {
        data[f * rows + f] = 1.0;
        data[f * rows + f - 1] = -1.0;
    }
    Tensor::matrix(rows, rows, data)
}

/// Weight init: zero-mean normal scaled by `1/sqrt(fan_in)`.
pub fn init_weight(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    gauss(rng, &[rows, cols]).mul_scalar(1.0 / (rows as f64).sqrt())
}

pub fn zeros_row(dim: usize) -> Tensor {
    Tensor::zeros(&[1, dim])
}

pub fn ones_row(dim: usize) -> Tensor {
    Tensor::ones(&[1, dim])
}
