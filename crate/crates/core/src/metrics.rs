//! Signal-quality and classification metrics: scale-invariant SDR, segmental
//! SNR, classification accuracy, and a silhouette separability statistic over
//! embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SI_SDR_CLAMP_DB: f64 = 100.0;
pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;

/// Scale-invariant signal-to-distortion ratio in dB, clamped to +/-100.
///
/// The estimate is projected onto the reference; the ratio of projected
/// energy to residual energy is gain- and sign-invariant.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch { lhs: est.len(), rhs: reference.len() });
    }
    if est.is_empty() {
        return Err(Error::EmptyInput("si_sdr".into()));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let scale = dot / ref_energy;
    let mut signal = 0.0;
    let mut error = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let s = scale * r;
        signal += s * s;
        let d = e - s;
        error += d * d;
    }
    let db = if error == 0.0 {
        f64::INFINITY
    } else if signal == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (signal / error).log10()
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Frame-wise SNR with per-frame clamping, averaged over full frames.
pub fn seg_snr(est: &[f64], reference: &[f64], frame: usize, hop: usize) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch { lhs: est.len(), rhs: reference.len() });
    }
    if frame == 0 || hop == 0 || reference.len() < frame {
        return Err(Error::EmptyInput("seg_snr: no full frame".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + frame <= reference.len() {
        let mut sig = 0.0;
        let mut err = 0.0;
        for i in start..start + frame {
            sig += reference[i] * reference[i];
            let d = reference[i] - est[i];
            err += d * d;
        }
        let db = if err == 0.0 {
            f64::INFINITY
        } else if sig == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * (sig / err).log10()
        };
        total += db.clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB);
        count += 1;
        start += hop;
    }
    Ok(total / count as f64)
}

/// Fraction of predictions matching labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::EmptyInput("accuracy".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean silhouette statistic over labeled points in [-1, 1].
///
/// For each point, a = mean distance to its own cluster, b = smallest mean
/// distance to another cluster, s = (b - a) / max(a, b). Singleton clusters
/// contribute 0.
pub fn separability(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::EmptyInput("separability".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::EmptyInput("separability needs at least 2 classes".into()));
    }
    let n = embeddings.len();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); classes.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = classes.iter().position(|c| *c == labels[j]).unwrap();
            let d = dist(&embeddings[i], &embeddings[j]);
            sums[c].0 += d;
            sums[c].1 += 1;
        }
        let own = classes.iter().position(|c| *c == labels[i]).unwrap();
        if sums[own].1 == 0 {
            continue; // singleton cluster contributes 0
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|(c, (_, n))| *c != own && *n > 0)
            .map(|(_, (s, n))| s / *n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Aggregated evaluation for one system: per-(family, SNR) cells plus
/// corpus-level statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub mean_si_sdr_noisy: f64,
    pub mean_si_sdr_enhanced: f64,
    pub mean_seg_snr_noisy: f64,
    pub mean_seg_snr_enhanced: f64,
    pub nc_accuracy: Option<f64>,
    pub separability: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub family: String,
    pub class_index: usize,
    pub snr_db: f64,
    pub count: usize,
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub seg_snr_noisy: f64,
    pub seg_snr_enhanced: f64,
}

/// Per-utterance evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    pub family: String,
    pub class_index: usize,
    pub snr_db: f64,
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub seg_snr_noisy: f64,
    pub seg_snr_enhanced: f64,
    pub predicted_class: Option<usize>,
}

impl EvalReport {
    /// Aggregate per-utterance rows into (family, SNR) cell means.
    pub fn from_rows(rows: &[UtteranceEval], n_classes: usize) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("eval rows".into()));
        }
        let mut keys: Vec<(String, usize, f64)> = Vec::new();
        for r in rows {
            let key = (r.family.clone(), r.class_index, r.snr_db);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.sort_by(|a, b| (a.1, a.2).partial_cmp(&(b.1, b.2)).unwrap());
        let cells = keys
            .iter()
            .map(|(family, class_index, snr)| {
                let group: Vec<&UtteranceEval> = rows
                    .iter()
                    .filter(|r| r.class_index == *class_index && r.snr_db == *snr)
                    .collect();
                let n = group.len() as f64;
                EvalCell {
                    family: family.clone(),
                    class_index: *class_index,
                    snr_db: *snr,
                    count: group.len(),
                    si_sdr_noisy: group.iter().map(|r| r.si_sdr_noisy).sum::<f64>() / n,
                    si_sdr_enhanced: group.iter().map(|r| r.si_sdr_enhanced).sum::<f64>() / n,
                    seg_snr_noisy: group.iter().map(|r| r.seg_snr_noisy).sum::<f64>() / n,
                    seg_snr_enhanced: group.iter().map(|r| r.seg_snr_enhanced).sum::<f64>() / n,
                }
            })
            .collect();
        let n = rows.len() as f64;
        let labeled: Vec<&UtteranceEval> = rows
            .iter()
            .filter(|r| r.class_index < n_classes && r.predicted_class.is_some())
            .collect();
        let nc_accuracy = if labeled.is_empty() {
            None
        } else {
            let correct = labeled
                .iter()
                .filter(|r| r.predicted_class == Some(r.class_index))
                .count();
            Some(correct as f64 / labeled.len() as f64)
        };
        Ok(EvalReport {
            cells,
            mean_si_sdr_noisy: rows.iter().map(|r| r.si_sdr_noisy).sum::<f64>() / n,
            mean_si_sdr_enhanced: rows.iter().map(|r| r.si_sdr_enhanced).sum::<f64>() / n,
            mean_seg_snr_noisy: rows.iter().map(|r| r.seg_snr_noisy).sum::<f64>() / n,
            mean_seg_snr_enhanced: rows.iter().map(|r| r.seg_snr_enhanced).sum::<f64>() / n,
            nc_accuracy,
            separability: None,
        })
    }
}
