//! Synthetic labeled corpus: harmonic clean signals mixed with parametric
//! noise families at controlled SNRs, split into train / in-distribution test
//! / held-out unseen-noise evaluation sets.
//!
//! Signals persist as raw little-endian 64-bit floats next to a JSON manifest
//! carrying labels, SNRs and seeds, so a corpus is byte-reproducible from its
//! seed and portable across implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

pub const MANIFEST_VERSION: u32 = 1;

/// Fixed-length sample sequence plus its nominal rate (metadata only).
#[derive(Debug, Clone)]
pub struct Signal {
    pub samples: Vec<f64>,
}

impl Signal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generator kinds for the noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    White,
    PinkLike,
    BandLimited,
    AmTone,
    FmTone,
    ImpulseTrain,
    ChirpSweep,
    TwoToneBeat,
    GatedBursts,
    FilteredBabble,
    // held-out families
    RotorThump,
    CryBursts,
    CrowdBed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseFamily {
    pub name: String,
    pub class_index: usize,
    pub kind: FamilyKind,
    pub stationary: bool,
}

pub fn seen_families() -> Vec<NoiseFamily> {
    use FamilyKind::*;
    let kinds: [(FamilyKind, &str, bool); 10] = [
        (White, "white", true),
        (PinkLike, "pink_like", true),
        (BandLimited, "band_limited", true),
        (AmTone, "am_tone", false),
        (FmTone, "fm_tone", false),
        (ImpulseTrain, "impulse_train", false),
        (ChirpSweep, "chirp_sweep", false),
        (TwoToneBeat, "two_tone_beat", true),
        (GatedBursts, "gated_bursts", false),
        (FilteredBabble, "filtered_babble", false),
    ];
    kinds
        .iter()
        .enumerate()
        .map(|(i, (kind, name, stationary))| NoiseFamily {
            name: (*name).into(),
            class_index: i,
            kind: *kind,
            stationary: *stationary,
        })
        .collect()
}

pub fn held_out_families() -> Vec<NoiseFamily> {
    use FamilyKind::*;
    vec![
        NoiseFamily { name: "rotor_thump".into(), class_index: 10, kind: RotorThump, stationary: false },
        NoiseFamily { name: "cry_bursts".into(), class_index: 11, kind: CryBursts, stationary: false },
        NoiseFamily { name: "crowd_bed".into(), class_index: 12, kind: CrowdBed, stationary: true },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Train records per seen family.
    pub n_train: usize,
    /// In-distribution test records per seen family.
    pub n_test: usize,
    /// Unseen-eval records per held-out family per SNR point.
    pub n_unseen: usize,
    pub train_snrs_db: Vec<f64>,
    pub unseen_snrs_db: Vec<f64>,
    pub signal_len: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 64,
            n_test: 8,
            n_unseen: 6,
            train_snrs_db: vec![0.0, 5.0, 10.0, 15.0],
            unseen_snrs_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            signal_len: 256,
            sample_rate: 8000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    UnseenEval,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::UnseenEval => "unseen_eval",
        }
    }
}

/// One labeled (clean, noisy) pair.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub split: Split,
    pub family: String,
    pub class_index: usize,
    pub stationary: bool,
    pub snr_db: f64,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub family: String,
    pub class_index: usize,
    pub stationary: bool,
    pub snr_db: f64,
    pub clean_path: String,
    pub noisy_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub signal_len: usize,
    pub sample_rate: u32,
    pub families: Vec<NoiseFamily>,
    pub records: Vec<ManifestRecord>,
}

// ── Clean signal generation ─────────────────────────────────────────────

/// Sum of 2-4 harmonics of an integer fundamental with a slow raised-cosine
/// amplitude envelope, peak-normalized to 0.5.
pub fn gen_clean(len: usize, rng: &mut Rng) -> Signal {
    let f0 = 4 + rng.uniform_int(9) as usize; // 4..=12 cycles per window
    let n_harm = 2 + rng.uniform_int(3) as usize; // 2..=4
    let env_cycles = (1 + rng.uniform_int(2)) as f64; // 1 or 2
    let env_depth = rng.uniform_range(0.0, 0.5);
    let env_phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let mut amps = Vec::with_capacity(n_harm);
    let mut phases = Vec::with_capacity(n_harm);
    for h in 0..n_harm {
        amps.push(rng.uniform_range(0.3, 1.0) / (h + 1) as f64);
        phases.push(rng.uniform_range(0.0, std::f64::consts::TAU));
    }
    let tau = std::f64::consts::TAU;
    let mut samples = vec![0.0; len];
    for (n, s) in samples.iter_mut().enumerate() {
        let t = n as f64 / len as f64;
        let env = 1.0 + env_depth * (tau * env_cycles * t + env_phase).cos();
        let mut v = 0.0;
        for h in 0..n_harm {
            v += amps[h] * (tau * (f0 * (h + 1)) as f64 * t + phases[h]).sin();
        }
        *s = env * v;
    }
    normalize_peak(&mut samples, 0.5);
    Signal { samples }
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max > 0.0, "degenerate all-zero signal");
    let scale = peak / max;
    for s in samples.iter_mut() {
        *s *= scale;
    }
}

// ── Noise generation ────────────────────────────────────────────────────

/// Draw one realization of a noise family with per-record random parameters.
pub fn gen_noise(family: &NoiseFamily, len: usize, rng: &mut Rng) -> Signal {
    let tau = std::f64::consts::TAU;
    let mut samples = vec![0.0; len];
    match family.kind {
        FamilyKind::White => {
            rng.fill_normal(&mut samples);
        }
        FamilyKind::PinkLike => {
            // leaky integration of white noise gives a 1/f-ish slope
            let pole = rng.uniform_range(0.9, 0.97);
            let mut state = 0.0;
            for s in samples.iter_mut() {
                state = pole * state + rng.normal();
                *s = state;
            }
        }
        FamilyKind::BandLimited => {
            // dense random-phase sinusoids inside a band
            let lo = 20.0 + rng.uniform_range(0.0, 10.0);
            let width = rng.uniform_range(10.0, 20.0);
            for _ in 0..24 {
                let f = rng.uniform_range(lo, lo + width);
                let ph = rng.uniform_range(0.0, tau);
                let a = rng.uniform_range(0.5, 1.0);
                for (n, s) in samples.iter_mut().enumerate() {
                    *s += a * (tau * f * n as f64 / len as f64 + ph).sin();
                }
            }
        }
        FamilyKind::AmTone => {
            let f = rng.uniform_range(30.0, 60.0);
            let fm = rng.uniform_range(2.0, 5.0);
            let depth = rng.uniform_range(0.5, 0.9);
            let ph = rng.uniform_range(0.0, tau);
            let phm = rng.uniform_range(0.0, tau);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                *s = (1.0 + depth * (tau * fm * t + phm).sin()) * (tau * f * t + ph).sin();
            }
        }
        FamilyKind::FmTone => {
            let f = rng.uniform_range(30.0, 60.0);
            let fm = rng.uniform_range(2.0, 6.0);
            let dev = rng.uniform_range(4.0, 10.0);
            let ph = rng.uniform_range(0.0, tau);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                *s = (tau * f * t + dev * (tau * fm * t).sin() + ph).sin();
            }
        }
        FamilyKind::ImpulseTrain => {
            let period = 16 + rng.uniform_int(17) as usize; // 16..=32
            let offset = rng.uniform_int(period as u64) as usize;
            let mut n = offset;
            while n < len {
                samples[n] = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                n += period;
            }
            // tiny floor keeps the power strictly positive
            for s in samples.iter_mut() {
                *s += 1e-3 * rng.normal();
            }
        }
        FamilyKind::ChirpSweep => {
            let f0 = rng.uniform_range(10.0, 30.0);
            let f1 = rng.uniform_range(60.0, 100.0);
            let ph = rng.uniform_range(0.0, tau);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                *s = (tau * (f0 * t + 0.5 * (f1 - f0) * t * t) + ph).sin();
            }
        }
        FamilyKind::TwoToneBeat => {
            let f = rng.uniform_range(25.0, 70.0);
            let df = rng.uniform_range(1.0, 4.0);
            let ph1 = rng.uniform_range(0.0, tau);
            let ph2 = rng.uniform_range(0.0, tau);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                *s = (tau * f * t + ph1).sin() + (tau * (f + df) * t + ph2).sin();
            }
        }
        FamilyKind::GatedBursts => {
            let gate_period = 32 + rng.uniform_int(33) as usize; // 32..=64
            let duty = rng.uniform_range(0.3, 0.7);
            let on = ((gate_period as f64 * duty) as usize).max(8);
            let offset = rng.uniform_int(gate_period as u64) as usize;
            for (n, s) in samples.iter_mut().enumerate() {
                let phase = (n + offset) % gate_period;
                *s = if phase < on { rng.normal() } else { 1e-3 * rng.normal() };
            }
        }
        FamilyKind::FilteredBabble => {
            // lowpassed noise with a slow random amplitude wander
            let lp = rng.uniform_range(0.5, 0.8);
            let wander = rng.uniform_range(1.0, 3.0);
            let phw = rng.uniform_range(0.0, tau);
            let mut state = 0.0;
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                state = lp * state + (1.0 - lp) * rng.normal();
                *s = state * (1.0 + 0.6 * (tau * wander * t + phw).sin());
            }
        }
        FamilyKind::RotorThump => {
            // periodic amplitude modulation of a low harmonic stack with a
            // touch of gated bright noise
            let rotor = rng.uniform_range(6.0, 10.0);
            let hum = rng.uniform_range(8.0, 14.0);
            let sharp = rng.uniform_range(2.0, 4.0);
            let ph = rng.uniform_range(0.0, tau);
            let ph2 = rng.uniform_range(0.0, tau);
            let mut prev = rng.normal();
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                let w = rng.normal();
                let bright = w - prev;
                prev = w;
                let gate = (tau * rotor * t + ph).sin().abs().powf(sharp);
                let stack = (tau * hum * t + ph2).sin() + 0.5 * (tau * 2.0 * hum * t).sin();
                *s = gate * (stack + 0.25 * bright);
            }
        }
        FamilyKind::CryBursts => {
            // sparse rise-fall pitch bursts in a quiet bed
            let n_bursts = 1 + rng.uniform_int(3) as usize; // 1..=3
            for s in samples.iter_mut() {
                *s = 1e-3 * rng.normal();
            }
            for _ in 0..n_bursts {
                let width = len / 4 + rng.uniform_int((len / 4) as u64) as usize;
                let start = rng.uniform_int((len - width) as u64 + 1) as usize;
                let f_base = rng.uniform_range(60.0, 90.0);
                let f_peak = f_base + rng.uniform_range(20.0, 45.0);
                let ph = rng.uniform_range(0.0, tau);
                for j in 0..width {
                    let u = j as f64 / width as f64;
                    let contour = f_base + (f_peak - f_base) * (std::f64::consts::PI * u).sin();
                    let window = 0.5 - 0.5 * (tau * u).cos();
                    let t = (start + j) as f64 / len as f64;
                    samples[start + j] += window * (tau * contour * t + ph).sin();
                }
            }
        }
        FamilyKind::CrowdBed => {
            // stationary dark rumble: heavily lowpassed noise plus faint low
            // tones
            let lp = rng.uniform_range(0.86, 0.93);
            let mut state = 0.0;
            let mut tones = Vec::new();
            for _ in 0..6 {
                tones.push((
                    rng.uniform_range(6.0, 18.0),
                    rng.uniform_range(0.0, tau),
                    rng.uniform_range(0.05, 0.12),
                ));
            }
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / len as f64;
                state = lp * state + (1.0 - lp) * rng.normal();
                let mut v = state;
                for (f, ph, a) in &tones {
                    v += a * (tau * f * t + ph).sin();
                }
                *s = v;
            }
        }
    }
    Signal { samples }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Scale the noise so the clean-to-noise power ratio hits `snr_db` exactly,
/// then add it to the clean signal.
pub fn mix(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if clean.len() != noise.len() {
        return Err(Error::LengthMismatch { lhs: clean.len(), rhs: noise.len() });
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr must be finite, got {snr_db}")));
    }
    let p_clean = power(clean);
    let p_noise = power(noise);
    if p_clean <= 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    if p_noise <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().zip(noise).map(|(c, n)| c + scale * n).collect())
}

/// The SNR realized by `noisy = clean + scaled noise`, in dB.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let resid: Vec<f64> = noisy.iter().zip(clean).map(|(y, c)| y - c).collect();
    10.0 * (power(clean) / power(&resid)).log10()
}

// ── Corpus assembly ─────────────────────────────────────────────────────

/// Generate all records of a corpus in memory, deterministically per seed.
pub fn generate_records(spec: &CorpusSpec) -> Result<Vec<Record>> {
    let seen = seen_families();
    let held = held_out_families();
    let root = Rng::new(spec.seed);

    let mut plan: Vec<(Split, NoiseFamily, f64, u64)> = Vec::new();
    let mut counter = 0u64;
    for fam in &seen {
        for i in 0..spec.n_train {
            let snr = spec.train_snrs_db[i % spec.train_snrs_db.len()];
            plan.push((Split::Train, fam.clone(), snr, counter));
            counter += 1;
        }
    }
    for fam in &seen {
        for i in 0..spec.n_test {
            let snr = spec.train_snrs_db[i % spec.train_snrs_db.len()];
            plan.push((Split::Test, fam.clone(), snr, counter));
            counter += 1;
        }
    }
    for fam in &held {
        for snr in &spec.unseen_snrs_db {
            for _ in 0..spec.n_unseen {
                plan.push((Split::UnseenEval, fam.clone(), *snr, counter));
                counter += 1;
            }
        }
    }

    let records = crate::par::map_indexed(plan.len(), |i| {
        let (split, fam, snr, rec_seed) = &plan[i];
        let mut rng = root.substream(streams::DATA, *rec_seed);
        let clean = gen_clean(spec.signal_len, &mut rng);
        let noise = gen_noise(fam, spec.signal_len, &mut rng);
        let noisy = mix(&clean.samples, &noise.samples, *snr)?;
        Ok(Record {
            id: format!("{}_{:05}", split.dir_name(), rec_seed),
            split: *split,
            family: fam.name.clone(),
            class_index: fam.class_index,
            stationary: fam.stationary,
            snr_db: *snr,
            clean: clean.samples,
            noisy,
        })
    });
    records.into_iter().collect()
}

/// Write raw f64 little-endian samples.
pub fn write_raw(path: &Path, samples: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "raw signal file {} has length {} not divisible by 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Generate and persist a corpus; returns the manifest.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    let records = generate_records(spec)?;
    for split in [Split::Train, Split::Test, Split::UnseenEval] {
        fs::create_dir_all(out_dir.join(split.dir_name()))?;
    }
    let mut manifest_records = Vec::with_capacity(records.len());
    for rec in &records {
        let dir = PathBuf::from(rec.split.dir_name());
        let clean_rel = dir.join(format!("{}_clean.f64", rec.id));
        let noisy_rel = dir.join(format!("{}_noisy.f64", rec.id));
        write_raw(&out_dir.join(&clean_rel), &rec.clean)?;
        write_raw(&out_dir.join(&noisy_rel), &rec.noisy)?;
        manifest_records.push(ManifestRecord {
            id: rec.id.clone(),
            split: rec.split,
            family: rec.family.clone(),
            class_index: rec.class_index,
            stationary: rec.stationary,
            snr_db: rec.snr_db,
            clean_path: clean_rel.to_string_lossy().into_owned(),
            noisy_path: noisy_rel.to_string_lossy().into_owned(),
        });
    }
    let mut families = seen_families();
    families.extend(held_out_families());
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: spec.seed,
        signal_len: spec.signal_len,
        sample_rate: spec.sample_rate,
        families,
        records: manifest_records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

/// Load the signals referenced by a manifest back into records.
pub fn load_records(manifest: &Manifest, base_dir: &Path) -> Result<Vec<Record>> {
    manifest
        .records
        .iter()
        .map(|mr| {
            Ok(Record {
                id: mr.id.clone(),
                split: mr.split,
                family: mr.family.clone(),
                class_index: mr.class_index,
                stationary: mr.stationary,
                snr_db: mr.snr_db,
                clean: read_raw(&base_dir.join(&mr.clean_path))?,
                noisy: read_raw(&base_dir.join(&mr.noisy_path))?,
            })
        })
        .collect()
}
