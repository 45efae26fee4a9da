//! Experiment orchestration: the resolved run configuration, the
//! train / enhance / evaluate pipelines, ablation sweeps, and the CSV and
//! JSON artifacts they emit.
//!
//! Every run writes its fully resolved config to the output directory before
//! doing any work, so results are always reproducible from the artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conditioner::{encode, InjectionMode};
use crate::datagen::{self, CorpusSpec, Record, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, UtteranceEval};
use crate::model::{Model, ModelConfig};
use crate::rng::{streams, Rng};
use crate::sampling::{enhance_with, SamplerConfig};
use crate::schedule::{build_schedule, BetaSpec, Schedule, WeightSpec};
use crate::training::{train_with, Phase, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta: BetaSpec,
    pub weight: WeightSpec,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: crate::schedule::DEFAULT_STEP_COUNT,
            beta: BetaSpec::Linear {
                start: crate::schedule::DEFAULT_BETA_START,
                end: crate::schedule::DEFAULT_BETA_END,
            },
            weight: WeightSpec::SqrtRatioCapped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub seg_frame: usize,
    pub seg_hop: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { seg_frame: 32, seg_hop: 16 }
    }
}

/// Every knob of a run. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    /// Additionally write a checkpoint every n joint epochs (0 = final only).
    pub checkpoint_every_epochs: usize,
}

impl ExperimentConfig {
    /// Route one seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.signal_len != self.corpus.signal_len {
            return Err(Error::Config(format!(
                "model signal_len {} != corpus signal_len {}",
                self.model.signal_len, self.corpus.signal_len
            )));
        }
        if self.model.max_step != self.schedule.steps {
            return Err(Error::Config(format!(
                "model max_step {} != schedule steps {}",
                self.model.max_step, self.schedule.steps
            )));
        }
        if self.model.n_classes != datagen::seen_families().len() {
            return Err(Error::Config(format!(
                "model n_classes {} != seen family count {}",
                self.model.n_classes,
                datagen::seen_families().len()
            )));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        build_schedule(self.schedule.steps, &self.schedule.beta, &self.schedule.weight)
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One exported embedding row: record id, noise class, components.
pub type EmbeddingRow = (String, usize, Vec<f64>);

/// Write the fully resolved config into the output directory.
pub fn echo_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.resolved.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

// ── CSV helpers ─────────────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_train_report_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = String::from("phase,epoch,diff_loss,nc_loss,nc_accuracy,wall_secs\n");
    for e in &report.epochs {
        let phase = match e.phase {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        };
        out.push_str(&format!(
            "{phase},{},{},{},{},{}\n",
            e.epoch,
            e.diff_loss,
            e.nc_loss,
            fmt_opt(e.nc_accuracy),
            e.wall_secs
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_per_utterance_csv(rows: &[UtteranceEval], path: &Path) -> Result<()> {
    let mut out = String::from(
        "id,family,class_index,snr_db,si_sdr_noisy,si_sdr_enhanced,seg_snr_noisy,seg_snr_enhanced,predicted_class\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.family,
            r.class_index,
            r.snr_db,
            r.si_sdr_noisy,
            r.si_sdr_enhanced,
            r.seg_snr_noisy,
            r.seg_snr_enhanced,
            r.predicted_class.map(|c| c.to_string()).unwrap_or_default()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_per_utterance_csv(path: &Path) -> Result<Vec<UtteranceEval>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Config(format!("bad per-utterance row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Config(format!("bad float {s:?}: {e}")))
        };
        rows.push(UtteranceEval {
            id: parts[0].into(),
            family: parts[1].into(),
            class_index: parts[2]
                .parse()
                .map_err(|e| Error::Config(format!("bad class {:?}: {e}", parts[2])))?,
            snr_db: parse(parts[3])?,
            si_sdr_noisy: parse(parts[4])?,
            si_sdr_enhanced: parse(parts[5])?,
            seg_snr_noisy: parse(parts[6])?,
            seg_snr_enhanced: parse(parts[7])?,
            predicted_class: if parts[8].is_empty() {
                None
            } else {
                Some(parts[8].parse().map_err(|e| {
                    Error::Config(format!("bad predicted class {:?}: {e}", parts[8]))
                })?)
            },
        });
    }
    Ok(rows)
}

/// Comparison table in the unseen-noise layout: one block per noise family,
/// one row per system, one column per SNR level plus the average.
pub fn write_eval_table_csv(rows: &[UtteranceEval], path: &Path) -> Result<()> {
    let mut snrs: Vec<f64> = rows.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    snrs.dedup();
    let mut families: Vec<(usize, String)> =
        rows.iter().map(|r| (r.class_index, r.family.clone())).collect();
    families.sort();
    families.dedup();

    let mut out = String::from("family,system");
    for s in &snrs {
        out.push_str(&format!(",snr_{s}"));
    }
    out.push_str(",avg\n");

    for (class_index, family) in &families {
        for (system, pick) in [
            ("unprocessed", false),
            ("enhanced", true),
        ] {
            let mut cells = Vec::new();
            for s in &snrs {
                let group: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.class_index == *class_index && r.snr_db == *s)
                    .map(|r| if pick { r.si_sdr_enhanced } else { r.si_sdr_noisy })
                    .collect();
                if group.is_empty() {
                    cells.push(String::new());
                } else {
                    cells.push((group.iter().sum::<f64>() / group.len() as f64).to_string());
                }
            }
            let all: Vec<f64> = rows
                .iter()
                .filter(|r| r.class_index == *class_index)
                .map(|r| if pick { r.si_sdr_enhanced } else { r.si_sdr_noisy })
                .collect();
            let avg = all.iter().sum::<f64>() / all.len() as f64;
            out.push_str(&format!("{family},{system},{},{avg}\n", cells.join(",")));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Embedding export for the separability analysis: one row per utterance
/// with the run id, noise class, and embedding components.
pub fn write_embeddings_csv(embeddings: &[EmbeddingRow], path: &Path) -> Result<()> {
    let dim = embeddings.first().map(|(_, _, e)| e.len()).unwrap_or(0);
    let mut out = String::from("id,noise_class");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for (id, class, emb) in embeddings {
        out.push_str(id);
        out.push_str(&format!(",{class}"));
        for v in emb {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 3 {
            return Err(Error::Config(format!("bad embedding row: {line}")));
        }
        let class: usize = parts[1]
            .parse()
            .map_err(|e| Error::Config(format!("bad class {:?}: {e}", parts[1])))?;
        let emb = parts[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Config(format!("bad float {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((parts[0].to_string(), class, emb));
    }
    Ok(out)
}

// ── Pipelines ───────────────────────────────────────────────────────────

/// Train on the train split of a record set; write the checkpoint, the train
/// report CSV and the resolved config into `out_dir`.
pub fn run_train(
    cfg: &ExperimentConfig,
    records: &[Record],
    out_dir: &Path,
) -> Result<(Model, TrainReport, Schedule)> {
    cfg.validate()?;
    echo_config(cfg, out_dir)?;
    let schedule = cfg.build_schedule()?;
    let train_set: Vec<Record> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let config_json = serde_json::to_string(cfg)?;
    let every = cfg.checkpoint_every_epochs;
    let (model, report) = train_with(
        &cfg.train,
        &cfg.model,
        &schedule,
        &train_set,
        |model, phase, epoch| {
            if every > 0 && phase == Phase::Joint && (epoch + 1) % every == 0 {
                let ckpt = Checkpoint::new(
                    config_json.clone(),
                    schedule.clone(),
                    model.clone(),
                    (cfg.train.seed, 0, 0),
                    epoch as u64 + 1,
                );
                ckpt.save(&out_dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1)))?;
            }
            Ok(())
        },
    )?;
    let ckpt = Checkpoint::new(
        config_json,
        schedule.clone(),
        model.clone(),
        (cfg.train.seed, 0, 0),
        cfg.train.epochs as u64,
    );
    ckpt.save(&out_dir.join("checkpoint.bin"))?;
    write_train_report_csv(&report, &out_dir.join("train_report.csv"))?;
    Ok((model, report, schedule))
}

/// Enhance a set of records in parallel, one independent sampler stream per
/// record.
pub fn enhance_records(
    model: &Model,
    schedule: &Schedule,
    records: &[Record],
    sampler: &SamplerConfig,
) -> Result<Vec<Vec<f64>>> {
    let base = Rng::new(sampler.seed);
    let outputs: Vec<Result<Vec<f64>>> = crate::par::map_indexed(records.len(), |i| {
        let emb = if model.use_conditioner {
            Some(encode(&model.conditioner, &records[i].noisy)?.embedding.detached())
        } else {
            None
        };
        let mut rng = base.substream(streams::SAMPLER, i as u64);
        enhance_with(schedule, &records[i].noisy, sampler, &mut rng, |x, t| {
            crate::denoiser::predict_eps(&model.denoiser, x, &records[i].noisy, t, emb.as_ref())
        })
    });
    outputs.into_iter().collect()
}

/// Score enhanced signals against their references; classify and embed each
/// noisy input when a conditioner is available.
pub fn evaluate_records(
    model: Option<&Model>,
    records: &[Record],
    enhanced: &[Vec<f64>],
    metrics_cfg: &MetricsConfig,
) -> Result<(Vec<UtteranceEval>, Vec<EmbeddingRow>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to evaluate".into()));
    }
    if records.len() != enhanced.len() {
        return Err(Error::LengthMismatch { lhs: records.len(), rhs: enhanced.len() });
    }
    let conditioner = model.filter(|m| m.use_conditioner).map(|m| &m.conditioner);
    let mut rows = Vec::with_capacity(records.len());
    let mut embeddings = Vec::new();
    for (rec, enh) in records.iter().zip(enhanced) {
        let (predicted, embedding) = match conditioner {
            Some(c) => {
                let out = encode(c, &rec.noisy)?;
                let pred = out
                    .probs
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i);
                (pred, Some(out.embedding.to_vec()))
            }
            None => (None, None),
        };
        if let Some(e) = embedding {
            embeddings.push((rec.id.clone(), rec.class_index, e));
        }
        rows.push(UtteranceEval {
            id: rec.id.clone(),
            family: rec.family.clone(),
            class_index: rec.class_index,
            snr_db: rec.snr_db,
            si_sdr_noisy: metrics::si_sdr(&rec.noisy, &rec.clean)?,
            si_sdr_enhanced: metrics::si_sdr(enh, &rec.clean)?,
            seg_snr_noisy: metrics::seg_snr(
                &rec.noisy,
                &rec.clean,
                metrics_cfg.seg_frame,
                metrics_cfg.seg_hop,
            )?,
            seg_snr_enhanced: metrics::seg_snr(
                enh,
                &rec.clean,
                metrics_cfg.seg_frame,
                metrics_cfg.seg_hop,
            )?,
            predicted_class: predicted,
        });
    }
    Ok((rows, embeddings))
}

/// Aggregate rows into a report, attaching embedding separability when
/// embeddings are available.
pub fn build_report(
    rows: &[UtteranceEval],
    embeddings: &[EmbeddingRow],
    n_classes: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::from_rows(rows, n_classes)?;
    if !embeddings.is_empty() {
        let vecs: Vec<Vec<f64>> = embeddings.iter().map(|(_, _, e)| e.clone()).collect();
        let labels: Vec<usize> = embeddings.iter().map(|(_, c, _)| *c).collect();
        let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        if distinct.len() >= 2 {
            report.separability = Some(metrics::separability(&vecs, &labels)?);
        }
    }
    Ok(report)
}

// ── Sweeps ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaNc,
    Inject,
    PretrainFreeze,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "lambda_nc" => Ok(SweepAxis::LambdaNc),
            "inject" => Ok(SweepAxis::Inject),
            "pretrain-freeze" | "pretrain_freeze" => Ok(SweepAxis::PretrainFreeze),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected lambda_nc, inject or pretrain-freeze)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub nc_accuracy: Option<f64>,
    pub in_dist_si_sdr_noisy: f64,
    pub in_dist_si_sdr_enhanced: f64,
    pub unseen_si_sdr_noisy: f64,
    pub unseen_si_sdr_enhanced: f64,
    pub separability_unseen: Option<f64>,
}

/// Train and evaluate every setting along one ablation axis with a shared
/// seed; write one comparison table plus per-setting artifacts.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    records: &[Record],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    echo_config(cfg, out_dir)?;

    let settings: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::LambdaNc => [0.0, 0.1, 0.3, 0.5, 1.0]
            .iter()
            .map(|l| {
                let mut c = cfg.clone();
                c.train.lambda_nc = *l;
                (format!("lambda_{l}"), c)
            })
            .collect(),
        SweepAxis::Inject => {
            [InjectionMode::Addition, InjectionMode::Concat, InjectionMode::CrossAttn]
                .iter()
                .map(|m| {
                    let mut c = cfg.clone();
                    c.train.injection = *m;
                    (m.name().to_string(), c)
                })
                .collect()
        }
        SweepAxis::PretrainFreeze => [
            ("scratch", false, false),
            ("pt_frozen", true, true),
            ("pt_unfrozen", true, false),
        ]
        .iter()
        .map(|(name, pt, freeze)| {
            let mut c = cfg.clone();
            c.train.pretrain_nc = *pt;
            c.train.freeze_encoder = *freeze;
            (name.to_string(), c)
        })
        .collect(),
    };

    let mut rows = Vec::with_capacity(settings.len());
    for (name, setting_cfg) in &settings {
        let dir = out_dir.join(name);
        let (model, report, schedule) = run_train(setting_cfg, records, &dir)?;

        let test: Vec<Record> =
            records.iter().filter(|r| r.split == Split::Test).cloned().collect();
        let unseen: Vec<Record> =
            records.iter().filter(|r| r.split == Split::UnseenEval).cloned().collect();

        let enhanced_test = enhance_records(&model, &schedule, &test, &setting_cfg.sampler)?;
        let (test_rows, _) =
            evaluate_records(Some(&model), &test, &enhanced_test, &setting_cfg.metrics)?;
        write_per_utterance_csv(&test_rows, &dir.join("per_utterance_test.csv"))?;

        let enhanced_unseen =
            enhance_records(&model, &schedule, &unseen, &setting_cfg.sampler)?;
        let (unseen_rows, unseen_embs) =
            evaluate_records(Some(&model), &unseen, &enhanced_unseen, &setting_cfg.metrics)?;
        write_per_utterance_csv(&unseen_rows, &dir.join("per_utterance_unseen.csv"))?;
        write_eval_table_csv(&unseen_rows, &dir.join("unseen_table.csv"))?;
        if !unseen_embs.is_empty() {
            write_embeddings_csv(&unseen_embs, &dir.join("embeddings_unseen.csv"))?;
        }

        let test_report = build_report(&test_rows, &[], setting_cfg.model.n_classes)?;
        let unseen_report =
            build_report(&unseen_rows, &unseen_embs, setting_cfg.model.n_classes)?;
        rows.push(SweepRow {
            setting: name.clone(),
            nc_accuracy: report.final_nc_accuracy(),
            in_dist_si_sdr_noisy: test_report.mean_si_sdr_noisy,
            in_dist_si_sdr_enhanced: test_report.mean_si_sdr_enhanced,
            unseen_si_sdr_noisy: unseen_report.mean_si_sdr_noisy,
            unseen_si_sdr_enhanced: unseen_report.mean_si_sdr_enhanced,
            separability_unseen: unseen_report.separability,
        });
    }

    let mut out = String::from(
        "setting,nc_accuracy,in_dist_si_sdr_noisy,in_dist_si_sdr_enhanced,unseen_si_sdr_noisy,unseen_si_sdr_enhanced,separability_unseen\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.setting,
            fmt_opt(r.nc_accuracy),
            r.in_dist_si_sdr_noisy,
            r.in_dist_si_sdr_enhanced,
            r.unseen_si_sdr_noisy,
            r.unseen_si_sdr_enhanced,
            fmt_opt(r.separability_unseen)
        ));
    }
    fs::write(out_dir.join("comparison.csv"), out)?;
    Ok(rows)
}
