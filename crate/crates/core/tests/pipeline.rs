//! End-to-end pipeline checks on reduced configurations: training descends,
//! determinism holds, freeze/lambda contracts hold, enhancement runs.

use diffse_core::conditioner::encode_call_count;
use diffse_core::datagen::{generate_records, CorpusSpec, Split};
use diffse_core::experiment::ExperimentConfig;
use diffse_core::sampling::{enhance, SamplerConfig};
use diffse_core::training::{train, Phase, TrainConfig};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusSpec { n_train: 6, n_test: 2, n_unseen: 1, ..CorpusSpec::default() },
        train: TrainConfig {
            epochs: 2,
            pretrain_nc: true,
            pretrain_epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn tiny_run_trains_and_enhances() {
    let cfg = tiny_config();
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();
    let start = std::time::Instant::now();
    let (model, report) = train(&cfg.train, &cfg.model, &schedule, &train_set).unwrap();
    println!(
        "tiny train: {} records, {} epochs in {:.2}s",
        train_set.len(),
        report.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    for e in &report.epochs {
        println!(
            "  {:?} epoch {}: diff={:.4} nc={:.4} acc={:?} ({:.2}s)",
            e.phase, e.epoch, e.diff_loss, e.nc_loss, e.nc_accuracy, e.wall_secs
        );
    }
    assert!(report.epochs.iter().all(|e| e.diff_loss.is_finite()));

    // enhancement produces a finite signal of the right length and encodes
    // the conditioner exactly once
    let sampler = SamplerConfig::default();
    let before = encode_call_count();
    let test_rec = records.iter().find(|r| r.split == Split::Test).unwrap();
    let out = enhance(&model, &schedule, &test_rec.noisy, &sampler).unwrap();
    let after = encode_call_count();
    assert_eq!(after - before, 1, "conditioner must encode exactly once per call");
    assert_eq!(out.len(), test_rec.noisy.len());
    assert!(out.iter().all(|v| v.is_finite()));

    // determinism: same seed, same output
    let out2 = enhance(&model, &schedule, &test_rec.noisy, &sampler).unwrap();
    assert_eq!(out, out2);
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = tiny_config();
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();
    let (m1, _) = train(&cfg.train, &cfg.model, &schedule, &train_set).unwrap();
    let (m2, _) = train(&cfg.train, &cfg.model, &schedule, &train_set).unwrap();
    for ((n1, t1), (n2, t2)) in m1.named_tensors().iter().zip(m2.named_tensors().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data(), "parameter {n1} diverged between runs");
    }
}

#[test]
fn frozen_encoder_stays_bitwise_fixed() {
    let cfg = tiny_config();
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();

    let mut tc = cfg.train.clone();
    tc.freeze_encoder = true;
    tc.pretrain_nc = false;
    let (model, _) = train(&tc, &cfg.model, &schedule, &train_set).unwrap();

    let fresh = diffse_core::model::Model::init(
        &cfg.model,
        tc.injection,
        tc.use_conditioner,
        &schedule,
        &diffse_core::rng::Rng::new(tc.seed),
    );
    let trained = model.named_tensors();
    let init = fresh.named_tensors();
    let mut encoder_checked = 0;
    let mut denoiser_changed = 0;
    for ((name, a), (_, b)) in trained.iter().zip(init.iter()) {
        if name.starts_with("conditioner.encoder.") {
            assert_eq!(a.data(), b.data(), "{name} must stay frozen");
            encoder_checked += 1;
        } else if name.starts_with("denoiser.") && a.data() != b.data() {
            denoiser_changed += 1;
        }
    }
    assert!(encoder_checked > 0);
    assert!(denoiser_changed > 0, "denoiser must train while encoder is frozen");
}

#[test]
fn lambda_zero_leaves_classifier_head_unmoved_but_not_encoder() {
    let cfg = tiny_config();
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();

    let mut tc = cfg.train.clone();
    tc.lambda_nc = 0.0;
    tc.pretrain_nc = false;
    let (model, _) = train(&tc, &cfg.model, &schedule, &train_set).unwrap();
    let fresh = diffse_core::model::Model::init(
        &cfg.model,
        tc.injection,
        tc.use_conditioner,
        &schedule,
        &diffse_core::rng::Rng::new(tc.seed),
    );
    let trained = model.named_tensors();
    let init = fresh.named_tensors();
    let mut encoder_changed = 0;
    for ((name, a), (_, b)) in trained.iter().zip(init.iter()) {
        if name.starts_with("conditioner.classifier.") {
            // no gradient reaches the head through the zero-weighted loss
            assert_eq!(a.data(), b.data(), "{name} must not move when lambda is 0");
        }
        if name.starts_with("conditioner.encoder.") && a.data() != b.data() {
            encoder_changed += 1;
        }
    }
    assert!(
        encoder_changed > 0,
        "encoder must still receive gradient through the injection path"
    );
}

#[test]
fn pretrain_phase_is_reported() {
    let cfg = tiny_config();
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();
    let (_, report) = train(&cfg.train, &cfg.model, &schedule, &train_set).unwrap();
    let pre: Vec<_> = report.epochs.iter().filter(|e| e.phase == Phase::Pretrain).collect();
    let joint: Vec<_> = report.epochs.iter().filter(|e| e.phase == Phase::Joint).collect();
    assert_eq!(pre.len(), cfg.train.pretrain_epochs);
    assert_eq!(joint.len(), cfg.train.epochs);
    for e in &report.epochs {
        if let Some(acc) = e.nc_accuracy {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn one_epoch_smoke_on_eight_records_completes() {
    let mut cfg = tiny_config();
    cfg.corpus.n_train = 1; // 10 families x 1 = 10 records, close to the 8-sample smoke
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .take(8)
        .cloned()
        .collect();
    let schedule = cfg.build_schedule().unwrap();
    let mut tc = cfg.train.clone();
    tc.epochs = 1;
    tc.pretrain_nc = false;
    let (model, report) = train(&tc, &cfg.model, &schedule, &train_set).unwrap();
    assert_eq!(report.epochs.len(), 1);
    // serializes
    let ckpt = diffse_core::checkpoint::Checkpoint::new(
        "{}".into(),
        schedule,
        model,
        (tc.seed, 0, 0),
        1,
    );
    let bytes = ckpt.to_bytes().unwrap();
    assert!(!bytes.is_empty());
}

#[test]
fn pretrained_embeddings_cluster_by_class() {
    // after classification pretraining, same-family embeddings are more
    // similar (cosine) than cross-family ones
    let mut cfg = tiny_config();
    cfg.corpus.n_train = 12;
    cfg.train.pretrain_epochs = 20;
    cfg.train.epochs = 0;
    let records = generate_records(&cfg.corpus).unwrap();
    let train_set: Vec<_> =
        records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let schedule = cfg.build_schedule().unwrap();
    let (model, _) = train(&cfg.train, &cfg.model, &schedule, &train_set).unwrap();

    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for r in train_set.iter().take(60) {
        let out = diffse_core::conditioner::encode(&model.conditioner, &r.noisy).unwrap();
        embeddings.push(out.embedding.to_vec());
        labels.push(r.class_index);
    }
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = cosine(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    let intra_mean = intra.0 / intra.1 as f64;
    let inter_mean = inter.0 / inter.1 as f64;
    assert!(
        intra_mean > inter_mean,
        "intra-class cosine {intra_mean:.3} must exceed inter-class {inter_mean:.3}"
    );
}

#[test]
fn dataset_validation_errors() {
    let cfg = tiny_config();
    let schedule = cfg.build_schedule().unwrap();
    assert!(train(&cfg.train, &cfg.model, &schedule, &[]).is_err());

    let records = generate_records(&cfg.corpus).unwrap();
    let one_class: Vec<_> = records
        .iter()
        .filter(|r| r.split == Split::Train && r.class_index == 0)
        .cloned()
        .collect();
    assert!(train(&cfg.train, &cfg.model, &schedule, &one_class).is_err());
}
