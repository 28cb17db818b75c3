use micc::checkpoint::Checkpoint;
use micc::config::{RunConfig, StageConfig, Variant};
use micc::data::synthetic::{generate_pretraining_pairs, generate_rumor_samples, SyntheticSpec};
use micc::data::Sample;
use micc::harness::{predict, run_eval, run_infer, run_pretrain, run_train, Bundle, EvalOptions, EvalSplit, RunLog};
use micc::numerics::{Adam, Tape};
use micc::text::{TokenSequence, Vocabulary};
use micc::visual::ImageTensor;
use micc::Error;

fn tiny() -> RunConfig {
    RunConfig {
        image_size: 16,
        scales: vec![4, 8],
        patch_channels: 4,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_width: 16,
        max_len: 10,
        proj_dim: 6,
        proj_hidden: 10,
        fusion_hidden: 5,
        classifier_hidden: 7,
        dropout: 0.1,
        pretrain: StageConfig { learning_rate: 1e-3, batch_size: 8, epochs: 2 },
        train: StageConfig { learning_rate: 1e-3, batch_size: 8, epochs: 3 },
        ..RunConfig::default()
    }
}

fn pairs(n: usize) -> Vec<Sample> {
    generate_pretraining_pairs(&SyntheticSpec::new(3, 16), n).unwrap()
}

fn rumors(n: usize) -> Vec<Sample> {
    generate_rumor_samples(&SyntheticSpec::new(4, 16), n).unwrap()
}

#[test]
fn pretraining_keeps_encoders_and_is_reproducible() {
    let cfg = tiny();
    let data = pairs(24);
    let mut log_a = RunLog::memory();
    let a = run_pretrain(&cfg, &data, &mut log_a).unwrap();
    assert_eq!(a.frozen_before, a.frozen_after);
    assert_eq!(a.step_losses.len(), 2 * 3);
    assert!((a.chance - 8f64.ln()).abs() < 1e-12);
    assert!(log_a.lines().iter().filter(|l| l.starts_with("pretrain,")).count() == 6);

    let mut log_b = RunLog::memory();
    run_pretrain(&cfg, &data, &mut log_b).unwrap();
    assert_eq!(log_a.lines(), log_b.lines());

    let labelled = rumors(10);
    assert!(matches!(run_pretrain(&cfg, &labelled, &mut RunLog::memory()), Err(Error::Data(_))));
}

fn validation_f1(lines: &[String]) -> Vec<(usize, f64)> {
    lines
        .iter()
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 6 && f[1] == "validation").then(|| (f[0].parse().unwrap(), f[5].parse().unwrap()))
        })
        .collect()
}

#[test]
fn training_selects_best_validation_epoch_and_updates_every_group() {
    let cfg = tiny();
    let stage1 = run_pretrain(&cfg, &pairs(24), &mut RunLog::memory()).unwrap().bundle.checkpoint();
    let data = rumors(50);
    let mut log = RunLog::memory();
    let report = run_train(&cfg, Some(&stage1), &data, &mut log).unwrap();

    assert_eq!(report.split_sizes, (40, 5, 5));
    assert!(log.lines().contains(&"# split train=40 validation=5 test=5".to_string()));

    let series = validation_f1(log.lines());
    assert_eq!(series.len(), 3);
    let best = series.iter().fold(series[0], |acc, &x| if x.1 > acc.1 { x } else { acc });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.ckpt");
    report.bundle.checkpoint().save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().header.epoch, best.0);
    assert_eq!(report.best_epoch, best.0);

    assert_eq!(report.groups_before.len(), report.groups_after.len());
    for (group, before) in &report.groups_before {
        assert_ne!(before, &report.groups_after[group], "group {group} never changed");
    }
    assert!(report.groups_before.keys().any(|g| g == "sclip.text") && report.groups_before.contains_key("fusion.layers"));
}

#[test]
fn training_rejects_an_incompatible_stage1_checkpoint() {
    let cfg = tiny();
    let stage1 = run_pretrain(&cfg, &pairs(16), &mut RunLog::memory()).unwrap().bundle.checkpoint();
    let wider = RunConfig { proj_dim: 4, ..cfg };
    let err = run_train(&wider, Some(&stage1), &rumors(20), &mut RunLog::memory()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(msg.contains("sclip.text_head") && msg.contains("sclip.image_head"), "{msg}");
    assert!(matches!(run_train(&tiny(), None, &pairs(20), &mut RunLog::memory()), Err(Error::Data(_))));
}

#[test]
fn evaluation_is_deterministic_and_consistent() {
    let cfg = tiny();
    let data = rumors(40);
    let report = run_train(&cfg, None, &data, &mut RunLog::memory()).unwrap();
    let opts = EvalOptions { dump_alignment: true, dump_fusion: true, ..EvalOptions::default() };
    let a = run_eval(&report.bundle, &data, &opts).unwrap();
    let b = run_eval(&report.bundle, &data, &opts).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.ids.len(), 4);

    let m = &a.metrics;
    let total = (m.tp + m.tn + m.fp + m.fn_) as f64;
    assert!((m.accuracy - (m.tp + m.tn) as f64 / total).abs() < 1e-12);
    assert_eq!(m, &micc::classifier::MetricsReport::from_counts(m.tp, m.tn, m.fp, m.fn_).unwrap());

    let align = a.alignment_csv.unwrap();
    // every valid patch of every test sample: 16 + 4 per image
    assert_eq!(align.lines().count(), 1 + 4 * 20);
    // K = 2 per scale is selected
    assert_eq!(align.lines().skip(1).filter(|l| l.ends_with(",1")).count(), 4 * 4);
    let fusion = a.fusion_csv.unwrap();
    for id in &a.ids {
        let alphas: f64 = fusion.lines().filter(|l| l.starts_with(&format!("{id},"))).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
        assert!((alphas - 1.0).abs() < 1e-5);
    }

    let unlabelled = pairs(10);
    assert!(matches!(run_eval(&report.bundle, &unlabelled, &opts), Err(Error::Data(_))));
}

#[test]
fn micro_dataset_is_memorised() {
    let cfg = RunConfig { dropout: 0.0, ..tiny() };
    let data = rumors(8);
    let vocab = Vocabulary::from_corpus(data.iter().map(|s| s.text.as_str()));
    let mut bundle = Bundle::new(&cfg, vocab).unwrap();
    let seqs: Vec<TokenSequence> = data.iter().map(|s| bundle.tokenize(&s.text).unwrap()).collect();
    let texts: Vec<&TokenSequence> = seqs.iter().collect();
    let images: Vec<&ImageTensor> = data.iter().map(|s| &s.image).collect();
    let labels: Vec<f64> = data.iter().map(|s| s.label_f64().unwrap()).collect();
    let mut adam = Adam::new(5e-4);
    for _ in 0..400 {
        let grads = {
            let mut tape = Tape::new(&bundle.store);
            let fwd = bundle.model.forward(&mut tape, &texts, &images).unwrap();
            let loss = tape.bce(fwd.probs, &labels).unwrap();
            tape.backward(loss).unwrap()
        };
        bundle.store.accumulate(&grads, 1.0).unwrap();
        adam.step(&mut bundle.store).unwrap();
    }
    let opts = EvalOptions { split: EvalSplit::All, ..EvalOptions::default() };
    let m = run_eval(&bundle, &data, &opts).unwrap().metrics;
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0), "{m}");
}

#[test]
fn inference_contract_and_checkpoint_round_trip() {
    let cfg = RunConfig { top_k: 3, ..tiny() };
    let data = rumors(30);
    let bundle = run_train(&cfg, None, &data, &mut RunLog::memory()).unwrap().bundle;
    let s = &data[0];
    let a = run_infer(&bundle, &s.text, &s.image).unwrap();
    let b = run_infer(&bundle, &s.text, &s.image).unwrap();
    assert_eq!(a.prob, b.prob);
    assert!((0.0..=1.0).contains(&a.prob));
    // min(3, 16) + min(3, 4)
    assert_eq!(a.regions.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.checkpoint().save(&path).unwrap();
    let loaded = Bundle::load(&path).unwrap();
    assert_eq!(loaded.config, bundle.config);
    let refs: Vec<&Sample> = data.iter().collect();
    let before = predict(&bundle, &refs).unwrap();
    let after = predict(&loaded, &refs).unwrap();
    let worst = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn variants_without_selection_report_no_regions() {
    let cfg = RunConfig { variant: Variant::NoAlignGlobal, ..tiny() };
    let data = rumors(20);
    let bundle = run_train(&RunConfig { train: StageConfig { epochs: 1, ..cfg.train.clone() }, ..cfg }, None, &data, &mut RunLog::memory())
        .unwrap()
        .bundle;
    let out = run_infer(&bundle, &data[0].text, &data[0].image).unwrap();
    assert!(out.regions.is_empty());
    let r = run_eval(&bundle, &data, &EvalOptions { dump_alignment: true, dump_fusion: true, ..EvalOptions::default() }).unwrap();
    assert!(r.alignment_csv.is_some_and(|c| c.lines().count() == 1));
    assert!(r.fusion_csv.is_some_and(|c| c.lines().count() == 1));
}
