//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails. The synthetic reproduction dominates the runtime.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use micc::alignment::{top_k_select, RelevanceMatrix};
use micc::checkpoint::Checkpoint;
use micc::classifier::MetricsReport;
use micc::config::{RunConfig, StageConfig, Variant};
use micc::data::synthetic::{generate_pretraining_pairs, generate_rumor_samples, SyntheticSpec};
use micc::data::{split_8_1_1, Sample};
use micc::diagnostics::{end_to_end_suite, primitive_suite};
use micc::fusion::{blend_scores, fuse};
use micc::harness::{predict, run_pretrain, run_train, unimodal_baselines, Bundle, RunLog, TrainReport};
use micc::numerics::{Rng, Tape, Tensor};
use micc::sclip::info_nce_loss;

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_SEED: u64 = 7;
const SAMPLES: usize = 4000;
const PAIRS: usize = 4000;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict { id, pass, detail: detail.into() };
    println!("criterion {:>2}: {} {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let prim = primitive_suite(1e-4);
    let e2e = end_to_end_suite(1e-3);
    let elapsed = start.elapsed();
    let failed: Vec<String> = prim.iter().chain(&e2e).filter(|o| !o.report.passed()).map(|o| o.line()).collect();
    let worst_p = prim.iter().map(|o| o.report.max_rel_error()).fold(0.0, f64::max);
    let worst_e = e2e.iter().map(|o| o.report.max_rel_error()).fold(0.0, f64::max);
    verdict(
        1,
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} primitive checks (max rel err {worst_p:.2e} < 1e-4), {} end-to-end checks (max {worst_e:.2e} < 1e-3) in {:.1}s{}",
            prim.len(),
            e2e.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failures: {}", failed.join(" | ")) }
        ),
    )
}

fn nce(t: &[f64], v: &[f64], n: usize, d: usize, tau: f64) -> f64 {
    let mut tape = Tape::detached();
    let tv = tape.constant(Tensor::matrix(n, d, t.to_vec()).unwrap());
    let vv = tape.constant(Tensor::matrix(n, d, v.to_vec()).unwrap());
    let loss = info_nce_loss(&mut tape, tv, vv, tau, false).unwrap();
    tape.value(loss).item()
}

fn criterion_2() -> Verdict {
    let single = nce(&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.7], 1, 3, 0.07);
    let mut uniform_err: f64 = 0.0;
    for n in [2, 5, 64] {
        let row = [0.4, -0.1, 0.9];
        let t: Vec<f64> = row.iter().cycle().take(3 * n).copied().collect();
        uniform_err = uniform_err.max((nce(&t, &t, n, 3, 0.07) - (n as f64).ln()).abs());
    }
    let hand = nce(&[1.0, 0.0, 0.0, 1.0], &[10.0, 0.0, 0.0, 10.0], 2, 2, 1.0);
    let hand_err = (hand - (1.0 + (-10f64).exp()).ln()).abs();
    verdict(
        2,
        single == 0.0 && uniform_err <= 1e-9 && hand_err <= 1e-9,
        format!("N=1 loss {:.1e}; uniform |loss - ln N| {uniform_err:.1e}; two-pair case error {hand_err:.1e}", single.abs()),
    )
}

/// Full-sort reference: valid patches by descending score, lowest index first on ties.
fn oracle_top_k(d: &RelevanceMatrix, b: usize, s: usize, k: usize) -> Vec<(usize, f64)> {
    let mut valid: Vec<(usize, f64)> = (0..d.slots).filter_map(|j| d.get(b, s, j).map(|x| (j, x))).collect();
    valid.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    valid.truncate(k);
    valid
}

fn criterion_3() -> Verdict {
    let mut rng = Rng::new(31);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let (batch, scales, slots) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(9));
        let k = 1 + rng.below(6);
        let n = batch * scales * slots;
        // small integer scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 - 2.0).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.below(4) != 0).collect();
        // every sample needs at least one valid patch somewhere
        for b in 0..batch {
            let per = scales * slots;
            if !mask[b * per..(b + 1) * per].contains(&true) {
                mask[b * per + rng.below(per)] = true;
            }
        }
        let d = RelevanceMatrix::new(scores, mask, batch, scales, slots).unwrap();
        let sel = top_k_select(&d, k, false).unwrap();
        for b in 0..batch {
            for s in 0..scales {
                let expected = oracle_top_k(&d, b, s, k);
                let mut seen = std::collections::HashSet::new();
                ties += expected.iter().filter(|e| !seen.insert(e.1.to_bits())).count();
                let got: Vec<(usize, f64)> = (0..k)
                    .filter_map(|slot| {
                        let i = b * sel.width + s * k + slot;
                        sel.origin[i].map(|(sc, p)| {
                            assert_eq!(sc, s);
                            (p, sel.scores[i])
                        })
                    })
                    .collect();
                if got != expected {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(3, mismatches == 0 && ties > 0, format!("1000 random matrices, {mismatches} mismatches against the full sort, {ties} tied selections exercised"))
}

fn criterion_4() -> Verdict {
    let mut rng = Rng::new(44);
    let (mut sum_err, mut masked_nonzero, mut endpoint_err, mut shift_err) = (0.0f64, 0usize, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (batch, width, d) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(5));
        let n = batch * width;
        let mut mask: Vec<bool> = (0..n).map(|_| rng.below(3) != 0).collect();
        for b in 0..batch {
            mask[b * width] = true;
        }
        let fc = rng.uniform_vec(n, -3.0, 3.0);
        let dot = rng.uniform_vec(n, -3.0, 3.0);
        let patches = rng.uniform_vec(n * d, -1.0, 1.0);
        let text = rng.uniform_vec(batch * d, -1.0, 1.0);
        let shift = rng.uniform_vec(batch, -50.0, 50.0);
        let mut tape = Tape::detached();
        let col = |tape: &mut Tape<'_>, v: &[f64]| tape.constant(Tensor::matrix(v.len(), 1, v.to_vec()).unwrap());
        let (fcv, dotv) = (col(&mut tape, &fc), col(&mut tape, &dot));
        let pv = tape.constant(Tensor::matrix(n, d, patches).unwrap());
        let tv = tape.constant(Tensor::matrix(batch, d, text).unwrap());
        let lambda = rng.uniform(0.0, 1.0);
        let scores = blend_scores(&mut tape, fcv, dotv, lambda).unwrap();
        let f = fuse(&mut tape, scores, &mask, pv, tv, batch).unwrap();
        let alpha = tape.data(f.alpha).to_vec();
        for (b, row) in alpha.chunks(width).enumerate() {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            masked_nonzero += row.iter().zip(&mask[b * width..]).filter(|(&a, &m)| !m && a != 0.0).count();
        }
        for (lam, reference) in [(1.0, &fc), (0.0, &dot)] {
            let s = blend_scores(&mut tape, fcv, dotv, lam).unwrap();
            endpoint_err = endpoint_err.max(tape.data(s).iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        let shifted: Vec<f64> = tape.data(scores).iter().enumerate().map(|(i, &x)| x + shift[i / width]).collect();
        let sv = col(&mut tape, &shifted);
        let g = fuse(&mut tape, sv, &mask, pv, tv, batch).unwrap();
        shift_err = shift_err.max(tape.data(g.alpha).iter().zip(&alpha).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    verdict(
        4,
        sum_err <= 1e-9 && masked_nonzero == 0 && endpoint_err <= 1e-12 && shift_err <= 1e-10,
        format!("|sum α - 1| {sum_err:.1e}, {masked_nonzero} nonzero masked weights, λ endpoint error {endpoint_err:.1e}, shift error {shift_err:.1e}"),
    )
}

fn criterion_6() -> Verdict {
    let m = MetricsReport::from_counts(3, 4, 1, 2).unwrap();
    let errs = [(m.accuracy, 0.7), (m.precision, 0.75), (m.recall, 0.6), (m.f1, 2.0 / 3.0)];
    let worst = errs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(6, worst <= 1e-9, format!("TP=3 TN=4 FP=1 FN=2 gives acc {:.6} prec {:.6} rec {:.6} f1 {:.6}", m.accuracy, m.precision, m.recall, m.f1))
}

fn criterion_10() -> Verdict {
    let cfg = RunConfig::from_json("{}").unwrap();
    let ok = cfg.scales == vec![32, 64]
        && cfg.top_k == 2
        && cfg.fusion_layers == 2
        && cfg.fusion_hidden == 256
        && cfg.lambda == 0.7
        && cfg.tau == 0.07
        && cfg.pretrain == StageConfig { learning_rate: 5e-4, batch_size: 64, epochs: 5 }
        && cfg.train.learning_rate == 2e-4;
    verdict(
        10,
        ok,
        format!(
            "defaults: scales {:?}, K {}, fusion layers {}, hidden {}, λ {}, τ {}, lr {}/{}",
            cfg.scales, cfg.top_k, cfg.fusion_layers, cfg.fusion_hidden, cfg.lambda, cfg.tau, cfg.pretrain.learning_rate, cfg.train.learning_rate
        ),
    )
}

/// Desk-scale configuration for the synthetic reproduction.
fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        image_size: 32,
        scales: vec![8, 16],
        patch_channels: 16,
        d_model: 48,
        heads: 2,
        layers: 1,
        ffn_width: 96,
        max_len: 12,
        proj_dim: 32,
        proj_hidden: 64,
        fusion_hidden: 32,
        classifier_hidden: 256,
        dropout: 0.1,
        pretrain: StageConfig { learning_rate: 1e-3, batch_size: 64, epochs: 30 },
        train: StageConfig { learning_rate: 1e-4, batch_size: 32, epochs: 150 },
        ..RunConfig::default()
    }
}

struct SeedRuns {
    stage1: Checkpoint,
    pretrain_loss: f64,
    chance: f64,
    frozen_kept: bool,
    pretrain_time: Duration,
    full: TrainReport,
    full_time: Duration,
    /// Test F1 per ablation variant and per K.
    variants: BTreeMap<&'static str, f64>,
    k_sweep: BTreeMap<usize, f64>,
}

fn train_logged(cfg: &RunConfig, init: &Checkpoint, data: &[Sample], label: &str) -> (TrainReport, Duration) {
    let start = Instant::now();
    let report = run_train(cfg, Some(init), data, &mut RunLog::memory()).expect("training run");
    let t = start.elapsed();
    eprintln!("  [{label}] seed {} best epoch {} test {} ({:.0}s)", cfg.seed, report.best_epoch, report.test, t.as_secs_f64());
    (report, t)
}

fn run_seed(seed: u64, pairs: &[Sample], data: &[Sample]) -> SeedRuns {
    let cfg = desk_config(seed);
    let start = Instant::now();
    let pre = run_pretrain(&cfg, pairs, &mut RunLog::memory()).expect("pretraining run");
    let pretrain_time = start.elapsed();
    eprintln!("  [pretrain] seed {seed} final InfoNCE {:.4} ({:.0}s)", pre.final_loss, pretrain_time.as_secs_f64());
    let stage1 = pre.bundle.checkpoint();
    let (full, full_time) = train_logged(&cfg, &stage1, data, "full");
    let mut variants = BTreeMap::new();
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Full) {
        let (r, _) = train_logged(&RunConfig { variant: v, ..cfg.clone() }, &stage1, data, v.name());
        variants.insert(v.name(), r.test.f1);
    }
    let mut k_sweep = BTreeMap::from([(cfg.top_k, full.test.f1)]);
    for k in [1, 4, 8] {
        let (r, _) = train_logged(&RunConfig { top_k: k, ..cfg.clone() }, &stage1, data, &format!("K={k}"));
        k_sweep.insert(k, r.test.f1);
    }
    SeedRuns {
        stage1,
        pretrain_loss: pre.final_loss,
        chance: pre.chance,
        frozen_kept: pre.frozen_before == pre.frozen_after,
        pretrain_time,
        full,
        full_time,
        variants,
        k_sweep,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_9(primary: &SeedRuns, data: &[Sample]) -> Verdict {
    let cfg = RunConfig {
        image_size: 16,
        scales: vec![4, 8],
        patch_channels: 4,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_width: 16,
        max_len: 12,
        proj_dim: 6,
        proj_hidden: 10,
        fusion_hidden: 5,
        classifier_hidden: 7,
        pretrain: StageConfig { learning_rate: 1e-3, batch_size: 16, epochs: 2 },
        train: StageConfig { learning_rate: 1e-3, batch_size: 16, epochs: 2 },
        ..RunConfig::default()
    };
    let spec = SyntheticSpec::new(DATA_SEED, 16);
    let pairs = generate_pretraining_pairs(&spec, 64).unwrap();
    let labelled = generate_rumor_samples(&spec, 80).unwrap();
    let run = || {
        let mut log = RunLog::memory();
        let pre = run_pretrain(&cfg, &pairs, &mut log).unwrap();
        run_train(&cfg, Some(&pre.bundle.checkpoint()), &labelled, &mut log).unwrap();
        log.lines().to_vec()
    };
    let (a, b) = (run(), run());
    let identical = a == b;

    let dir = std::env::temp_dir().join(format!("micc-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("full.ckpt");
    primary.full.bundle.checkpoint().save(&path).unwrap();
    let loaded = Bundle::load(&path).unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    let test = split_8_1_1(&data.iter().collect::<Vec<_>>(), |s| s.label, primary.full.bundle.config.seed).test;
    let before = predict(&primary.full.bundle, &test).unwrap();
    let after = predict(&loaded, &test).unwrap();
    let drift = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    verdict(
        9,
        identical && drift <= 1e-6,
        format!("repeated runs give identical {}-line logs: {identical}; checkpoint round trip max |Δŷ| {drift:.2e} over {} test samples", a.len(), test.len()),
    )
}

fn main() -> ExitCode {
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_6(), criterion_10()];

    eprintln!("synthetic reproduction: {PAIRS} pairs, {SAMPLES} labelled samples, seeds {SEEDS:?}");
    let spec = SyntheticSpec::new(DATA_SEED, desk_config(0).image_size);
    let pairs = generate_pretraining_pairs(&spec, PAIRS).unwrap();
    let data = generate_rumor_samples(&spec, SAMPLES).unwrap();
    let runs: Vec<SeedRuns> = SEEDS.iter().map(|&s| run_seed(s, &pairs, &data)).collect();
    let primary = &runs[0];

    let groups_changed = runs.iter().all(|r| r.full.groups_before.iter().all(|(g, h)| &r.full.groups_after[g] != h));
    verdicts.push(verdict(
        5,
        runs.iter().all(|r| r.frozen_kept) && groups_changed,
        format!(
            "stage-1 frozen hashes unchanged in every run: {}; stage-2 changed all {} parameter groups: {groups_changed}",
            runs.iter().all(|r| r.frozen_kept),
            primary.full.groups_before.len()
        ),
    ));

    let bundle = Bundle::from_checkpoint(&primary.stage1).unwrap();
    let (text_acc, image_acc) = unimodal_baselines(&bundle, &data, 0).unwrap();
    let full_f1 = mean(runs.iter().map(|r| r.full.test.f1));
    let worst_variant = runs[0].variants.keys().map(|&v| (v, mean(runs.iter().map(|r| r.variants[v])))).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let wall = primary.pretrain_time + primary.full_time;
    let t = &primary.full.test;
    let ordering_ok = worst_variant.1 <= full_f1;
    let pretrain_ok = runs.iter().all(|r| r.pretrain_loss < r.chance);
    let c7 = pretrain_ok && t.accuracy >= 0.9 && t.f1 >= 0.9 && wall < Duration::from_secs(1800) && text_acc < 0.6 && image_acc < 0.6 && ordering_ok;
    let variant_summary: Vec<String> = runs[0].variants.keys().map(|&v| format!("{v} {:.4}", mean(runs.iter().map(|r| r.variants[v])))).collect();
    verdicts.push(verdict(
        7,
        c7,
        format!(
            "stage-1 InfoNCE {} (< ln 64 = {:.4}); seed-0 test acc {:.4} F1 {:.4} in {:.0}s; unimodal probes text {text_acc:.4} image {image_acc:.4}; mean F1 full {full_f1:.4} vs {}",
            runs.iter().map(|r| format!("{:.4}", r.pretrain_loss)).collect::<Vec<_>>().join("/"),
            primary.chance,
            t.accuracy,
            t.f1,
            wall.as_secs_f64(),
            variant_summary.join(", ")
        ),
    ));

    let mut by_k: Vec<(usize, f64)> = primary.k_sweep.keys().map(|&k| (k, mean(runs.iter().map(|r| r.k_sweep[&k])))).collect();
    by_k.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rank = by_k.iter().position(|&(k, _)| k == 2).unwrap() + 1;
    verdicts.push(verdict(
        8,
        rank <= 2,
        format!("K=2 ranks {rank} by mean F1: {}", by_k.iter().map(|(k, f)| format!("K={k} {f:.4}")).collect::<Vec<_>>().join(", ")),
    ));

    verdicts.push(criterion_9(primary, &data));

    verdicts.sort_by_key(|v| v.id);
    println!("summary:");
    for v in &verdicts {
        println!("criterion {:>2}: {}", v.id, if v.pass { "PASS" } else { "FAIL" });
    }
    if verdicts.iter().all(|v| v.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
