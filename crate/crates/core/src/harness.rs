//! Two-stage training driver, evaluation, inference and run logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::classifier::{compute_metrics, decide, Class, MetricsReport};
use crate::config::RunConfig;
use crate::data::{split_8_1_1, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::model::Micc;
use crate::numerics::{Adam, ParamStore, Rng, Tape, Tensor};
use crate::probe::{LogisticProbe, ProbeOptions};
use crate::sclip::{Sclip, PREFIX};
use crate::text::{tokenize, EncodedText, TokenSequence, Vocabulary};
use crate::visual::{EncodedPatches, ImageTensor};

const EVAL_BATCH: usize = 64;

/// Model, parameters and vocabulary travelling together.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub store: ParamStore,
    pub model: Micc,
    pub vocab: Vocabulary,
    pub config: RunConfig,
    pub stage: String,
    pub epoch: usize,
}

impl Bundle {
    pub fn new(config: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Micc::new(&mut store, config, vocab.len())?;
        Ok(Self { store, model, vocab, config: config.clone(), stage: "init".into(), epoch: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vocab = Vocabulary::parse(&(ck.header.vocab.join("\n") + "\n"))?;
        let mut bundle = Self::new(&ck.header.config, vocab)?;
        ck.restore_into(&mut bundle.store, |_| true)?;
        bundle.stage = ck.header.stage.clone();
        bundle.epoch = ck.header.epoch;
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, &self.config, self.vocab.tokens().to_vec(), &self.stage, self.epoch)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.config.max_len)
    }
}

/// CSV run log kept in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
    file: Option<BufWriter<fs::File>>,
    pub echo: bool,
}

impl RunLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { lines: Vec::new(), file: Some(BufWriter::new(f)), echo: false })
    }

    pub fn line(&mut self, line: String) -> Result<()> {
        if self.echo {
            println!("{line}");
        }
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::Data(format!("log write failed: {e}")))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

fn epoch_line(epoch: usize, split: &str, m: &MetricsReport) -> String {
    format!("{epoch},{split},{:.6},{:.6},{:.6},{:.6}", m.accuracy, m.precision, m.recall, m.f1)
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Fingerprint of each parameter group (name up to the second dot).
pub fn param_groups(store: &ParamStore) -> BTreeMap<String, String> {
    let mut names: Vec<String> = store.iter().map(|(_, p)| group_of(&p.name)).collect();
    names.sort();
    names.dedup();
    names.into_iter().map(|g| {
        let fp = store.fingerprint(|p| group_of(&p.name) == g);
        (g, fp)
    }).collect()
}

fn group_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

// ---- stage 1 ----------------------------------------------------------------------------

#[derive(Debug)]
pub struct PretrainReport {
    pub bundle: Bundle,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    /// `ln(batch size)`: the loss at uniform similarities.
    pub chance: f64,
    pub frozen_before: String,
    pub frozen_after: String,
}

/// Frozen-encoder states of one pair, computed once and reused every epoch.
struct CachedPair {
    text: Vec<f64>,
    tokens: usize,
    patches: Vec<f64>,
}

fn cache_states(bundle: &Bundle, seqs: &[TokenSequence], images: &[&ImageTensor]) -> Result<Vec<CachedPair>> {
    let d = bundle.config.d_model;
    let mut out = Vec::with_capacity(seqs.len());
    for (chunk_t, chunk_i) in seqs.chunks(EVAL_BATCH).zip(images.chunks(EVAL_BATCH)) {
        let mut tape = Tape::new(&bundle.store);
        let refs: Vec<&TokenSequence> = chunk_t.iter().collect();
        let (h, g) = bundle.model.sclip.encode_states(&mut tape, &refs, chunk_i)?;
        let (hd, gd) = (tape.data(h.states), tape.data(g.states));
        for (b, seq) in chunk_t.iter().enumerate() {
            let start = b * h.seq_len * d;
            out.push(CachedPair {
                text: hd[start..start + seq.len * d].to_vec(),
                tokens: seq.len,
                patches: gd[b * g.m * d..(b + 1) * g.m * d].to_vec(),
            });
        }
    }
    Ok(out)
}

fn cached_batch(tape: &mut Tape<'_>, bundle: &Bundle, items: &[&CachedPair]) -> Result<(EncodedText, EncodedPatches)> {
    let d = bundle.config.d_model;
    let seq_len = items.iter().map(|c| c.tokens).max().unwrap_or(1);
    let mut text = vec![0.0; items.len() * seq_len * d];
    let mut valid = Vec::with_capacity(items.len() * seq_len);
    let mut patches = Vec::new();
    for (b, c) in items.iter().enumerate() {
        text[b * seq_len * d..b * seq_len * d + c.text.len()].copy_from_slice(&c.text);
        valid.extend((0..seq_len).map(|p| p < c.tokens));
        patches.extend_from_slice(&c.patches);
    }
    let index = bundle.model.sclip.visual.row_index();
    let m = index.len();
    let states = tape.constant(Tensor::matrix(items.len() * seq_len, d, text)?);
    let encoded_text = EncodedText { states, seq_len, lengths: items.iter().map(|c| c.tokens).collect(), valid };
    let pstates = tape.constant(Tensor::matrix(items.len() * m, d, patches)?);
    Ok((encoded_text, EncodedPatches { states: pstates, batch: items.len(), m, index }))
}

/// Stage 1: encoders frozen, projection heads trained with InfoNCE on unlabeled pairs.
pub fn run_pretrain(config: &RunConfig, pairs: &[Sample], log: &mut RunLog) -> Result<PretrainReport> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no pretraining pairs".into()));
    }
    if let Some(s) = pairs.iter().find(|s| s.label.is_some()) {
        return Err(Error::Data(format!("pretraining expects unlabeled pairs, record {} has a label", s.id)));
    }
    let vocab = Vocabulary::from_corpus(pairs.iter().map(|s| s.text.as_str()));
    let mut bundle = Bundle::new(config, vocab)?;
    let seqs = pairs.iter().map(|s| bundle.tokenize(&s.text)).collect::<Result<Vec<_>>>()?;
    let images: Vec<&ImageTensor> = pairs.iter().map(|s| &s.image).collect();

    Sclip::freeze_for_pretraining(&mut bundle.store);
    let frozen_before = bundle.store.fingerprint(|p| p.frozen);
    let cache = cache_states(&bundle, &seqs, &images)?;

    let stage = &config.pretrain;
    let mut adam = Adam::new(stage.learning_rate);
    let mut rng = Rng::new(config.seed).fork(0xa11);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    for epoch in 1..=stage.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0;
        for (step, batch) in order.chunks(stage.batch_size).enumerate() {
            let items: Vec<&CachedPair> = batch.iter().map(|&i| &cache[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::new(&bundle.store);
                let (h, g) = cached_batch(&mut tape, &bundle, &items)?;
                let out = bundle.model.sclip.project(&mut tape, &h, &g)?;
                let loss = bundle.model.sclip.contrastive_loss(&mut tape, &out)?;
                (tape.value(loss).item(), tape.backward(loss)?)
            };
            check_finite(loss, "pretraining loss")?;
            bundle.store.accumulate(&grads, 1.0)?;
            adam.step(&mut bundle.store)?;
            log.line(format!("pretrain,{epoch},{},{loss:.6}", step + 1))?;
            step_losses.push(loss);
            total += loss;
            count += 1;
        }
        epoch_losses.push(total / count as f64);
    }
    let frozen_after = bundle.store.fingerprint(|p| p.frozen);
    bundle.store.unfreeze_all();
    bundle.stage = "pretrain".into();
    bundle.epoch = stage.epochs;
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    let chance = (stage.batch_size.min(pairs.len()) as f64).ln();
    log.line(format!("# pretrain final_loss={final_loss:.6} chance={chance:.6}"))?;
    Ok(PretrainReport { bundle, step_losses, epoch_losses, final_loss, chance, frozen_before, frozen_after })
}

// ---- stage 2 ----------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainReport {
    /// Weights from the epoch with the best validation F1.
    pub bundle: Bundle,
    pub best_epoch: usize,
    pub validation: Vec<MetricsReport>,
    pub test: MetricsReport,
    pub split_sizes: (usize, usize, usize),
    pub groups_before: BTreeMap<String, String>,
    pub groups_after: BTreeMap<String, String>,
}

fn labelled_split<'a>(samples: &'a [Sample], seed: u64) -> Result<DatasetSplit<&'a Sample>> {
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::Data(format!("record {} has no label", s.id)));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(split_8_1_1(&refs, |s| s.label, seed))
}

/// Stage 2: everything unfrozen, BCE on labelled samples, best-validation-F1 selection.
/// Without `init` the model starts from its random initialisation.
pub fn run_train(config: &RunConfig, init: Option<&Checkpoint>, samples: &[Sample], log: &mut RunLog) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let split = labelled_split(samples, config.seed)?;
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!("{} samples are too few for an 8:1:1 split", samples.len())));
    }
    let mut bundle = match init {
        Some(ck) => {
            let vocab = Vocabulary::parse(&(ck.header.vocab.join("\n") + "\n"))?;
            let mut b = Bundle::new(config, vocab)?;
            ck.restore_into(&mut b.store, |name| name.starts_with(PREFIX))?;
            b
        }
        None => Bundle::new(config, Vocabulary::from_corpus(samples.iter().map(|s| s.text.as_str())))?,
    };
    let sizes = split.sizes();
    log.line(format!("# split train={} validation={} test={}", sizes.0, sizes.1, sizes.2))?;
    bundle.store.unfreeze_all();
    let groups_before = param_groups(&bundle.store);

    let train_seqs = split.train.iter().map(|s| bundle.tokenize(&s.text)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = split.train.iter().map(|s| s.label_f64()).collect::<Result<_>>()?;
    let stage = &config.train;
    let mut adam = Adam::new(stage.learning_rate);
    let mut rng = Rng::new(config.seed).fork(0xb22);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut validation = Vec::with_capacity(stage.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut global_step = 0u64;
    for epoch in 1..=stage.epochs {
        rng.shuffle(&mut order);
        for (step, batch) in order.chunks(stage.batch_size).enumerate() {
            global_step += 1;
            let texts: Vec<&TokenSequence> = batch.iter().map(|&i| &train_seqs[i]).collect();
            let images: Vec<&ImageTensor> = batch.iter().map(|&i| &split.train[i].image).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::training(&bundle.store, rng.fork(global_step));
                let fwd = bundle.model.forward(&mut tape, &texts, &images)?;
                let loss = tape.bce(fwd.probs, &ys)?;
                (tape.value(loss).item(), tape.backward(loss)?)
            };
            check_finite(loss, "training loss")?;
            bundle.store.accumulate(&grads, 1.0)?;
            adam.step(&mut bundle.store)?;
            log.line(format!("train,{epoch},{},{loss:.6}", step + 1))?;
        }
        let m = evaluate(&bundle, &split.validation)?;
        log.line(epoch_line(epoch, "validation", &m))?;
        if best.as_ref().map_or(true, |(_, f1, _)| m.f1 > *f1) {
            best = Some((epoch, m.f1, bundle.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect()));
        }
        validation.push(m);
    }
    let groups_after = param_groups(&bundle.store);
    let best_epoch = match best {
        Some((epoch, _, values)) => {
            for (id, v) in bundle.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
                bundle.store.get_mut(id).tensor.data_mut().copy_from_slice(&v);
            }
            epoch
        }
        None => 0,
    };
    bundle.stage = "train".into();
    bundle.epoch = best_epoch;
    let test = evaluate(&bundle, &split.test)?;
    log.line(epoch_line(best_epoch, "test", &test))?;
    Ok(TrainReport { bundle, best_epoch, validation, test, split_sizes: sizes, groups_before, groups_after })
}

// ---- evaluation -------------------------------------------------------------------------

/// Eval-mode rumor probabilities.
pub fn predict(bundle: &Bundle, samples: &[&Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let seqs = chunk.iter().map(|s| bundle.tokenize(&s.text)).collect::<Result<Vec<_>>>()?;
        let texts: Vec<&TokenSequence> = seqs.iter().collect();
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new(&bundle.store);
        let fwd = bundle.model.forward(&mut tape, &texts, &images)?;
        for &p in tape.data(fwd.probs) {
            out.push(check_finite(p, "prediction")?);
        }
    }
    Ok(out)
}

pub fn evaluate(bundle: &Bundle, samples: &[&Sample]) -> Result<MetricsReport> {
    let probs = predict(bundle, samples)?;
    let preds: Vec<Class> = probs.iter().map(|&p| decide(p)).collect();
    let labels: Vec<u8> = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Data(format!("record {} has no label", s.id))))
        .collect::<Result<_>>()?;
    compute_metrics(&preds, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub split: EvalSplit,
    pub dump_alignment: bool,
    pub dump_fusion: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub ids: Vec<String>,
    pub probs: Vec<f64>,
    /// `id,scale,patch,score,selected` for every valid patch.
    pub alignment_csv: Option<String>,
    /// `id,slot,scale,patch,alpha` for every valid selected patch.
    pub fusion_csv: Option<String>,
}

pub fn run_eval(bundle: &Bundle, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let chosen: Vec<&Sample> = match opts.split {
        EvalSplit::Test => labelled_split(samples, bundle.config.seed)?.test,
        EvalSplit::All => {
            labelled_split(samples, bundle.config.seed)?;
            samples.iter().collect()
        }
    };
    if chosen.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut alignment = opts.dump_alignment.then(|| String::from("id,scale,patch,score,selected\n"));
    let mut fusion = opts.dump_fusion.then(|| String::from("id,slot,scale,patch,alpha\n"));
    let mut probs = Vec::with_capacity(chosen.len());
    for chunk in chosen.chunks(EVAL_BATCH) {
        let seqs = chunk.iter().map(|s| bundle.tokenize(&s.text)).collect::<Result<Vec<_>>>()?;
        let texts: Vec<&TokenSequence> = seqs.iter().collect();
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new(&bundle.store);
        let fwd = bundle.model.forward(&mut tape, &texts, &images)?;
        for &p in tape.data(fwd.probs) {
            probs.push(check_finite(p, "prediction")?);
        }
        if let (Some(csv), Some(d)) = (alignment.as_mut(), fwd.relevance.as_ref()) {
            let sel = fwd.selected.as_ref().expect("selection accompanies relevance");
            for (b, s) in chunk.iter().enumerate() {
                let chosen: Vec<(usize, usize)> = sel.for_sample(b).map(|(sc, p, _)| (sc, p)).collect();
                for scale in 0..d.scales {
                    for patch in 0..d.slots {
                        if let Some(score) = d.get(b, scale, patch) {
                            let flag = u8::from(chosen.contains(&(scale, patch)));
                            csv.push_str(&format!("{},{scale},{patch},{score:.6},{flag}\n", s.id));
                        }
                    }
                }
            }
        }
        if let (Some(csv), Some(alpha), Some(sel)) = (fusion.as_mut(), fwd.alpha, fwd.selected.as_ref()) {
            let a = tape.data(alpha);
            for (b, s) in chunk.iter().enumerate() {
                for slot in 0..sel.width {
                    if let Some((scale, patch)) = sel.origin[b * sel.width + slot] {
                        csv.push_str(&format!("{},{slot},{scale},{patch},{:.6}\n", s.id, a[b * sel.width + slot]));
                    }
                }
            }
        }
    }
    let preds: Vec<Class> = probs.iter().map(|&p| decide(p)).collect();
    let labels: Vec<u8> = chosen.iter().map(|s| s.label.expect("checked by split")).collect();
    Ok(EvalReport {
        metrics: compute_metrics(&preds, &labels)?,
        ids: chosen.iter().map(|s| s.id.clone()).collect(),
        probs,
        alignment_csv: alignment,
        fusion_csv: fusion,
    })
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub prob: f64,
    pub class: Class,
    /// Selected `(scale, patch, relevance)` rows, scale-major.
    pub regions: Vec<(usize, usize, f64)>,
}

pub fn run_infer(bundle: &Bundle, text: &str, image: &ImageTensor) -> Result<Inference> {
    let seq = bundle.tokenize(text)?;
    let mut tape = Tape::new(&bundle.store);
    let fwd = bundle.model.forward(&mut tape, &[&seq], &[image])?;
    let prob = check_finite(tape.data(fwd.probs)[0], "prediction")?;
    let regions = fwd.selected.as_ref().map(|s| s.for_sample(0).collect()).unwrap_or_default();
    Ok(Inference { prob, class: decide(prob), regions })
}

/// Pooled text-only and image-only encoder features, one row per sample.
pub fn unimodal_features(bundle: &Bundle, samples: &[&Sample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = bundle.config.proj_dim;
    let (mut text, mut image) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(EVAL_BATCH) {
        let seqs = chunk.iter().map(|s| bundle.tokenize(&s.text)).collect::<Result<Vec<_>>>()?;
        let texts: Vec<&TokenSequence> = seqs.iter().collect();
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new(&bundle.store);
        let out = bundle.model.sclip.encode_batch(&mut tape, &texts, &images)?;
        text.extend(tape.data(out.text).chunks(d).map(<[f64]>::to_vec));
        image.extend(tape.data(out.image).chunks(d).map(<[f64]>::to_vec));
    }
    Ok((text, image))
}

/// Test accuracy of logistic probes on text-only and image-only features, fitted on the
/// training split of `samples`.
pub fn unimodal_baselines(bundle: &Bundle, samples: &[Sample], seed: u64) -> Result<(f64, f64)> {
    let split = labelled_split(samples, seed)?;
    let labels = |part: &[&Sample]| part.iter().map(|s| s.label.expect("labelled")).collect::<Vec<u8>>();
    let (tr_t, tr_i) = unimodal_features(bundle, &split.train)?;
    let (te_t, te_i) = unimodal_features(bundle, &split.test)?;
    let (ytr, yte) = (labels(&split.train), labels(&split.test));
    let text = LogisticProbe::fit(&tr_t, &ytr, ProbeOptions::default())?.accuracy(&te_t, &yte);
    let image = LogisticProbe::fit(&tr_i, &ytr, ProbeOptions::default())?.accuracy(&te_i, &yte);
    Ok((text, image))
}
