//! `micc` command-line harness: data generation, two-stage training, evaluation, inference
//! and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use micc::checkpoint::Checkpoint;
use micc::classifier::MetricsReport;
use micc::config::{RunConfig, Variant};
use micc::data::synthetic::{generate_pretraining_pairs, generate_rumor_samples, SyntheticSpec};
use micc::data::{load_dataset, load_image, write_dataset};
use micc::diagnostics::{end_to_end_suite, primitive_suite};
use micc::harness::{run_eval, run_infer, run_pretrain, run_train, Bundle, EvalOptions, EvalSplit, RunLog};

#[derive(Parser, Debug)]
#[command(name = "micc", version, about = "Multi-scale contrastive image-text rumor detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (records.jsonl plus PNG images) to a directory.
    GenData(GenDataArgs),
    /// Stage 1: contrastive training of the projection heads on unlabeled pairs.
    Pretrain(PretrainArgs),
    /// Stage 2: full fine-tuning on labelled samples with best-validation selection.
    Train(TrainArgs),
    /// Metrics on the test split of a labelled dataset.
    Eval(EvalArgs),
    /// Classify one text-image pair.
    Infer(InferArgs),
    /// Finite-difference checks of every primitive and the assembled model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Pairs,
    Rumor,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = RunConfig::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    rumor_rate: f64,
    /// Upper bound on the number of objects a rumor caption names.
    #[arg(long, default_value_t = SyntheticSpec::new(0, 32).max_claims)]
    max_claims: usize,
}

/// Command-line values that take precedence over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of the stage being run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate of the stage being run.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size of the stage being run.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Select the top K patches over all scales jointly instead of per scale.
    #[arg(long)]
    global_topk: bool,
    /// Average the image-to-text and text-to-image InfoNCE directions.
    #[arg(long)]
    symmetric_nce: bool,
    /// Run the visual Transformer on each scale separately.
    #[arg(long)]
    per_scale_visual: bool,
}

#[derive(Args, Debug, Default)]
#[group(multiple = false)]
struct AblationFlags {
    /// Skip Top-K; use per-scale means of all valid patches.
    #[arg(long)]
    no_align_patches: bool,
    /// Skip Top-K; use the pooled global image vector.
    #[arg(long)]
    no_align_global: bool,
    /// Concatenate the selected patches with the text vector without fusion weights.
    #[arg(long)]
    no_fusion_concat: bool,
    /// Linearly reduce each selected patch, then concatenate.
    #[arg(long)]
    no_fusion_project: bool,
    /// Cosine similarity in place of the dot product for relevance.
    #[arg(long)]
    cosine_relevance: bool,
}

impl AblationFlags {
    fn variant(&self) -> Option<Variant> {
        [
            (self.no_align_patches, Variant::NoAlignPatches),
            (self.no_align_global, Variant::NoAlignGlobal),
            (self.no_fusion_concat, Variant::NoFusionConcat),
            (self.no_fusion_project, Variant::NoFusionProject),
            (self.cosine_relevance, Variant::CosineRelevance),
        ]
        .into_iter()
        .find_map(|(on, v)| on.then_some(v))
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the CSV log to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Defaults to the config stored in `--init`, or the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage-1 checkpoint; without it training starts from random weights.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    ablation: AblationFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate every record instead of the test split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    dump_alignment: Option<PathBuf>,
    #[arg(long)]
    dump_fusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Relative error bound for the primitive checks.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Relative error bound for the whole-model checks.
    #[arg(long, default_value_t = 1e-3)]
    end_to_end_tolerance: f64,
}

enum Stage {
    Pretrain,
    Train,
}

fn apply(cfg: &mut RunConfig, o: &Overrides, stage: Stage) {
    let st = match stage {
        Stage::Pretrain => &mut cfg.pretrain,
        Stage::Train => &mut cfg.train,
    };
    if let Some(v) = o.epochs {
        st.epochs = v;
    }
    if let Some(v) = o.lr {
        st.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        st.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = o.lambda {
        cfg.lambda = v;
    }
    cfg.global_topk |= o.global_topk;
    cfg.symmetric_nce |= o.symmetric_nce;
    cfg.per_scale_visual |= o.per_scale_visual;
}

fn load_config(path: Option<&Path>) -> micc::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn open_log(path: Option<&Path>) -> micc::Result<RunLog> {
    let mut log = match path {
        Some(p) => RunLog::to_file(p)?,
        None => RunLog::memory(),
    };
    log.echo = true;
    Ok(log)
}

fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        bail!(micc::Error::Config("--n must be at least 1".into()));
    }
    let spec = SyntheticSpec { rumor_rate: a.rumor_rate, max_claims: a.max_claims, ..SyntheticSpec::new(a.seed, a.image_size) };
    let samples = match a.kind {
        DataKind::Pairs => generate_pretraining_pairs(&spec, a.n)?,
        DataKind::Rumor => generate_rumor_samples(&spec, a.n)?,
    };
    write_dataset(&a.out, &samples)?;
    eprintln!("wrote {} records to {}", samples.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply(&mut cfg, &a.overrides, Stage::Pretrain);
    cfg.validate()?;
    let pairs = load_dataset(&a.data, cfg.image_size, cfg.image_size)?;
    let mut log = open_log(a.log.as_deref())?;
    let report = run_pretrain(&cfg, &pairs, &mut log)?;
    report.bundle.checkpoint().save(&a.out)?;
    eprintln!(
        "final InfoNCE {:.4} (chance ln {} = {:.4}); checkpoint {}",
        report.final_loss,
        cfg.pretrain.batch_size.min(pairs.len()),
        report.chance,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&a.config, &init) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.header.config.clone(),
        (None, None) => RunConfig::default(),
    };
    apply(&mut cfg, &a.overrides, Stage::Train);
    if let Some(v) = a.ablation.variant() {
        cfg.variant = v;
    }
    cfg.validate()?;
    let samples = load_dataset(&a.data, cfg.image_size, cfg.image_size)?;
    let mut log = open_log(a.log.as_deref())?;
    let report = run_train(&cfg, init.as_ref(), &samples, &mut log)?;
    report.bundle.checkpoint().save(&a.out)?;
    eprintln!("best epoch {}; test {}", report.best_epoch, report.test);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> micc::Result<()> {
    fs::write(path, text).map_err(|e| micc::Error::io(path, e))
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let bundle = Bundle::load(&a.ckpt)?;
    let samples = load_dataset(&a.data, bundle.config.image_size, bundle.config.image_size)?;
    let opts = EvalOptions {
        split: if a.all { EvalSplit::All } else { EvalSplit::Test },
        dump_alignment: a.dump_alignment.is_some(),
        dump_fusion: a.dump_fusion.is_some(),
    };
    let report = run_eval(&bundle, &samples, &opts)?;
    let name = a.data.file_name().map_or_else(|| "data".to_string(), |n| n.to_string_lossy().into_owned());
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.metrics.csv_row(&name, if a.all { "all" } else { "test" }));
    for (path, csv, what) in [
        (&a.dump_alignment, &report.alignment_csv, "alignment"),
        (&a.dump_fusion, &report.fusion_csv, "fusion"),
    ] {
        if let Some(path) = path {
            match csv {
                Some(text) => write_text(path, text)?,
                None => eprintln!("variant {} has no {what} weights; {} not written", bundle.config.variant.name(), path.display()),
            }
        }
    }
    Ok(())
}

fn infer(a: &InferArgs) -> anyhow::Result<()> {
    let bundle = Bundle::load(&a.ckpt)?;
    let size = bundle.config.image_size;
    let base = a.image.parent().unwrap_or(Path::new("."));
    let name = a.image.file_name().context("--image must name a file")?.to_string_lossy();
    let image = load_image(&name, base, size, size)?;
    let out = run_infer(&bundle, &a.text, &image)?;
    println!("y_hat,{:.6}", out.prob);
    println!("class,{}", out.class);
    println!("scale,patch,score");
    for (scale, patch, score) in &out.regions {
        println!("{scale},{patch},{score:.6}");
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let outcomes: Vec<_> = primitive_suite(a.tolerance).into_iter().chain(end_to_end_suite(a.end_to_end_tolerance)).collect();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.report.passed()).count();
    if failed > 0 {
        bail!(micc::Error::NonFinite(format!("{failed} of {} gradient checks failed", outcomes.len())));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<micc::Error>().map_or(1, micc::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
