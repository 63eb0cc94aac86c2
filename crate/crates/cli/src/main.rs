//! `fuselab` command-line front end.
//!
//! Every subcommand resolves its settings as defaults, then `--config`
//! (`key = value` lines), then flags, writes the resolved settings next to its
//! outputs, and calls straight into the library.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fuselab::atlas::{select_corpus_atlas, NmiConfig, DEFAULT_BINS};
use fuselab::autodiff::suite::{op_suite, OP_TOL};
use fuselab::evalx::{dice, evaluate_model, with_pathologies};
use fuselab::fusion::bench::{bench_fusion, BenchConfig};
use fuselab::synth::{Corpus, CorpusSpec, PathologySpec, Split};
use fuselab::train::{check_training_tape, log_csv, train_comparenet_with, Ablation, CompareNet, TrainConfig};
use fuselab::volgrid::{read_labels, read_scalar, write_volume};

use config::{resolve, Overrides};

/// Tolerance of the end-to-end training-tape gradient check.
const TAPE_TOL: f64 = 1e-4;
/// Largest fraction of tape elements the stability screen may skip.
const TAPE_MAX_UNRESOLVED: f64 = 0.1;
/// Largest allowed gap between the naive and fast fusion outputs.
const BENCH_MAX_DIFF: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "fuselab", version, about = "Differentiable non-local label fusion")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` settings applied before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to FUSELAB_THREADS).
    #[arg(long, global = true, env = "FUSELAB_THREADS")]
    threads: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "fuselab-out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom corpus and its manifest.
    SynthGen(SynthGenArgs),
    /// Pick the training volume with the highest mean NMI.
    AtlasSelect(AtlasSelectArgs),
    /// Train a model (or fit the Gaussian baseline).
    Train(TrainArgs),
    /// Segment one target against an atlas.
    Segment(SegmentArgs),
    /// Dice of a model on the test split, or of a prediction against a truth.
    Eval(EvalArgs),
    /// Copy a corpus with synthetic lesions in its test images.
    Perturb(PerturbArgs),
    /// Finite-difference checks of every op and of the training tape.
    Gradcheck(GradcheckArgs),
    /// Time the naive and fast fusion paths.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Side length of the cubic volumes.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Number of training volumes; the rest form the test split.
    #[arg(long)]
    train: Option<usize>,
}

#[derive(Args, Debug)]
struct AtlasSelectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Corpus index of the atlas; NMI selection over the training split if absent.
    #[arg(long)]
    atlas_index: Option<usize>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    atlas_labels: PathBuf,
    /// Also write the probability map.
    #[arg(long)]
    probabilities: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, requires_all = ["checkpoint"], conflicts_with_all = ["pred", "truth"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    atlas_index: Option<usize>,
    /// Predicted label volume, scored against `--truth`.
    #[arg(long, requires = "truth")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    pathology_radius_lo: Option<f64>,
    #[arg(long)]
    pathology_radius_hi: Option<f64>,
    #[arg(long)]
    pathology_delta_lo: Option<f64>,
    #[arg(long)]
    pathology_delta_hi: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random draws per op.
    #[arg(long)]
    draws: Option<u64>,
    /// Elements sampled from the training tape.
    #[arg(long)]
    subsample: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Side length of the cubic volume.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long, alias = "r")]
    radius: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let file = match &cli.global.config {
        Some(path) => config::read_kv(path)?,
        None => Vec::new(),
    };
    let run = Run { global: &cli.global, file };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&run, a),
        Command::AtlasSelect(a) => atlas_select(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Segment(a) => segment(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Perturb(a) => perturb(&run, a),
        Command::Gradcheck(a) => gradcheck(&run, a),
        Command::Bench(a) => bench(&run, a),
    }
}

/// Settings shared by every subcommand.
struct Run<'a> {
    global: &'a Global,
    file: Vec<(String, String)>,
}

impl Run<'_> {
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, defaults: &T, flags: Overrides) -> Result<T> {
        let flags = flags.with_optional("seed", self.global.seed);
        resolve(defaults, &self.file, &flags)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    /// Creates the output directory and refuses to clobber `names` unless forced.
    fn prepare(&self, names: &[&str]) -> Result<()> {
        std::fs::create_dir_all(&self.global.out).with_context(|| format!("creating {}", self.global.out.display()))?;
        if !self.global.force {
            if let Some(existing) = names.iter().map(|n| self.out(n)).find(|p| p.exists()) {
                bail!("{} already exists; pass --force to overwrite", existing.display());
            }
        }
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.out(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn snapshot(&self, command: &str, resolved: &impl Serialize) -> Result<()> {
        let value = json!({ "command": command, "threads": self.global.threads, "settings": resolved });
        self.write_json(&format!("{command}.config.json"), &value)
    }
}

fn synth_gen(run: &Run, a: &SynthGenArgs) -> Result<()> {
    let flags = Overrides::new().with("side", a.dims).with("num_classes", a.classes).with("count", a.count).with("train", a.train);
    let spec: CorpusSpec = run.resolve(&CorpusSpec::standard(0), flags)?;
    run.prepare(&["manifest.json", "synth-gen.config.json"])?;
    let corpus = Corpus::generate(&spec)?;
    corpus.write(&run.global.out)?;
    run.snapshot("synth-gen", &spec)?;
    println!("wrote {} volumes to {}", corpus.subjects.len(), run.global.out.display());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

#[derive(Serialize, serde::Deserialize)]
struct AtlasSettings {
    bins: usize,
}

fn atlas_select(run: &Run, a: &AtlasSelectArgs) -> Result<()> {
    let settings: AtlasSettings = run.resolve(&AtlasSettings { bins: DEFAULT_BINS }, Overrides::new().with("bins", a.bins))?;
    run.prepare(&["atlas.json", "atlas-select.config.json"])?;
    let corpus = load_corpus(&a.manifest)?;
    let chosen = select_corpus_atlas(&corpus, &NmiConfig::new(settings.bins)?)?;
    run.write_json("atlas.json", &chosen)?;
    run.snapshot("atlas-select", &json!({ "manifest": a.manifest, "bins": settings.bins }))?;
    println!("atlas {} (index {})", chosen.id, chosen.index);
    Ok(())
}

fn atlas_index(corpus: &Corpus, given: Option<usize>) -> Result<usize> {
    match given {
        Some(i) => Ok(i),
        None => Ok(select_corpus_atlas(corpus, &NmiConfig::default())?.index),
    }
}

fn train(run: &Run, a: &TrainArgs) -> Result<()> {
    let flags = Overrides::new()
        .with("mode", a.ablation.map(|m| m.as_str()))
        .with("steps", a.steps)
        .with("lr", a.lr)
        .with("radius", a.radius);
    let config: TrainConfig = run.resolve(&TrainConfig::default(), flags)?;
    config.validate()?;
    run.prepare(&["checkpoint.vgp", "train_log.csv", "train.config.json"])?;
    let corpus = load_corpus(&a.manifest)?;
    let atlas = atlas_index(&corpus, a.atlas_index)?;
    eprintln!("training {} against atlas {}", config.mode, corpus.subjects[atlas].id);
    let outcome = train_comparenet_with(&corpus, atlas, &config, &mut |row| {
        if row.step == 1 || row.step % 100 == 0 {
            eprintln!("step {:>5}  loss {:.4}  alpha {:.4}", row.step, row.loss, row.alpha);
        }
    })?;
    outcome.model.save(run.out("checkpoint.vgp"))?;
    std::fs::write(run.out("train_log.csv"), log_csv(&outcome.log))?;
    run.snapshot("train", &json!({ "manifest": a.manifest, "atlas_index": atlas, "train": config }))?;
    println!("wrote {}", run.out("checkpoint.vgp").display());
    Ok(())
}

fn segment(run: &Run, a: &SegmentArgs) -> Result<()> {
    let mut names = vec!["labels.vgf", "segment.config.json"];
    if a.probabilities {
        names.push("probabilities.vgf");
    }
    run.prepare(&names)?;
    let model = CompareNet::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let target = read_scalar(&a.target)?;
    let atlas = read_scalar(&a.atlas)?;
    let atlas_labels = read_labels(&a.atlas_labels)?;
    let seg = model.segment(&target, &atlas, &atlas_labels)?;
    write_volume(&seg.labels.into(), run.out("labels.vgf"))?;
    if a.probabilities {
        write_volume(&seg.probabilities.into(), run.out("probabilities.vgf"))?;
    }
    run.snapshot("segment", &json!({
        "checkpoint": a.checkpoint,
        "target": a.target,
        "atlas": a.atlas,
        "atlas_labels": a.atlas_labels,
        "probabilities": a.probabilities,
        "model": model.config,
    }))?;
    println!("wrote {}", run.out("labels.vgf").display());
    Ok(())
}

fn eval(run: &Run, a: &EvalArgs) -> Result<()> {
    run.prepare(&["dice.json", "eval.config.json"])?;
    match (&a.manifest, &a.checkpoint, &a.pred, &a.truth) {
        (Some(manifest), Some(checkpoint), None, None) => {
            let corpus = load_corpus(manifest)?;
            let model = CompareNet::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let atlas = atlas_index(&corpus, a.atlas_index)?;
            let evaluation = evaluate_model(&model, &corpus, atlas, &corpus.indices(Split::Test))?;
            run.write_json("dice.json", &evaluation.dice)?;
            run.snapshot("eval", &json!({ "manifest": manifest, "checkpoint": checkpoint, "atlas_index": atlas }))?;
            println!("mean dice {:.4} over {} test volumes", evaluation.dice.mean, evaluation.dice.volumes.len());
        }
        (None, None, Some(pred), Some(truth)) => {
            let report = dice(&read_labels(pred)?, &read_labels(truth)?)?;
            run.write_json("dice.json", &report)?;
            run.snapshot("eval", &json!({ "pred": pred, "truth": truth }))?;
            println!("mean dice {:.4}", report.mean);
        }
        _ => bail!("eval needs either --manifest with --checkpoint, or --pred with --truth"),
    }
    Ok(())
}

fn perturb(run: &Run, a: &PerturbArgs) -> Result<()> {
    let corpus = load_corpus(&a.manifest)?;
    let defaults = PathologySpec::desk_scale(corpus.spec.side, PathologySpec::DEFAULT_COUNT, 0);
    let flags = Overrides::new()
        .with("count", a.count)
        .range("radius", a.pathology_radius_lo, a.pathology_radius_hi)
        .range("delta", a.pathology_delta_lo, a.pathology_delta_hi);
    let spec: PathologySpec = run.resolve(&defaults, flags)?;
    spec.validate(fuselab::volgrid::Dims::cube(corpus.spec.side))?;
    run.prepare(&["manifest.json", "perturb.config.json"])?;
    let perturbed = with_pathologies(&corpus, &spec)?;
    perturbed.write(&run.global.out)?;
    run.snapshot("perturb", &json!({ "manifest": a.manifest, "pathology": spec }))?;
    println!("wrote perturbed corpus to {}", run.global.out.display());
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct GradcheckSettings {
    draws: u64,
    subsample: usize,
    seed: u64,
}

fn gradcheck(run: &Run, a: &GradcheckArgs) -> Result<()> {
    let defaults = GradcheckSettings { draws: 20, subsample: 80, seed: 0 };
    let settings: GradcheckSettings = run.resolve(&defaults, Overrides::new().with("draws", a.draws).with("subsample", a.subsample))?;
    run.prepare(&["gradcheck.json", "gradcheck.config.json"])?;
    let ops = op_suite(settings.draws)?;
    let mut failed: Vec<String> = ops.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    for r in &ops {
        println!("{:<24} max rel err {:.3e}  {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let mut tapes = Vec::new();
    for mode in [Ablation::Full, Ablation::ClassificationOnly] {
        let (report, _) = check_training_tape(mode, settings.seed, Some(settings.subsample))?;
        let passed = report.passes(TAPE_TOL) && report.unresolved_fraction() <= TAPE_MAX_UNRESOLVED;
        println!(
            "tape {:<19} max rel err {:.3e}  unresolved {}/{}  {}",
            mode.as_str(),
            report.max_rel_err,
            report.unresolved,
            report.checked + report.unresolved,
            if passed { "ok" } else { "FAIL" }
        );
        if !passed {
            failed.push(format!("tape {mode}"));
        }
        tapes.push(json!({ "mode": mode, "passed": passed, "report": report }));
    }
    let value = json!({ "op_tol": OP_TOL, "tape_tol": TAPE_TOL, "ops": ops, "tapes": tapes });
    run.write_json("gradcheck.json", &value)?;
    run.snapshot("gradcheck", &settings)?;
    if !failed.is_empty() {
        bail!("gradient checks failed: {}", failed.join(", "));
    }
    Ok(())
}

fn bench(run: &Run, a: &BenchArgs) -> Result<()> {
    let flags = Overrides::new()
        .with("side", a.dims)
        .with("radius", a.radius)
        .with("features", a.features)
        .with("classes", a.classes)
        .with("runs", a.runs);
    let config: BenchConfig = run.resolve(&BenchConfig::default(), flags)?;
    run.prepare(&["bench.json", "bench.config.json"])?;
    let report = bench_fusion(&config)?;
    run.write_json("bench.json", &report)?;
    run.snapshot("bench", &config)?;
    println!(
        "naive {:.1} ms  fast {:.1} ms  speedup {:.1}x  max abs diff {:.3e}",
        report.naive_median_ms, report.fast_median_ms, report.speedup, report.max_abs_diff
    );
    if !(report.max_abs_diff < BENCH_MAX_DIFF) {
        bail!("fast and naive fusion disagree by {:e}", report.max_abs_diff);
    }
    Ok(())
}
