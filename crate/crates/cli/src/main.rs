use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use viprom::bench::{emit_report, run_grid, BenchResult, GridSpec, ReportFormat, RunOptions};
use viprom::config::{snapshot_config, RunConfig};
use viprom::contrastive::train_contrastive;
use viprom::dataset::{build_manifest, generate_synthetic_corpus, load_annotations, FrameStore, Motion};
use viprom::encoder::{freeze, init_encoder, load_checkpoint, save_checkpoint};
use viprom::imitation::run_protocol;
use viprom::metrics::write_metrics;
use viprom::supervised::{generate_pseudo_labels, read_pseudo_labels, train_supervised, write_pseudo_labels, ClassifierTeacher, LabelHintTeacher, Teacher};
use viprom::toyenv::{collect_demos, save_demos, TaskId, TaskSpec};
use viprom::{DType, Scalar};

const CHECKPOINT_FILE: &str = "encoder.vpck";
const METRICS_FILE: &str = "metrics.jsonl";
const LABELS_FILE: &str = "pseudo_labels.jsonl";
const DEMOS_FILE: &str = "demos.vpdm";
const REPORT_FILE: &str = "eval_report.json";

#[derive(Parser, Debug)]
#[command(name = "viprom", version, about = "Cascade visual pre-training and frozen-encoder behaviour cloning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    /// Desk-scale budgets.
    #[arg(long, global = true)]
    toy: bool,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut narration-anchored clips into a manifest.
    BuildManifest {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic labelled clip corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_clips: Option<usize>,
        /// Frozen scenes instead of moving clips.
        #[arg(long = "static")]
        static_frames: bool,
    },
    /// Momentum-contrastive pre-training from a fresh encoder.
    PretrainContrastive {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Label every retained frame with a teacher.
    GenPseudoLabels {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "label-hint")]
        teacher: TeacherKind,
        /// Training steps for the classifier teacher.
        #[arg(long, default_value_t = 300)]
        teacher_steps: usize,
    },
    /// Joint pseudo-label and frame-order fine-tuning.
    PretrainSupervised {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Scripted-expert demonstrations for one task.
    CollectDemos {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behaviour cloning on a frozen encoder over tasks and seeds.
    BcEval {
        /// Encoder checkpoint; a fresh scratch encoder when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, value_delimiter = ',', default_value = "100,125,150")]
        seeds: Vec<u64>,
        #[arg(long)]
        n_demos: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Study grids.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Render a bench result.
    Report {
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value = "table-text")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum BenchAction {
    Run {
        /// Grid document; the config file's `[bench]` section when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TeacherKind {
    LabelHint,
    Classifier,
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn load(g: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.global.seed = s;
        }
        if let Some(d) = &g.data_root {
            cfg.global.data_root = Some(d.clone());
        }
        if let Some(o) = &g.out_root {
            cfg.global.out_root = o.clone();
        }
        if g.toy {
            cfg.global.toy = true;
        }
        if let Some(p) = g.precision {
            cfg.global.precision = match p {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            };
        }
        Ok(Self { cfg: cfg.resolve() })
    }

    /// Output directory under `out_root`, with the config snapshot written.
    fn out_dir(&self, out: &Path) -> Result<PathBuf> {
        let dir = self.cfg.global.out_root.join(out);
        let fp = snapshot_config(&self.cfg, &dir)?;
        info!("writing to {} (config {})", dir.display(), &fp[..12]);
        Ok(dir)
    }

    /// Inputs are taken as given when they exist, otherwise under
    /// `data_root`, then under `out_root`.
    fn input(&self, p: &Path) -> PathBuf {
        [p.to_path_buf(), self.cfg.data_root().join(p), self.cfg.global.out_root.join(p)].into_iter().find(|c| c.exists()).unwrap_or_else(|| p.to_path_buf())
    }
}

fn parse_tasks(s: &str) -> Result<Vec<TaskSpec>> {
    if s == "all" {
        return Ok(TaskSpec::all());
    }
    s.split(',').map(|t| Ok(TaskSpec::new(t.trim().parse()?))).collect()
}

fn pretrain_contrastive<T: Scalar>(ctx: &Ctx, corpus: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let (m, s) = FrameStore::load(&ctx.input(corpus)).with_context(|| format!("loading corpus {}", corpus.display()))?;
    let mut cfg = ctx.cfg.contrastive.clone();
    cfg.max_steps = steps.or(cfg.max_steps);
    let run = train_contrastive::<T>(&m, &s, &cfg)?;
    let dir = ctx.out_dir(out)?;
    save_checkpoint(&run.checkpoint, &dir.join(CHECKPOINT_FILE))?;
    write_metrics(&dir.join(METRICS_FILE), &run.metrics)?;
    println!("{}", run.checkpoint.fingerprint);
    Ok(())
}

fn gen_pseudo_labels<T: Scalar>(ctx: &Ctx, corpus: &Path, out: &Path, kind: TeacherKind, steps: usize) -> Result<()> {
    let (m, s) = FrameStore::load(&ctx.input(corpus))?;
    let n_classes = ctx.cfg.supervised.n_classes;
    let teacher: Box<dyn Teacher> = match kind {
        TeacherKind::LabelHint => Box::new(LabelHintTeacher { n_classes }),
        TeacherKind::Classifier => {
            let init = init_encoder::<T>(ctx.cfg.contrastive.encoder, ctx.cfg.supervised.seed)?;
            Box::new(ClassifierTeacher::train(&init, &m, &s, n_classes, steps, ctx.cfg.supervised.seed)?)
        }
    };
    let records = generate_pseudo_labels(teacher.as_ref(), &m, &s)?;
    let dir = ctx.out_dir(out)?;
    write_pseudo_labels(&dir.join(LABELS_FILE), &records)?;
    println!("{} records from teacher {}", records.len(), teacher.id());
    Ok(())
}

fn pretrain_supervised<T: Scalar>(ctx: &Ctx, ckpt: &Path, corpus: &Path, labels: &Path, out: &Path, steps: Option<usize>, lambda: Option<f64>) -> Result<()> {
    let init = load_checkpoint::<T>(&ctx.input(ckpt))?;
    let (m, s) = FrameStore::load(&ctx.input(corpus))?;
    let records = read_pseudo_labels(&ctx.input(labels))?;
    let mut cfg = ctx.cfg.supervised.clone();
    cfg.max_steps = steps.or(cfg.max_steps);
    cfg.lambda = lambda.unwrap_or(cfg.lambda);
    let run = train_supervised(&init, &m, &s, &records, &cfg)?;
    let dir = ctx.out_dir(out)?;
    save_checkpoint(&run.checkpoint, &dir.join(CHECKPOINT_FILE))?;
    write_metrics(&dir.join(METRICS_FILE), &run.metrics)?;
    println!("{}", run.checkpoint.fingerprint);
    Ok(())
}

fn bc_eval<T: Scalar>(ctx: &Ctx, ckpt: Option<&Path>, tasks: &str, seeds: &[u64], n_demos: Option<usize>, steps: Option<usize>, out: &Path) -> Result<()> {
    let ck = match ckpt {
        Some(p) => load_checkpoint::<T>(&ctx.input(p))?,
        None => init_encoder::<T>(ctx.cfg.contrastive.encoder, ctx.cfg.contrastive.seed)?,
    };
    let mut bc = ctx.cfg.imitation.clone();
    bc.n_demos = n_demos.unwrap_or(bc.n_demos);
    bc.steps = steps.unwrap_or(bc.steps);
    let report = run_protocol(&freeze(ck), &parse_tasks(tasks)?, seeds, &bc)?;
    let dir = ctx.out_dir(out)?;
    report.save(&dir.join(REPORT_FILE))?;
    for c in &report.cells {
        println!("{:<13} seed {:>4}  best success {:.3}", c.task.to_string(), c.seed, c.best_success);
    }
    let per_seed: BTreeMap<_, _> = report.per_seed();
    println!("aggregate {:.3}  per seed {per_seed:?}", report.aggregate);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::load(&cli.global)?;
    let f64_mode = ctx.cfg.global.precision == DType::F64;
    macro_rules! typed {
        ($f:ident($($a:expr),*)) => {
            if f64_mode { $f::<f64>($($a),*) } else { $f::<f32>($($a),*) }
        };
    }
    match cli.command {
        Command::BuildManifest { annotations, out } => {
            let ann = load_annotations(&ctx.input(&annotations))?;
            let durations = ann.videos.iter().map(|v| (v.video_id.clone(), v.duration_s)).collect();
            let m = build_manifest(&ann.narrations, &durations, ctx.cfg.dataset.manifest)?;
            let dir = ctx.out_dir(&out)?;
            m.save(&dir.join("manifest.json"))?;
            println!("{} clips, {} retained frames, {} skipped", m.clips.len(), m.total_retained_frames(), m.skipped_out_of_bounds);
        }
        Command::SynthCorpus { out, n_clips, static_frames } => {
            let mut cfg = ctx.cfg.dataset.synth.clone();
            cfg.n_clips = n_clips.unwrap_or(cfg.n_clips);
            if static_frames {
                cfg.motion = Motion::Static;
            }
            let (m, s) = generate_synthetic_corpus(&cfg)?;
            let dir = ctx.out_dir(&out)?;
            s.save(&dir, &m)?;
            println!("{} clips, {} retained frames", m.clips.len(), m.total_retained_frames());
        }
        Command::PretrainContrastive { corpus, out, steps } => typed!(pretrain_contrastive(&ctx, &corpus, &out, steps))?,
        Command::GenPseudoLabels { corpus, out, teacher, teacher_steps } => typed!(gen_pseudo_labels(&ctx, &corpus, &out, teacher, teacher_steps))?,
        Command::PretrainSupervised { ckpt, corpus, labels, out, steps, lambda } => {
            typed!(pretrain_supervised(&ctx, &ckpt, &corpus, &labels, &out, steps, lambda))?
        }
        Command::CollectDemos { task, n, seed, out } => {
            let spec = TaskSpec::new(task);
            let demos = collect_demos(&spec, n, seed)?;
            let dir = ctx.out_dir(&out)?;
            save_demos(&dir.join(DEMOS_FILE), &spec, &demos)?;
            println!("{n} {task} demos, {} steps", demos.iter().map(|d| d.steps.len()).sum::<usize>());
        }
        Command::BcEval { ckpt, tasks, seeds, n_demos, steps, out } => typed!(bc_eval(&ctx, ckpt.as_deref(), &tasks, &seeds, n_demos, steps, &out))?,
        Command::Bench { action: BenchAction::Run { spec, workers, out } } => {
            let grid = match (&spec, &ctx.cfg.bench) {
                (Some(p), _) => GridSpec::load(&ctx.input(p))?,
                (None, Some(g)) => g.clone(),
                (None, None) => bail!("bench run needs --spec or a [bench] section in the config"),
            };
            let dir = ctx.out_dir(&out)?;
            let opts = RunOptions { workers, out_dir: Some(dir.clone()) };
            let result = if f64_mode { run_grid::<f64>(&grid, &opts)? } else { run_grid::<f32>(&grid, &opts)? };
            print!("{}", viprom::bench::render_table(&result));
        }
        Command::Report { result, format, out } => {
            let format: ReportFormat = format.parse()?;
            let res = BenchResult::load(&ctx.input(&result))?;
            if res.rows.is_empty() {
                bail!("{} has no rows", result.display());
            }
            let dir = ctx.out_dir(&out)?;
            println!("{}", emit_report(&res, format, &dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
