use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ktn::gradsuite::{run_gradient_suite, SUITE_TOL};
use ktn::pipeline::{self, ModelKind, RunConfig, SourceTag, Workspace, WORKSPACE_ENV};
use ktn::sphconv::Method;
use ktn::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_GATE: u8 = 3;

/// Kernel transformer networks for spherical MNIST: dataset projection,
/// source training, target caching, distillation, evaluation and reporting.
#[derive(Parser, Debug)]
#[command(name = "ktn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace root [default: workspace]
    #[arg(long, global = true, env = WORKSPACE_ENV)]
    workspace: Option<PathBuf>,
    /// Directory with the four MNIST IDX files [default: data/mnist]
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Worker threads (results do not depend on this) [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training epochs [default: 40]
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Initial Adam learning rate [default: 0.001]
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Epoch at which the learning rate drops [default: 20]
    #[arg(long, global = true)]
    lr_decay_epoch: Option<usize>,
    /// Learning-rate multiplier at the drop [default: 0.1]
    #[arg(long, global = true)]
    lr_decay_factor: Option<f64>,
    /// Mini-batch size for classifier training [default: 64]
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// L2 weight decay [default: 0.0005]
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    /// Weight initialisation standard deviation [default: 0.01]
    #[arg(long, global = true)]
    init_std: Option<f64>,
    /// Canvas height; width is twice this [default: 80]
    #[arg(long, global = true)]
    height: Option<usize>,
    /// Digit field of view in degrees [default: 65.5]
    #[arg(long, global = true)]
    fov_deg: Option<f64>,
    /// Images whose distillation targets are cached [default: 512]
    #[arg(long, global = true)]
    distill_images: Option<usize>,
    /// Distillation epochs per layer [default: 40]
    #[arg(long, global = true)]
    distill_epochs: Option<usize>,
    /// Lattice strides for conv1..conv3, comma separated [default: 4,2,1]
    #[arg(long, global = true, value_delimiter = ',', num_args = 3)]
    strides: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project MNIST onto the sphere (train: random placements, test: nine polar angles)
    BuildDataset,
    /// Train the planar source networks and the supervised equirectangular baseline
    TrainSource {
        /// Models to train: a, b, equirect [default: all three]
        #[arg(long, value_delimiter = ',')]
        model: Vec<ModelKind>,
    },
    /// Cache tangent-plane targets for a source network (resumable)
    CacheTargets {
        /// Source networks: a, b [default: both]
        #[arg(long, value_delimiter = ',')]
        source: Vec<SourceTag>,
    },
    /// Distil the kernel transformer layer by layer
    TrainKtn {
        /// Source networks: a, b [default: both]
        #[arg(long, value_delimiter = ',')]
        source: Vec<SourceTag>,
    },
    /// Evaluate one method and merge it into the report
    Eval {
        /// ktn, projected or equirect [default: ktn]
        #[arg(long)]
        method: Option<Method>,
    },
    /// Apply transformers across source networks
    TransferEval,
    /// Run the finite-difference gradient suite
    Gradcheck {
        /// Random instances per operation
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Write report.csv / report.json and evaluate the acceptance gates
    Report {
        /// Exit with status 3 when any gate fails
        #[arg(long)]
        gate: bool,
    },
}

fn resolve(g: &Global, method: Option<Method>) -> Result<RunConfig, Error> {
    let mut c = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                c.$($field)+ = v;
            }
        };
    }
    set!(g.seed => seed);
    set!(g.workspace => paths.workspace);
    set!(g.mnist_dir => paths.mnist_dir);
    set!(g.epochs => train.epochs);
    set!(g.lr => train.lr);
    set!(g.lr_decay_epoch => train.lr_decay_epoch);
    set!(g.lr_decay_factor => train.lr_decay_factor);
    set!(g.batch_size => train.batch_size);
    set!(g.weight_decay => train.weight_decay);
    set!(g.init_std => train.init_std);
    set!(g.height => dataset.params.height);
    set!(g.fov_deg => dataset.params.fov_deg);
    set!(g.distill_images => distill.n_images);
    set!(g.distill_epochs => distill.recipe.epochs);
    set!(method => method);
    if let Some(s) = &g.strides {
        c.distill.strides = [s[0], s[1], s[2]];
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<u8, Error> {
    let method = match &cli.command {
        Command::Eval { method } => *method,
        _ => None,
    };
    let cfg = resolve(&cli.global, method)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    println!("# resolved configuration\n{}", cfg.to_toml());
    let ws = Workspace::new(&cfg.paths.workspace);
    match cli.command {
        Command::BuildDataset => {
            let s = pipeline::build_dataset(&cfg, &ws)?;
            println!(
                "dataset written to {} ({} files)",
                ws.data().display(),
                s.files.len()
            );
        }
        Command::TrainSource { model } => {
            let models = if model.is_empty() {
                ModelKind::ALL.to_vec()
            } else {
                model
            };
            for m in models {
                let s = match m {
                    ModelKind::A => pipeline::train_source_stage(&cfg, &ws, SourceTag::A)?,
                    ModelKind::B => pipeline::train_source_stage(&cfg, &ws, SourceTag::B)?,
                    ModelKind::Equirect => pipeline::train_equirect_stage(&cfg, &ws)?,
                };
                println!("{m:?}: hash {}", &pipeline::artifact_hash(&s)[..16]);
            }
        }
        Command::CacheTargets { source } => {
            for tag in tags(source) {
                let c = pipeline::cache_targets_stage(&cfg, &ws, tag)?;
                println!("source {tag}: targets complete in {}", c.root.display());
            }
        }
        Command::TrainKtn { source } => {
            for tag in tags(source) {
                let s = pipeline::train_ktn_stage(&cfg, &ws, tag)?;
                println!(
                    "source {tag}: transformer written ({} files)",
                    s.files.len()
                );
            }
        }
        Command::Eval { .. } => {
            let r = pipeline::eval_stage(&cfg, &ws, cfg.method)?;
            println!("{}: mean accuracy {:.4}", r.method, r.accuracy.mean);
            for b in &r.accuracy.bins {
                println!(
                    "  θ = {:>5.1}°  {:.4}  ({}/{})",
                    b.theta_deg, b.accuracy, b.correct, b.total
                );
            }
            if let Some(e) = r.rmse_conv3 {
                println!("  conv3 RMSE {e:.5}");
            }
            println!(
                "  {:.2} ms/image, {} parameters ({} overhead)",
                r.ms_per_image, r.params_total, r.params_overhead
            );
        }
        Command::TransferEval => {
            let t = pipeline::transfer_eval_stage(&cfg, &ws)?;
            println!(
                "KTN_A on A {:.4}, KTN_A on B {:.4}, KTN_B on B {:.4}, gap {:.4}",
                t.ktn_a_on_a,
                t.ktn_a_on_b,
                t.ktn_b_on_b,
                t.gap()
            );
        }
        Command::Gradcheck { instances } => {
            let suite = run_gradient_suite(instances.max(1), cfg.seed)?;
            let mut ok = true;
            for e in &suite {
                ok &= e.passes();
                println!(
                    "{} {:<26} instances {:>2}  coords {:>5}  max rel err {:.2e}",
                    if e.passes() { "PASS" } else { "FAIL" },
                    e.name,
                    e.instances,
                    e.checked,
                    e.max_rel_err
                );
            }
            println!("tolerance {SUITE_TOL:e}");
            if !ok {
                return Ok(EXIT_GATE);
            }
        }
        Command::Report { gate } => {
            let (report, gates) = pipeline::report_stage(&cfg, &ws)?;
            for m in &report.methods {
                println!(
                    "{:<10} mean accuracy {:.4}",
                    m.method.as_str(),
                    m.accuracy.mean
                );
            }
            for g in &gates {
                println!(
                    "{} {:<9} {}",
                    if g.passed { "PASS" } else { "FAIL" },
                    g.name,
                    g.detail
                );
            }
            println!("report written to {}", ws.reports().display());
            if gate && gates.iter().any(|g| !g.passed) {
                return Ok(EXIT_GATE);
            }
        }
    }
    Ok(0)
}

fn tags(v: Vec<SourceTag>) -> Vec<SourceTag> {
    if v.is_empty() {
        SourceTag::ALL.to_vec()
    } else {
        v
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::MissingStage { .. } => EXIT_MISSING,
                _ => EXIT_USAGE,
            })
        }
    }
}
