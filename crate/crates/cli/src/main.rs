use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyneter::backbone::{count_config_params, Variant};
use hyneter::gradcheck::{check_model, STEP};
use hyneter::harness::sweep::{run_sweep, Factor, SweepBase};
use hyneter::harness::{gen_synthetic, train, TaskConfig, TrainConfig};
use hyneter::io::{emit_csv, load_checkpoint, load_config};
use hyneter::{Hyneter, ModelConfig, Tensor};

/// Model-size ratio bands against hyneter-1.0.
const SIZE_BANDS: [(Variant, f64, f64); 2] = [(Variant::Plus, 1.4, 2.6), (Variant::Max, 3.0, 5.0)];

#[derive(Parser)]
#[command(name = "hyneter", version, about = "Hybrid CNN/Transformer backbone toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a model's configuration and parameter counts.
    Build(ModelArgs),
    /// Run a forward pass and audit the stage shapes.
    Forward(ForwardArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic size-stratified task.
    Train(TrainArgs),
    /// Sweep one factor and write a CSV table.
    Sweep(SweepArgs),
    /// Print parameter counts and size ratios of named variants.
    Params(ParamsArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Variant name (1.0, plus, max, micro)
    #[arg(long, default_value = "micro", conflicts_with = "config")]
    model: String,
    /// JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        match &self.config {
            Some(path) => load_config(path).with_context(|| format!("reading {}", path.display())),
            None => Ok((self.model.parse::<Variant>()?.config(), TrainConfig::default())),
        }
    }
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Load parameters from this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Input side length; defaults to the configured image size
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sampled parameters
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct HarnessArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic task size
    #[arg(long, default_value_t = 2000)]
    samples: usize,
}

impl HarnessArgs {
    fn resolve(&self) -> Result<(ModelConfig, TrainConfig, TaskConfig)> {
        let (model, mut train) = self.model.resolve()?;
        if let Some(v) = self.steps {
            train.steps = v;
        }
        if let Some(v) = self.batch {
            train.batch = v;
        }
        if let Some(v) = self.lr {
            train.learning_rate = v;
        }
        train.seed = self.model.seed;
        let task = TaskConfig {
            image_size: model.image_size,
            num_classes: model.num_classes,
            num_samples: self.samples,
            ..TaskConfig::default()
        };
        Ok((model, train, task))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    harness: HarnessArgs,
    /// Write the final parameters here
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    harness: HarnessArgs,
    /// CL, TB, NT or delta
    #[arg(long)]
    factor: Factor,
    /// Comma-separated factor values
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Comma-separated variant names; ratios are taken against the first
    #[arg(long, value_delimiter = ',', default_value = "1.0,plus,max")]
    variants: Vec<String>,
}

fn build(args: &ModelArgs) -> Result<bool> {
    let (cfg, _) = args.resolve()?;
    let model = Hyneter::build(cfg, args.seed)?;
    println!("{}", serde_json::to_string_pretty(model.config())?);
    println!("params {}", model.count_params());
    println!("backbone_params {}", model.count_backbone_params());
    Ok(true)
}

fn forward(args: &ForwardArgs) -> Result<bool> {
    let (cfg, _) = args.model.resolve()?;
    let mut model = Hyneter::build(cfg, args.model.seed)?;
    if let Some(path) = &args.checkpoint {
        load_checkpoint(&mut model, path).with_context(|| format!("loading {}", path.display()))?;
    }
    let cfg = model.config().clone();
    let size = args.size.unwrap_or(cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(args.model.seed);
    let input = Tensor::randn(&[args.batch, cfg.in_channels, size, size], 1.0, &mut rng);
    let (maps, logits) = model.infer(&input)?;
    let mut ok = true;
    for (i, (map, (&c, &g))) in maps.iter().zip(cfg.stage_channels().iter().zip(&cfg.stage_grids())).enumerate() {
        let expected = [args.batch, c, g, g];
        let pass = map.shape() == expected;
        ok &= pass;
        println!("stage{} {:?} expected {:?} {}", i + 1, map.shape(), expected, if pass { "ok" } else { "MISMATCH" });
    }
    let pass = logits.shape() == [args.batch, cfg.num_classes] && logits.is_finite();
    ok &= pass;
    println!("logits {:?} finite={} {}", logits.shape(), logits.is_finite(), if pass { "ok" } else { "MISMATCH" });
    Ok(ok)
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let model = Hyneter::build(args.model.parse::<Variant>()?.config(), args.seed)?;
    let cfg = model.config();
    let task = TaskConfig {
        image_size: cfg.image_size,
        num_classes: cfg.num_classes.min(hyneter::harness::data::SHAPES.len()),
        num_samples: 2,
        ..TaskConfig::default()
    };
    let data = gen_synthetic(&task, args.seed)?;
    let (images, labels) = data.batch(&[0, 1]);
    let report = check_model(&model, &images, &labels, args.samples, args.seed, STEP)?;
    let worst = report.worst().context("no parameters sampled")?;
    println!("probes {}", report.probes.len());
    println!("worst_param {}[{}]", worst.name, worst.index);
    println!("worst_rel_error {:.6e}", worst.rel_error());
    let pass = worst.rel_error() <= args.tol;
    println!("tolerance {:.1e} {}", args.tol, if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn run_train(args: &TrainArgs) -> Result<bool> {
    let (cfg, train_cfg, task_cfg) = args.harness.resolve()?;
    let seed = args.harness.model.seed;
    let task = gen_synthetic(&task_cfg, seed)?;
    let mut model = Hyneter::build(cfg, seed)?;
    let history = train(&mut model, &task, &train_cfg, args.checkpoint.as_deref())?;
    println!("step,loss,acc_total,acc_small,acc_medium,acc_large");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for e in &history.evals {
        let m = &e.metrics;
        println!(
            "{},{:.6},{:.6},{},{},{}",
            e.step,
            e.loss,
            m.total,
            opt(m.small),
            opt(m.medium),
            opt(m.large)
        );
    }
    Ok(true)
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    let (model, train, task) = args.harness.resolve()?;
    let base = SweepBase { model, task, train, seed: args.harness.model.seed };
    match run_sweep(args.factor, &args.values, &base) {
        Ok(records) => {
            emit_csv(&records, &args.out)?;
            println!("wrote {} rows to {}", records.len(), args.out.display());
            Ok(true)
        }
        Err(failure) => {
            emit_csv(&failure.records, &args.out)?;
            eprintln!("wrote {} completed rows to {}", failure.records.len(), args.out.display());
            Err(failure.into())
        }
    }
}

fn params(args: &ParamsArgs) -> Result<bool> {
    if args.variants.is_empty() {
        bail!("--variants needs at least one name");
    }
    let mut counts = Vec::new();
    for name in &args.variants {
        let v: Variant = name.parse()?;
        let (total, backbone) = count_config_params(&v.config())?;
        println!("count {} backbone={} total={}", v.name(), backbone, total);
        counts.push((v, backbone));
    }
    let (base, base_count) = counts[0];
    let mut ok = true;
    for &(v, c) in &counts[1..] {
        let ratio = c as f64 / base_count as f64;
        let band = SIZE_BANDS.iter().find(|b| base == Variant::V1 && b.0 == v);
        match band {
            Some(&(_, lo, hi)) => {
                let pass = (lo..=hi).contains(&ratio);
                ok &= pass;
                println!(
                    "ratio {}/{} {:.6} band=[{lo},{hi}] {}",
                    v.name(),
                    base.name(),
                    ratio,
                    if pass { "in" } else { "outside" }
                );
            }
            None => println!("ratio {}/{} {:.6}", v.name(), base.name(), ratio),
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(a) => build(a),
        Command::Forward(a) => forward(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => run_train(a),
        Command::Sweep(a) => sweep(a),
        Command::Params(a) => params(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
