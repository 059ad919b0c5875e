use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qsattn::ablation::{query_variants, run_ablation, strategy_variants, AblationPlan};
use qsattn::attn::{select_queries, selection_dump, SelectionResult};
use qsattn::config::TrainConfig;
use qsattn::data::{image_files, load_image, save_png, Preprocess, UnpairedData};
use qsattn::heatmap::render_selection;
use qsattn::nets::TAP_COUNT;
use qsattn::train::{train, Trainer};
use qsattn::{QsError, Result};
use qsattn_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Query-selected attention for unpaired image translation.
#[derive(Parser, Debug)]
#[command(name = "qs-cli", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset root (or synthetic data) and write checkpoints and logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for config, log and checkpoints.
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Translate every image of a folder with a trained generator.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long, alias = "out-dir")]
        output_dir: PathBuf,
    },
    /// Overlay the selected query locations of one image.
    Heatmap {
        #[command(flatten)]
        sel: SelectionArgs,
        /// Output PNG.
        #[arg(long, default_value = "heatmap.png")]
        out: PathBuf,
    },
    /// Print the selected query locations of one image as CSV.
    InspectSelection {
        #[command(flatten)]
        sel: SelectionArgs,
    },
    /// Run the strategy/routing ablation and the query-count sweep.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training steps per configuration.
        #[arg(long, default_value_t = 200)]
        steps: u64,
        /// Synthetic test images per configuration.
        #[arg(long, default_value_t = 20)]
        test_images: usize,
        /// Which configurations to run.
        #[arg(long, value_parser = ["all", "strategies", "queries"], default_value = "all")]
        only: String,
        /// Directory for the table and per-configuration step logs.
        #[arg(long, default_value = "runs/ablate")]
        out_dir: PathBuf,
    },
}

/// Settings layered as defaults, then `--config`, then flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// global | local | local-global | informer | random
    #[arg(long)]
    strategy: Option<String>,
    /// cross | self | none
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    n_queries: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// lsgan | log
    #[arg(long)]
    gan_mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    size: Option<String>,
    /// Any other setting, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        // the window goes first so `--strategy local` picks it up
        let flags = [
            ("window", &self.window),
            ("strategy", &self.strategy),
            ("routing", &self.routing),
            ("n_queries", &self.n_queries),
            ("tau", &self.tau),
            ("gan_mode", &self.gan_mode),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("size", &self.size),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| QsError::config(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct SelectionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Encoder tap, 0 (pixels) to 4 (deepest).
    #[arg(long, default_value_t = TAP_COUNT - 1)]
    layer: usize,
    /// Number of locations; defaults to the checkpoint's setting.
    #[arg(long)]
    n_queries: Option<String>,
    /// Selection criterion; defaults to the checkpoint's setting.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    window: Option<String>,
}

fn echo(cfg: &TrainConfig) {
    println!("# resolved config");
    print!("{cfg}");
    println!("# end config");
}

fn select_for_image(args: &SelectionArgs) -> Result<(Tensor<f32>, SelectionResult<f32>, usize)> {
    let trainer = Trainer::<f32>::load(&args.checkpoint)?;
    let mut cfg = trainer.config().clone();
    let overrides = ConfigArgs {
        strategy: args.strategy.clone(),
        n_queries: args.n_queries.clone(),
        window: args.window.clone(),
        ..ConfigArgs::default()
    };
    overrides.apply(&mut cfg)?;
    echo(&cfg);
    if args.layer >= TAP_COUNT {
        return Err(QsError::config(format!("layer {} is not in 0..{TAP_COUNT}", args.layer)));
    }
    let image = load_image(&args.image, cfg.size, Preprocess::Center, &mut ChaCha8Rng::seed_from_u64(0))?;
    let feats = trainer.features(&image)?;
    let f = &feats[args.layer];
    let sel = select_queries(f, &cfg.selection()?, cfg.n_queries, &mut trainer.step_rng(0))?;
    Ok((image, sel, f.width()))
}

fn translate_dir(checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let trainer = Trainer::<f32>::load(checkpoint)?;
    let cfg = trainer.config();
    echo(cfg);
    fs::create_dir_all(output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut written = 0;
    for path in image_files(input)? {
        let x = match load_image(&path, cfg.size, Preprocess::Center, &mut rng) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let name = Path::new(path.file_name().expect("listed file")).with_extension("png");
        save_png(&trainer.translate(&x)?, &output.join(name))?;
        written += 1;
    }
    println!("translated {written} images into {}", output.display());
    Ok(written)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            echo(&cfg);
            let data = match &cfg.data_root {
                Some(root) => UnpairedData::from_root(root, cfg.size)?,
                None => UnpairedData::from_synth(&qsattn::data::synth_pair(cfg.seed, cfg.synth_images, cfg.size)?)?,
            };
            let trainer = train(cfg, &data, &out_dir)?;
            println!("trained {} steps; outputs in {}", trainer.steps_done(), out_dir.display());
        }
        Command::Translate { checkpoint, input_dir, output_dir } => {
            translate_dir(&checkpoint, &input_dir, &output_dir)?;
        }
        Command::Heatmap { sel, out } => {
            let (image, selection, side) = select_for_image(&sel)?;
            let img = render_selection(&image, &selection, side)?;
            img.save(&out).map_err(|source| QsError::Image { path: out.display().to_string(), source })?;
            println!("wrote {}", out.display());
        }
        Command::InspectSelection { sel } => {
            let (_, selection, side) = select_for_image(&sel)?;
            println!("{}", selection_dump(&selection, side).trim_end());
        }
        Command::Ablate { cfg, steps, test_images, only, out_dir } => {
            let base = cfg.resolve()?;
            echo(&base);
            let mut variants = Vec::new();
            if only != "queries" {
                variants.extend(strategy_variants(base.window, base.n_queries));
            }
            if only != "strategies" {
                variants.extend(query_variants());
            }
            let plan = AblationPlan { base, steps, test_images };
            let (_, table) = run_ablation(&plan, &variants, Some(&out_dir.join("logs")))?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("ablation.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ QsError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
