use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use drpan_core::config::apply_override;
use drpan_core::data::{list_pairs, load_pair, tensor_to_image, write_png, MANIFEST};
use drpan_core::export::heatmap;
use drpan_core::trainer::CONFIG_SNAPSHOT;
use drpan_core::{evaluate, load_paired_dir, make_toy_dataset, train, PairedDataset, ToyTaskSpec, TrainConfig, TrainState};

/// Discriminative region proposal adversarial training for paired images.
#[derive(Parser, Debug)]
#[command(name = "drpan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `weights.lambda=1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Require reproducible execution. Execution is always sequential and
    /// seeded, so this only records the request.
    #[arg(long)]
    deterministic: bool,
    /// Directory for outputs and the effective-config snapshot.
    #[arg(long, default_value = "drpan-run")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic outline → filled-shape paired dataset.
    MakeToyData {
        #[command(flatten)]
        common: Common,
        /// Number of pairs.
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to continue from; the configuration may change variant
        /// flags and the epoch budget but not the architecture.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// PSNR and SSIM of a checkpoint on a paired directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of A|B pairs; defaults to `data.dir`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Translate the A halves of a file or directory of pairs.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score-map heatmap and proposed region for one pair.
    Propose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyData { common, count } => make_toy(&common, count),
        Command::Train { common, resume } => run_train(&common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            input,
        } => run_eval(&common, &checkpoint, input.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => run_infer(&common, &checkpoint, &input),
        Command::Propose {
            common,
            checkpoint,
            input,
        } => run_propose(&common, &checkpoint, &input),
    }
}

fn prepare_out_dir(common: &Common) -> Result<()> {
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    if common.deterministic {
        log::info!("deterministic mode: sequential, seeded execution");
    }
    Ok(())
}

fn write_snapshot(common: &Common, text: &str) -> Result<()> {
    let p = common.out_dir.join(CONFIG_SNAPSHOT);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn with_seed(common: &Common, base: &[String]) -> Vec<String> {
    let mut o = base.to_vec();
    o.extend(common.overrides.iter().cloned());
    if let Some(s) = common.seed {
        o.push(format!("seed={s}"));
    }
    o
}

/// Training configuration: the file if given, else the checkpoint's snapshot, else defaults.
fn train_config(common: &Common, checkpoint: Option<&Path>) -> Result<TrainConfig> {
    let overrides = with_seed(common, &[]);
    if common.config.is_none() {
        if let Some(ck) = checkpoint {
            let stored = drpan_core::Checkpoint::load(ck)?;
            return Ok(TrainConfig::from_toml_str(&stored.config_toml, &overrides)?);
        }
    }
    Ok(TrainConfig::load(common.config.as_deref(), &overrides)?)
}

fn make_toy(common: &Common, count: usize) -> Result<()> {
    prepare_out_dir(common)?;
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text)?;
    for o in with_seed(common, &[]) {
        apply_override(&mut table, &o)?;
    }
    let defaults = toml::Table::try_from(ToyTaskSpec::default())?;
    for (k, v) in defaults {
        table.entry(k).or_insert(v);
    }
    let spec: ToyTaskSpec = table.try_into()?;
    spec.validate()?;
    let paths = make_toy_dataset(&spec, count, &common.out_dir)?;
    write_snapshot(common, &toml::to_string(&spec)?)?;
    println!("wrote {} pairs to {}", paths.len(), common.out_dir.display());
    Ok(())
}

fn load_training_data(cfg: &TrainConfig) -> Result<(PairedDataset, Option<PairedDataset>)> {
    let Some(dir) = &cfg.data.dir else {
        bail!("no training data: set data.dir in the config or with --set data.dir=PATH");
    };
    let ds = load_paired_dir(dir, cfg.geometry.image_size)?;
    if cfg.data.holdout > 0 {
        let (tr, te) = ds.split_tail(cfg.data.holdout)?;
        Ok((tr, Some(te)))
    } else {
        Ok((ds, None))
    }
}

fn run_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    prepare_out_dir(common)?;
    let cfg = train_config(common, resume)?;
    write_snapshot(common, &cfg.to_toml_string())?;
    let (train_set, holdout) = load_training_data(&cfg)?;
    let state = match resume {
        Some(p) => Some(TrainState::load(p, Some(cfg.clone()))?),
        None => None,
    };
    let state = train(&cfg, &train_set, &common.out_dir, state)?;
    println!(
        "trained {} epochs ({} steps); checkpoints in {}",
        state.epoch,
        state.step,
        common.out_dir.join("checkpoints").display()
    );
    if let Some(test) = holdout {
        let report = evaluate(&state, &test)?;
        report.write_csv(&common.out_dir.join("holdout_results.csv"))?;
        println!("holdout psnr {:.4} ssim {:.4}", report.psnr.mean, report.ssim.mean);
    }
    Ok(())
}

fn run_eval(common: &Common, checkpoint: &Path, input: Option<&Path>) -> Result<()> {
    let cfg = train_config(common, Some(checkpoint))?;
    let state = TrainState::load(checkpoint, Some(cfg.clone()))?;
    prepare_out_dir(common)?;
    write_snapshot(common, &cfg.to_toml_string())?;
    let dir = input
        .map(Path::to_path_buf)
        .or(cfg.data.dir.clone())
        .context("no evaluation data: pass --input DIR or set data.dir")?;
    let ds = load_paired_dir(&dir, cfg.geometry.image_size)?;
    let report = evaluate(&state, &ds)?;
    let out = common.out_dir.join("results.csv");
    report.write_csv(&out)?;
    println!(
        "{} samples: psnr {:.4} dB, ssim {:.4} ({})",
        report.ids.len(),
        report.psnr.mean,
        report.ssim.mean,
        out.display()
    );
    Ok(())
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files = list_pairs(input)?;
        if files.is_empty() {
            bail!("no PNG pairs in {}", input.display());
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        bail!("{}: no such file or directory", input.display())
    }
}

fn run_infer(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let cfg = train_config(common, Some(checkpoint))?;
    let state = TrainState::load(checkpoint, Some(cfg.clone()))?;
    prepare_out_dir(common)?;
    write_snapshot(common, &cfg.to_toml_string())?;
    let image = cfg.geometry.image_size;
    let mut ids = String::new();
    for f in input_files(input)? {
        let pair = load_pair(&f, image)?;
        let x = pair.condition.reshape(&[1, 3, image, image])?;
        let fake = state.generate(&x)?.reshape(&[3, image, image])?;
        write_png(&tensor_to_image(&fake)?, &common.out_dir.join(format!("{}_fake.png", pair.id)))?;
        ids.push_str(&pair.id);
        ids.push('\n');
    }
    fs::write(common.out_dir.join(MANIFEST), ids)?;
    println!("wrote translations to {}", common.out_dir.display());
    Ok(())
}

fn run_propose(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let cfg = train_config(common, Some(checkpoint))?;
    let state = TrainState::load(checkpoint, Some(cfg.clone()))?;
    if !input.is_file() {
        bail!("{}: no such file", input.display());
    }
    prepare_out_dir(common)?;
    write_snapshot(common, &cfg.to_toml_string())?;
    let image = cfg.geometry.image_size;
    let pair = load_pair(input, image)?;
    let x = pair.condition.reshape(&[1, 3, image, image])?;
    let (fake, maps, regions) = state.propose(&x)?;
    let stem = &pair.id;
    write_png(&heatmap(&maps[0], Some(&regions[0])), &common.out_dir.join(format!("{stem}_heatmap.png")))?;
    write_png(
        &tensor_to_image(&fake.reshape(&[3, image, image])?)?,
        &common.out_dir.join(format!("{stem}_fake.png")),
    )?;
    println!("{}", regions[0].to_json());
    Ok(())
}
