use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tasd_cli::artifacts::mode_name;
use tasd_cli::commands::ABLATION_HEADER;
use tasd_cli::commands;
use tasd_cli::{CliError, ExperimentConfig, Layout};
use tasd_core::tta::AblationMode;

#[derive(Parser)]
#[command(name = "tasd", version, about = "Shape-dictionary segmentation with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file (dotted sections); unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set dict.k=32`. Applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; falls back to $TASD_OUTPUT_ROOT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and unseen-domain benchmark.
    SynthData(Common),
    /// Learn the shape dictionary and the training-mask codes.
    LearnDict(Common),
    /// Train the segmentation network on the source domain.
    Train(Common),
    /// Evaluate on the unseen domains, optionally adapting online.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "none", value_parser = parse_mode)]
        tta: AblationMode,
    },
    /// Learn, train and evaluate once per dictionary size.
    AblateK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "16,32,48,64")]
        ks: Vec<usize>,
    },
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse()
}

fn setup(common: &Common) -> Result<(Layout, ExperimentConfig), CliError> {
    let cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides)?;
    Ok((Layout::from_env(common.out.clone()), cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData(common) => {
            let (layout, cfg) = setup(&common)?;
            let s = commands::synth_data(&layout, &cfg)?;
            println!("benchmark: {} train, {} val", s.train, s.val);
            for (name, n) in s.unseen {
                println!("  {name}: {n} test");
            }
        }
        Command::LearnDict(common) => {
            let (layout, cfg) = setup(&common)?;
            let r = commands::learn_dict(&layout, &cfg)?;
            println!(
                "dictionary K={} lambda={:.6}: reconstruction dice {:.4} (min {:.4}), {:.1} nonzeros per code",
                r.k, r.lambda, r.dice_mean, r.dice_min, r.mean_nonzeros
            );
        }
        Command::Train(common) => {
            let (layout, cfg) = setup(&common)?;
            let r = commands::train_model(&layout, &cfg, |e, l| eprintln!("epoch {e:>3}  loss {l:.6}"))?;
            println!("trained {} steps; final epoch loss {:.6}", r.steps, r.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Evaluate { common, tta } => {
            let (layout, cfg) = setup(&common)?;
            let out = commands::evaluate(&layout, &cfg, tta)?;
            println!("source val dice {:.4}", out.source_val.dice_mean);
            print!("{}", tasd_cli::artifacts::summary_csv(&out.report));
            println!("mode {}: {} steps, {} skipped -> {}", mode_name(tta), out.steps_taken, out.skipped, out.dir.display());
        }
        Command::AblateK { common, ks } => {
            let (layout, cfg) = setup(&common)?;
            let rows = commands::ablate_k(&layout, &cfg, &ks, |k, e, l| eprintln!("K={k} epoch {e:>3}  loss {l:.6}"))?;
            println!("{ABLATION_HEADER}");
            for r in rows {
                println!("{},{:.4},{:.4},{:.4},{:.4}", r.k, r.recon_dice, r.source_val_dice, r.dice_no_tta, r.dice_tta);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
