use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use moab::data::{generate, load_csv, save_csv, GeneratorSpec, InteractionMode};
use moab::harness::{
    export_embeddings, run_ablation_suite, train_with, DataSource, Model, ModelKind, RunConfig,
};
use moab::Execution;

#[derive(Parser)]
#[command(name = "moab", version, about = "Outer-arithmetic multi-modal fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired image/gene dataset.
    GenData(GenArgs),
    /// Train and evaluate one model configuration.
    Train(TrainArgs),
    /// Train every fusion variant and both baselines under one config.
    Ablation(AblationArgs),
    /// Write penultimate activations of a saved model for a dataset.
    ExportEmbeddings(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Xor,
    Easy,
}

impl From<Mode> for InteractionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Xor => InteractionMode::XorCrossModal,
            Mode::Easy => InteractionMode::UnimodalEasy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Moab,
    Concat,
    Oaf,
    Dbf,
    StdAdd,
    ImgOnly,
    GeneOnly,
}

impl From<Fusion> for ModelKind {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Moab => ModelKind::Moab,
            Fusion::Concat => ModelKind::Concat,
            Fusion::Oaf => ModelKind::Oaf,
            Fusion::Dbf => ModelKind::Dbf,
            Fusion::StdAdd => ModelKind::StdAdd,
            Fusion::ImgOnly => ModelKind::ImgOnly,
            Fusion::GeneOnly => ModelKind::GeneOnly,
        }
    }
}

#[derive(Args)]
struct GeneratorArgs {
    /// Per-grade sample counts "II,III,IV"; defaults to 750 samples in the
    /// 396:408:654 ratio.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, value_enum, default_value = "xor")]
    mode: Mode,
    /// Gaussian noise on genes and pixels.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long = "data-seed", default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 1)]
    group_size: usize,
}

impl GeneratorArgs {
    fn spec(&self, seed: u64) -> Result<GeneratorSpec> {
        let class_counts = match &self.classes {
            Some(s) => parse_classes(s)?,
            None => GeneratorSpec::proportional_counts(750),
        };
        Ok(GeneratorSpec {
            class_counts,
            mode: self.mode.into(),
            noise: self.noise,
            seed,
            group_size: self.group_size,
        })
    }
}

fn parse_classes(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("--classes expects three integers, got {s:?}"))?;
    match parts.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => bail!("--classes expects three comma-separated counts, got {s:?}"),
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Seed for the generator (same as --data-seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; the image sidecar is written next to it with a .bin
    /// extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaseArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Learning rate; defaults to 0.005 for fusion and 0.001 for unimodal.
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay; defaults to 0.0005 for fusion and 0 for unimodal.
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    folds: usize,
    /// Dataset CSV written by gen-data; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Noisy copies of each held-out sample.
    #[arg(long, default_value_t = 9)]
    replicas: usize,
    #[arg(long, default_value_t = 0.05)]
    replica_noise: f64,
    #[arg(long, default_value_t = 64)]
    head_hidden: usize,
    /// Run folds and evaluation batches on one thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    generator: GeneratorArgs,
}

impl BaseArgs {
    fn config(&self, model: ModelKind, out: &Path) -> Result<RunConfig> {
        let data = match &self.data {
            Some(path) => DataSource::Csv(path.clone()),
            None => DataSource::Generate(self.generator.spec(self.generator.data_seed)?),
        };
        Ok(RunConfig {
            model,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            data,
            folds: self.folds,
            test_fraction: self.test_fraction,
            replicas: self.replicas,
            replica_noise: self.replica_noise,
            head_hidden: self.head_hidden,
            out_dir: Some(out.to_path_buf()),
        })
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "moab")]
    fusion: Fusion,
    #[command(flatten)]
    base: BaseArgs,
    /// Run directory for config, metrics, loss curve, embeddings and model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    base: BaseArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory containing model.json from a train run.
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let seed = args.seed.unwrap_or(args.generator.data_seed);
            let data = generate(&args.generator.spec(seed)?)?;
            save_csv(&data, &args.out)?;
            let c = data.class_counts();
            println!(
                "wrote {} samples ({} / {} / {}) to {}",
                data.len(),
                c[0],
                c[1],
                c[2],
                args.out.display()
            );
        }
        Command::Train(args) => {
            let config = args.base.config(args.fusion.into(), &args.out)?;
            let exec = args.base.execution();
            let result = train_with(&config, exec)?;
            result.write_artifacts(&args.out)?;
            let s = &result.summary;
            println!(
                "{}: f1_micro {:.3} ± {:.3}, f1_macro {:.3} ± {:.3}, f1_grade_iv {:.3} ± {:.3} ({} params, {:.1}s)",
                config.model,
                s.f1_micro.mean,
                s.f1_micro.std,
                s.f1_macro.mean,
                s.f1_macro.std,
                s.f1_grade_iv.mean,
                s.f1_grade_iv.std,
                result.param_count,
                result.wall_seconds
            );
        }
        Command::Ablation(args) => {
            let config = args.base.config(ModelKind::Moab, &args.out)?;
            let table = run_ablation_suite(&config, args.base.execution())?;
            std::fs::create_dir_all(&args.out)
                .with_context(|| format!("creating {}", args.out.display()))?;
            let write = |name: &str, text: String| {
                let path = args.out.join(name);
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
            };
            write("ablation.txt", table.to_text())?;
            write("ablation.csv", table.to_csv())?;
            write("ablation.json", table.to_json()?)?;
            write("config.json", config.resolved().to_json()?)?;
            print!("{}", table.to_text());
        }
        Command::ExportEmbeddings(args) => {
            let model = Model::load(&args.model_dir.join("model.json"))?;
            let data = load_csv(&args.data)?;
            let eval = export_embeddings(&model, &data, &args.out)?;
            println!(
                "wrote {} embeddings to {} (accuracy {:.3})",
                eval.embeddings.len(),
                args.out.display(),
                eval.report.accuracy
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_parse() {
        assert_eq!(parse_classes("1, 2,3").unwrap(), [1, 2, 3]);
        assert!(parse_classes("1,2").is_err());
        assert!(parse_classes("a,b,c").is_err());
    }

    #[test]
    fn fusion_names_match_model_kinds() {
        for f in Fusion::value_variants() {
            let name = f.to_possible_value().unwrap().get_name().to_string();
            assert_eq!(ModelKind::from(*f).cli_name(), name);
        }
    }

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
