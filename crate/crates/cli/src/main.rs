mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cra_core::arch::{Arch, ArchDescriptor, ResNetConfig, Variant};
use cra_core::cost::{ablation_table, count_flops, emit_table, FlopConvention, TableFormat};
use cra_core::data::{synth_dataset, SynthConfig};
use cra_core::model::{InitOptions, Model};
use cra_core::train::{gradcheck, GradcheckOptions, Trainer};
use cra_core::{Error, Tensor};

use run_config::RunConfig;

/// Worker threads for parallel kernels; defaults to the available parallelism.
const THREADS_ENV: &str = "CRA_NUM_THREADS";

#[derive(Parser)]
#[command(name = "cra", version, about = "Channel reassessment attention: cost analysis, gradient checks, training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => TableFormat::Text,
            Format::Csv => TableFormat::Csv,
            Format::Json => TableFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyModel {
    ToyCra,
    ToySe,
}

#[derive(clap::Args)]
struct ArchArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value = "base", value_parser = parse_variant)]
    variant: Variant,
    /// CRA pooled size `H,W`; defaults to 7,7 (ImageNet shapes) or 8,8 (CIFAR shapes).
    #[arg(long, value_parser = parse_hw)]
    hw: Option<(usize, usize)>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

impl ArchArgs {
    fn descriptor(&self) -> cra_core::Result<ArchDescriptor> {
        let mut c = ResNetConfig::new(self.arch, self.variant);
        if self.hw.is_some() {
            if self.variant != Variant::Cra {
                return Err(Error::InvalidConfig("--hw applies to the cra variant only".into()));
            }
            c.cra_target = self.hw;
        }
        c.input_size = self.input_size;
        if let Some(k) = self.classes {
            c.num_classes = k;
        }
        c.build()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP report for one architecture.
    Analyze {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long, default_value = "mac", value_parser = parse_convention)]
        convention: FlopConvention,
    },
    /// One CRA row per pooled size.
    Ablation {
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        /// Semicolon-separated `H,W` pairs.
        #[arg(long, default_value = "7,7;5,5;3,3;1,1", value_parser = parse_targets)]
        targets: Targets,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long, default_value = "mac", value_parser = parse_convention)]
        convention: FlopConvention,
    },
    /// Autodiff against finite differences on a toy network. Exits 1 on failure.
    Gradcheck {
        #[arg(long, value_enum, default_value = "toy-cra")]
        model: ToyModel,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Trains from a JSON run file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-site channel attentions of a checkpoint for one image.
    Attentions {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file holding `[C, H, W]` or `[N, C, H, W]`.
        #[arg(long)]
        input: PathBuf,
        /// Image to trace when the input holds a batch.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "csv")]
        out: TraceFormat,
    },
    /// Prints the architecture descriptor as JSON.
    ExportDesc {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct Targets(Vec<(usize, usize)>);

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_convention(s: &str) -> Result<FlopConvention, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or_else(|| format!("expected H,W, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad size {v:?} in {s:?}"));
    Ok((dim(h)?, dim(w)?))
}

fn parse_targets(s: &str) -> Result<Targets, String> {
    let targets = s.split(';').map(parse_hw).collect::<Result<Vec<_>, _>>()?;
    Ok(Targets(targets))
}

enum Failure {
    /// A check ran and did not pass.
    Check(String),
    /// Bad flags, config or inputs.
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DivergedTraining(_) | Error::NumericOverflow(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))
}

fn analyze(arch: &ArchArgs, format: Format, convention: FlopConvention) -> Result<String, Failure> {
    let report = count_flops(&arch.descriptor()?, None, convention)?;
    Ok(emit_table(&[report], format.into())?)
}

fn ablation(arch: Arch, targets: &Targets, format: Format, convention: FlopConvention) -> Result<String, Failure> {
    Ok(emit_table(&ablation_table(arch, &targets.0, convention)?, format.into())?)
}

fn run_gradcheck(model: ToyModel, tol: f64, seed: u64, samples: usize, width: usize, format: ReportFormat) -> Result<String, Failure> {
    let (variant, target) = match model {
        ToyModel::ToyCra => (Variant::Cra, Some((4, 4))),
        ToyModel::ToySe => (Variant::Se, None),
    };
    let classes = 4;
    let desc = cra_core::arch::build_toy(variant, classes, width, 8, target)?;
    let net = Model::<f32>::materialize(&desc, InitOptions { seed, zero_attention: false })?.cast::<f64>();
    let data = synth_dataset(&SynthConfig { side: 8, noise: 0.5, ..SynthConfig::new(4, classes, seed.wrapping_add(1)) })?;
    let input: Tensor<f64> = data.images.cast();
    let options = GradcheckOptions { tol, samples, seed, ..Default::default() };
    let report = gradcheck(&net, &input, &data.labels, &options)?;
    let text = match format {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Json => serde_json::to_string_pretty(&report).map_err(|e| Failure::Usage(e.to_string()))? + "\n",
    };
    if report.passed() {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure::Check(format!("gradient check failed (max rel err {:.3e}, tol {tol:e})", report.max_rel_error())))
    }
}

fn train(config: &Path) -> Result<String, Failure> {
    let text = fs::read_to_string(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let run = RunConfig::parse(&text)?;
    let (train_set, test_set) = run.data.load()?;
    let last = run.out_dir.join("last");
    let mut trainer = if run.resume && last.join("trainer.json").exists() {
        let mut t = Trainer::resume(&last)?;
        // only the epoch budget may change between invocations
        t.config.epochs = run.train.epochs;
        if t.config != run.train {
            return Err(Failure::Usage(format!("{} was trained with a different configuration", last.display())));
        }
        t
    } else {
        let model = Model::<f32>::materialize(&run.model.descriptor()?, InitOptions { seed: run.model.init_seed, zero_attention: run.model.zero_attention })?;
        Trainer::new(model, run.train.clone())?
    }
    .with_output(&run.out_dir);
    fs::create_dir_all(&run.out_dir)?;
    while trainer.next_epoch() < trainer.config.epochs {
        let r = trainer.run_epoch(&train_set, test_set.as_ref())?;
        let test = r.test_err.map(|e| format!(" test_err {e:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} lr {:.4e} loss {:.4} train_err {:.4}{test} ({:.1}s)", r.epoch, r.lr, r.train_loss, r.train_err, r.seconds);
    }
    Ok(trainer.history.to_csv())
}

fn attentions(checkpoint: &Path, input: &Path, index: usize, out: TraceFormat) -> Result<String, Failure> {
    let model = Model::load(checkpoint)?;
    let images: Tensor<f32> = Tensor::load(input)?;
    let image = match *images.shape() {
        [_, _, _] => images,
        [n, c, h, w] => {
            if index >= n {
                return Err(Failure::Usage(format!("--index {index} out of range for {n} images")));
            }
            let plane = c * h * w;
            Tensor::new(vec![c, h, w], images.data()[index * plane..(index + 1) * plane].to_vec())?
        }
        ref s => return Err(Failure::Usage(format!("input must be [C,H,W] or [N,C,H,W], got {s:?}"))),
    };
    let trace = model.attention_trace(&image)?;
    Ok(match out {
        TraceFormat::Csv => trace.to_csv(),
        TraceFormat::Json => trace.to_json() + "\n",
    })
}

fn export_desc(arch: &ArchArgs, output: Option<&Path>) -> Result<String, Failure> {
    let json = arch.descriptor()?.to_json() + "\n";
    match output {
        Some(path) => {
            fs::write(path, json)?;
            Ok(String::new())
        }
        None => Ok(json),
    }
}

fn dispatch(cli: Cli) -> Result<String, Failure> {
    configure_threads()?;
    match cli.command {
        Command::Analyze { arch, format, convention } => analyze(&arch, format, convention),
        Command::Ablation { arch, targets, format, convention } => ablation(arch, &targets, format, convention),
        Command::Gradcheck { model, tol, seed, samples, width, format } => run_gradcheck(model, tol, seed, samples, width, format),
        Command::Train { config } => train(&config),
        Command::Attentions { checkpoint, input, index, out } => attentions(&checkpoint, &input, index, out),
        Command::ExportDesc { arch, output } => export_desc(&arch, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
