use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use segbias::audit::{run_audit, run_fig1_experiment, AuditConfig, Fig1Config, MetricSpace, SUMMARY_FILE};
use segbias::errorsim::{perturb, ErrorKind, ErrorModel};
use segbias::metrics::{dsc, read_group_values, roc_auc, subject_metrics, volume_bias, write_records_csv};
use segbias::phantom::{assign_group_resolutions, generate_cohort, write_cohort, CohortSpec, Group, PhantomSpec};
use segbias::resample::{resample_intensity, resample_labels_majority, ScaleFactor, Target};
use segbias::volume::{self, Dtype, Format};
use segbias::{Error, Result};

const DEFAULT_OUT_DIR: &str = "segbias-out";

/// Audit segmentation volumetry for resolution-induced bias.
#[derive(Parser)]
#[command(name = "segbias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-group phantom cohort with a manifest.
    Phantom(PhantomArgs),
    /// Resample an intensity volume (linear) or a label map (majority vote).
    Resample(ResampleArgs),
    /// Apply a boundary error model to a label map.
    SimulateError(SimulateArgs),
    /// Per-label DSC and volume bias of one prediction, as CSV on stdout.
    Metrics(MetricsArgs),
    /// ROC AUC of a volume column for separating one group from the other.
    Auc(AucArgs),
    /// Score a prediction source against a cohort manifest.
    Audit(AuditArgs),
    /// Simulated random, systematic and downsampling errors on a phantom cohort.
    Fig1(Fig1Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeKind {
    Ribbon,
    Ellipsoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Nifti,
    Simplevol,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Nifti => Format::Nifti,
            FormatArg::Simplevol => Format::SimpleVol,
        }
    }
}

#[derive(clap::Args)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "ribbon")]
    shape: ShapeKind,
    /// PhantomSpec JSON; overrides --shape.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n_per_group: usize,
    /// Mean structure scale of group H relative to group L.
    #[arg(long, default_value_t = 1.3)]
    effect_ratio: f64,
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    /// Resample groups H and L to these voxel sizes (mm), e.g. `1.0,2.0`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    resolution_pair: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "simplevol")]
    format: FormatArg,
    #[arg(long)]
    no_images: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "SEGBIAS_OUT_DIR", default_value = DEFAULT_OUT_DIR)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ResampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map.
    #[arg(long)]
    labels: bool,
    /// Isotropic target voxel size in mm.
    #[arg(long, conflicts_with = "factor", required_unless_present = "factor")]
    target_mm: Option<f64>,
    /// Isotropic scale factor (output dims = round(dims × factor)).
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long, value_enum, default_value = "float32")]
    dtype: DtypeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::Uint8 => Dtype::U8,
            DtypeArg::Int16 => Dtype::I16,
            DtypeArg::Int32 => Dtype::I32,
            DtypeArg::Float32 => Dtype::F32,
            DtypeArg::Float64 => Dtype::F64,
        }
    }
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// random-balanced | systematic-dilate | systematic-erode
    #[arg(long)]
    kind: ErrorKind,
    #[arg(long)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subject id in the CSV written to stdout; defaults to the input file stem.
    #[arg(long)]
    subject_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Native,
    ResampleToReference,
}

#[derive(clap::Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "label", default_value = "1", value_delimiter = ',')]
    labels: Vec<u32>,
    #[arg(long, default_value = "subject")]
    subject_id: String,
    #[arg(long, default_value = "H")]
    group: Group,
    #[arg(long, value_enum, default_value = "resample-to-reference")]
    metric_space: SpaceArg,
}

#[derive(clap::Args)]
struct AucArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    positive_group: Group,
    /// Value column; defaults to `volume`, else `volume_pred_mm3`.
    #[arg(long)]
    column: Option<String>,
    /// Only rows whose `label` column equals this id.
    #[arg(long)]
    label: Option<u32>,
}

#[derive(clap::Args)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the config's `output_dir`.
    #[arg(long, env = "SEGBIAS_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Fig1Args {
    /// Fig1Config JSON; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_per_group: Option<usize>,
    #[arg(long, env = "SEGBIAS_OUT_DIR", default_value = DEFAULT_OUT_DIR)]
    out: PathBuf,
}

fn output_format(path: &Path) -> Result<Format> {
    Format::from_path(path).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{}: expected .nii, .nii.gz or .json",
            path.display()
        ))
    })
}

fn phantom(args: PhantomArgs) -> Result<()> {
    let spec = match (&args.spec, args.shape) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        (None, ShapeKind::Ribbon) => PhantomSpec::default_ribbon(),
        (None, ShapeKind::Ellipsoid) => PhantomSpec::default_ellipsoid(),
    };
    let cspec = CohortSpec {
        n_per_group: args.n_per_group,
        effect_ratio: args.effect_ratio,
        jitter_sigma: args.jitter,
        seed: args.seed,
        ..Default::default()
    };
    let mut cohort = generate_cohort(&spec, &cspec)?;
    if let Some(pair) = &args.resolution_pair {
        cohort = assign_group_resolutions(&cohort, (pair[0], pair[1]))?;
    }
    if args.no_images {
        for s in &mut cohort.subjects {
            s.image = None;
        }
    }
    let manifest = write_cohort(&cohort, &args.out, args.format.into())?;
    println!("{}", manifest.display());
    Ok(())
}

fn resample(args: ResampleArgs) -> Result<()> {
    let format = output_format(&args.out)?;
    let target = |size: &[f64]| -> Result<Target> {
        let factor = match (args.target_mm, args.factor) {
            (Some(mm), _) => ScaleFactor::between(size, &vec![mm; size.len()])?,
            (None, Some(f)) => ScaleFactor::isotropic(f, size.len())?,
            (None, None) => unreachable!("clap requires one of them"),
        };
        Ok(Target::Factor(factor))
    };
    if args.labels {
        let map = volume::load_labels(&args.input)?;
        let out = resample_labels_majority(&map, target(map.geometry().voxel_size())?)?;
        volume::save_labels(&out, &args.out, format)
    } else {
        let grid = volume::load_intensity(&args.input)?;
        let out = resample_intensity(&grid, target(grid.geometry().voxel_size())?)?;
        volume::save_intensity(&out, &args.out, format, args.dtype.into())
    }
}

fn simulate_error(args: SimulateArgs) -> Result<()> {
    let format = output_format(&args.out)?;
    let map = volume::load_labels(&args.input)?;
    let model = ErrorModel::new(args.kind, args.strength, args.seed)?;
    let pred = perturb(&map, &model)?;
    volume::save_labels(&pred, &args.out, format)?;
    let subject = args.subject_id.unwrap_or_else(|| {
        let name = args.input.file_name().and_then(|n| n.to_str()).unwrap_or("subject");
        name.split('.').next().unwrap_or(name).to_string()
    });
    println!("subject_id,label,kind,p,dsc,volume_bias");
    for label in map.foreground_labels() {
        println!(
            "{subject},{label},{},{},{},{}",
            args.kind,
            args.strength,
            dsc(&pred, &map, label)?,
            volume_bias(&pred, &map, label)?
        );
    }
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let pred = volume::load_labels(&args.pred)?;
    let reference = volume::load_labels(&args.reference)?;
    let space = match args.metric_space {
        SpaceArg::Native => MetricSpace::Native,
        SpaceArg::ResampleToReference => MetricSpace::ResampleToReference,
    };
    let on_ref = if pred.geometry().same_as(reference.geometry()) || space == MetricSpace::Native {
        pred.clone()
    } else {
        resample_labels_majority(&pred, reference.geometry().clone())?
    };
    let records = subject_metrics(&args.subject_id, args.group, &on_ref, &pred, &reference, &args.labels)?;
    write_records_csv(&records, std::io::stdout().lock())
}

fn auc(args: AucArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.csv).map_err(|e| Error::io(&args.csv, e))?;
    let column = match args.column {
        Some(c) => c,
        None => {
            let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').map(str::trim).collect();
            ["volume", "volume_pred_mm3"]
                .into_iter()
                .find(|c| header.contains(c))
                .unwrap_or("volume")
                .to_string()
        }
    };
    let values = read_group_values(text.as_bytes(), &column, args.positive_group, args.label)?;
    println!("{:?}", roc_auc(&values)?);
    Ok(())
}

fn audit(args: AuditArgs) -> Result<()> {
    let mut config = AuditConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let report = run_audit(&config)?;
    report.write(&out)?;
    println!("{}", out.join(SUMMARY_FILE).display());
    Ok(())
}

fn fig1(args: Fig1Args) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => Fig1Config::from_file(path)?,
        None => Fig1Config::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_per_group {
        config.n_per_group = n;
    }
    let report = run_fig1_experiment(&config)?;
    report.write(&args.out)?;
    for m in &report.summary.models {
        println!(
            "{}\tdsc {:.4}\tmedian bias {:+.4}",
            m.model, m.dsc_mean, m.median_volume_bias
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Resample(a) => resample(a),
        Command::SimulateError(a) => simulate_error(a),
        Command::Metrics(a) => metrics(a),
        Command::Auc(a) => auc(a),
        Command::Audit(a) => audit(a),
        Command::Fig1(a) => fig1(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
