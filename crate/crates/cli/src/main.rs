use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lhc_core::analysis::{dbt_spectrum_with, shape_distribution, DbtConstruction, MaskCorrelationSeries, Pairing};
use lhc_core::checkpoint::{decode_snapshot, encode_snapshot, load_model, save_model, MaskSnapshot};
use lhc_core::config::{RunConfig, KEYS};
use lhc_core::hw_sim::{simulate_model, Precision, SimStage};
use lhc_core::model::Model;
use lhc_core::objective::FlopsReport;
use lhc_core::shapes::catalog_dump;
use lhc_core::tensor::Tensor4;
use lhc_core::train::{evaluate, load_datasets, train, write_metrics_csv, TrainOptions};
use lhc_core::{LhcError, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "lhc", version, about = "Learnable heterogeneous convolution: training, analysis and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.lhc, metrics.csv and config.txt to --out.
    #[command(after_help = keys_help())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Keep every epoch's topology masks under <out>/snapshots.
        #[arg(long)]
        snapshot_masks: bool,
        /// Print one line per epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Top-1 accuracy of a checkpoint on the config's dataset.
    #[command(after_help = keys_help())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Shape histograms, mask correlation or convolution spectrum.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
    /// Run the MAC-array model over one input and report clocks and rows.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
        precision: PrecisionArg,
        /// Per-clock trace file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Standard and masked computation per layer.
    Flops {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Count FLOPs (2 per MAC) instead of MACs.
        #[arg(long)]
        flops: bool,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Print the rigid (or free) shape catalog.
    CatalogDump {
        #[arg(long)]
        free: bool,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Shape histogram of every topology-learning layer.
    Shapes {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this layer (required for CSV when several layers learn topology).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Correlation between mask snapshots written by `train --snapshot-masks`.
    Correlation {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_enum, default_value_t = PairingArg::Adjacent)]
        pairing: PairingArg,
    },
    /// Singular values of one layer's convolution operator.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1)]
        padding: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InputArgs {
    /// Input height.
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Input width.
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    Adjacent,
    Reference,
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (default, description):\n");
    for (k, v, d) in KEYS {
        let v = if v.is_empty() { "<none>" } else { v };
        s.push_str(&format!("  {k:<18} {v:<48} {d}\n"));
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // Output piped into `head` and similar.
        Err(LhcError::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lhc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LhcError) -> u8 {
    match e {
        LhcError::Divergence { .. } => EXIT_DIVERGENCE,
        LhcError::Config { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    RunConfig::parse(&text, &args.set)
}

fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            snapshot_masks,
            verbose,
        } => cmd_train(&load_config(&config)?, &out, snapshot_masks, verbose),
        Command::Eval {
            checkpoint,
            config,
            split,
        } => cmd_eval(&checkpoint, &load_config(&config)?, split),
        Command::Analyze { which } => cmd_analyze(which),
        Command::Simulate {
            checkpoint,
            input,
            batch,
            precision,
            trace,
            format,
        } => cmd_simulate(&checkpoint, &input, batch, precision, trace.as_deref(), format),
        Command::Flops {
            checkpoint,
            input,
            flops,
            format,
        } => cmd_flops(&checkpoint, &input, flops, format),
        Command::CatalogDump { free } => emit(&catalog_dump(free)),
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path, snapshot_masks: bool, verbose: bool) -> Result<()> {
    let (tr, te) = load_datasets(cfg)?;
    let opts = TrainOptions {
        snapshot_masks,
        verbose,
    };
    let outcome = train(cfg, &tr, &te, &opts)?;
    fs::create_dir_all(out)?;
    save_model(&outcome.model, &out.join("model.lhc"))?;
    write_metrics_csv(&outcome.metrics, fs::File::create(out.join("metrics.csv"))?)?;
    fs::write(out.join("config.txt"), cfg.to_string())?;
    if snapshot_masks {
        let dir = out.join("snapshots");
        fs::create_dir_all(&dir)?;
        for s in &outcome.snapshots {
            fs::write(dir.join(format!("epoch_{:04}.lhcs", s.epoch)), encode_snapshot(s))?;
        }
    }
    let last = outcome.final_metrics();
    let summary = serde_json::json!({
        "epochs": outcome.metrics.len(),
        "stopped_at": outcome.stopped_at,
        "density": last.map(|m| m.density),
        "accuracy": last.map(|m| m.accuracy),
        "checkpoint": out.join("model.lhc"),
    });
    emit(&serde_json::to_string_pretty(&summary)?)
}

fn check_compatible(model: &Model, channels: usize, classes: usize) -> Result<()> {
    if model.in_channels() != channels || model.classes() != classes {
        return Err(LhcError::InvalidArgument(format!(
            "checkpoint expects {} channels / {} classes, dataset has {channels} / {classes}",
            model.in_channels(),
            model.classes()
        )));
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, split: Split) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (tr, te) = load_datasets(cfg)?;
    let ds = match split {
        Split::Train => tr,
        Split::Test => te,
    };
    check_compatible(&model, ds.image_dims()[2], ds.classes())?;
    let acc = evaluate(&model, &ds, cfg.batch_size)?;
    let report = serde_json::json!({ "samples": ds.len(), "accuracy": acc });
    emit(&serde_json::to_string_pretty(&report)?)
}

fn cmd_analyze(which: Analysis) -> Result<()> {
    match which {
        Analysis::Shapes {
            checkpoint,
            layer,
            format,
        } => {
            let model = load_model(&checkpoint)?;
            let ids = match layer {
                Some(i) if model.lhc_indices().contains(&i) => vec![i],
                Some(i) => {
                    return Err(LhcError::InvalidArgument(format!(
                        "layer {i} does not learn topology (topology layers: {:?})",
                        model.lhc_indices()
                    )))
                }
                None => model.lhc_indices(),
            };
            let hists = ids
                .iter()
                .map(|&i| shape_distribution(&model.layers()[i].conv, i))
                .collect::<Result<Vec<_>>>()?;
            match (format, hists.as_slice()) {
                (Format::Json, _) => emit(&serde_json::to_string_pretty(&hists)?),
                (Format::Csv, [h]) => h.write_csv(io::stdout().lock()),
                (Format::Csv, _) => Err(LhcError::Config {
                    line: 0,
                    msg: "CSV shape output needs --layer".into(),
                }),
            }
        }
        Analysis::Correlation { snapshots, pairing } => {
            let snaps = read_snapshots(&snapshots)?;
            let pairing = match pairing {
                PairingArg::Adjacent => Pairing::Adjacent,
                PairingArg::Reference => Pairing::Reference,
            };
            let mut series = Vec::new();
            for l in 0..snaps[0].masks.len() {
                let per: Vec<_> = snaps.iter().map(|s| (s.epoch, &s.masks[l])).collect();
                series.push(MaskCorrelationSeries::compute(l, &per, pairing)?);
            }
            emit(&serde_json::to_string_pretty(&series)?)
        }
        Analysis::Spectrum {
            checkpoint,
            layer,
            input,
            padding,
            format,
        } => {
            let model = load_model(&checkpoint)?;
            let l = model.layers().get(layer).ok_or_else(|| {
                LhcError::InvalidArgument(format!("layer {layer} out of range ({} layers)", model.layers().len()))
            })?;
            let report = dbt_spectrum_with(
                &l.conv.masked_kernel()?,
                (input.height, input.width),
                padding,
                DbtConstruction::Direct,
                layer,
            )?;
            match format {
                Format::Json => emit(&report.to_json()?),
                Format::Csv => report.write_csv(io::stdout().lock()),
            }
        }
    }
}

fn read_snapshots(dir: &Path) -> Result<Vec<MaskSnapshot>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lhcs"))
        .collect();
    paths.sort();
    let mut snaps = Vec::with_capacity(paths.len());
    for p in &paths {
        snaps.push(decode_snapshot(&fs::read(p)?)?);
    }
    snaps.sort_by_key(|s| s.epoch);
    if snaps.len() < 2 {
        return Err(LhcError::InvalidArgument(format!(
            "need at least 2 mask snapshots in {}, found {}",
            dir.display(),
            snaps.len()
        )));
    }
    if snaps.iter().any(|s| s.masks.len() != snaps[0].masks.len()) {
        return Err(LhcError::InvalidArgument("snapshots disagree on layer count".into()));
    }
    Ok(snaps)
}

/// Deterministic smooth test image; clock counts do not depend on values.
fn probe_input(batch: usize, h: usize, w: usize, c: usize) -> Tensor4 {
    Tensor4::from_fn([batch, h, w, c], |[b, y, x, ch]| {
        0.5 + 0.5 * ((y * 3 + x * 5 + ch * 7 + b) as f64 * 0.37).sin()
    })
}

fn cmd_simulate(
    checkpoint: &Path,
    input: &InputArgs,
    batch: usize,
    precision: PrecisionArg,
    trace: Option<&Path>,
    format: Format,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let stages = model
        .layers()
        .iter()
        .map(|l| SimStage::from_layer(&l.conv, Some(l.bias.clone()), true))
        .collect::<Result<Vec<_>>>()?;
    let x = probe_input(batch, input.height, input.width, model.in_channels());
    let precision = match precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let mut trace_file = trace.map(|p| fs::File::create(p).map(io::BufWriter::new)).transpose()?;
    let (_, report) = simulate_model(
        &stages,
        &x,
        precision,
        trace_file.as_mut().map(|f| f as &mut dyn Write),
    )?;
    if let Some(mut f) = trace_file {
        f.flush()?;
    }
    match format {
        Format::Json => emit(&report.to_json()?),
        Format::Csv => report.write_csv(io::stdout().lock()),
    }
}

fn cmd_flops(checkpoint: &Path, input: &InputArgs, flops: bool, format: Format) -> Result<()> {
    let model = load_model(checkpoint)?;
    let (mut h, mut w) = (input.height, input.width);
    let mut geoms = Vec::new();
    let mut masks = Vec::new();
    for l in model.layers() {
        let g = l.conv.geometry(h, w)?;
        h = g.h_o;
        w = g.w_o;
        geoms.push(g);
        masks.push(l.conv.build_masks()?);
    }
    let rows: Vec<_> = model
        .layers()
        .iter()
        .zip(&geoms)
        .zip(&masks)
        .map(|((l, g), m)| (*g, m, l.conv.constraints()))
        .collect();
    let mut report = FlopsReport::compute(&rows)?;
    if flops {
        report = report.as_flops();
    }
    match format {
        Format::Json => emit(&report.to_json()?),
        Format::Csv => report.write_csv(io::stdout().lock()),
    }
}
