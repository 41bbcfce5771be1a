//! `bimlp`: selftest, complexity analysis, two-step training and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimlp::arch::{BiMlp, DownsampleKind, ModelSpec};
use bimlp::complexity::{analyze, compare, plot_data_csv, ComplexityReport, PlotPoint};
use bimlp::train::checkpoint::{self, Manifest};
use bimlp::train::{
    evaluate, train_stage, write_atomic, Dataset, DatasetSource, EpochLog, Init, Normalization, Stage, TrainConfig,
    TrainState,
};
use bimlp::verify::{render, selftest, Fault, SelftestConfig};
use bimlp::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bimlp", version, about = "Binarized vision-MLP engine")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oracle suites; exit 1 on any failure.
    Selftest {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Smaller case counts and no whole-model gradient check.
        #[arg(long)]
        quick: bool,
    },
    /// FLOPs / BOPs / OPs report for a model configuration.
    Analyze(AnalyzeArgs),
    /// Train one stage: 0 full precision, 1 binary activations, 2 fully binary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Built-in configuration.
    #[arg(long, value_parser = ["bimlp-s", "bimlp-m", "tiny"], conflicts_with = "config")]
    preset: Option<String>,
    /// Model configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DownsampleArg {
    Pool,
    Conv3x3,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input extent as HxW.
    #[arg(long, default_value = "224x224", value_parser = parse_extent)]
    input: (usize, usize),
    /// Override the downsampling layers.
    #[arg(long, value_enum)]
    downsample: Option<DownsampleArg>,
    /// Baseline for a delta table: a config path, a preset name, or
    /// `default` (this model without `--downsample`).
    #[arg(long)]
    compare: Option<String>,
    /// Also write `plot-data.csv` (model, OPs).
    #[arg(long)]
    emit_plot_data: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (IDX or CIFAR-10 binary).
    #[arg(long, env = "BIMLP_DATA_DIR")]
    data: PathBuf,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    stage: u8,
    #[arg(long, default_value_t = 10)]
    epochs: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Distillation weight (default 0.9; full-precision runs use 0).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Full-precision teacher checkpoint for distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Stage-1 checkpoint to initialise stage 2 from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Permit stage 2 without `--init`.
    #[arg(long)]
    allow_cold_start: bool,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Also write `plot-data.csv` (model, OPs, top-1).
    #[arg(long)]
    emit_plot_data: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Process outcome; maps onto the documented exit codes.
enum Failure {
    Verification(String),
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => Failure::Io(e.to_string()),
            Error::NonFinite { .. } => Failure::Verification(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn parse_extent(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad extent `{v}` in `{s}`"));
    match (parse(h)?, parse(w)?) {
        (0, _) | (_, 0) => Err(format!("extents must be ≥ 1, got `{s}`")),
        hw => Ok(hw),
    }
}

fn load_spec(m: &ModelArgs, default: &str) -> CliResult<ModelSpec> {
    match (&m.preset, &m.config) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            ModelSpec::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
        }
        (Some(p), None) => Ok(ModelSpec::preset(p)?),
        (None, None) => Ok(ModelSpec::preset(default)?),
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

fn cmd_selftest(seed: u64, quick: bool) -> CliResult {
    let fault = match std::env::var("BIMLP_SELFTEST_FAULT") {
        Ok(v) if !v.is_empty() => Some(v.parse::<Fault>()?),
        _ => None,
    };
    let mut cfg = SelftestConfig {
        seed,
        fault,
        ..SelftestConfig::default()
    };
    if quick {
        cfg.kernel_cases = 100;
        cfg.output_set_cases = 1000;
        cfg.ste_cases = 100;
        cfg.shortcut_max_c = 16;
        cfg.model_check = false;
    }
    let reports = selftest(&cfg)?;
    print!("{}", render(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} suites failed", reports.len())));
    }
    println!("all {} suites passed", reports.len());
    Ok(())
}

fn with_downsample(mut spec: ModelSpec, d: Option<DownsampleArg>) -> ModelSpec {
    match d {
        Some(DownsampleArg::Conv3x3) if spec.downsample != DownsampleKind::Conv3x3 => {
            spec.downsample = DownsampleKind::Conv3x3;
            spec.name.push_str("+conv3x3");
        }
        Some(DownsampleArg::Pool) if spec.downsample != DownsampleKind::Pool => {
            spec.downsample = DownsampleKind::Pool;
            spec.name.push_str("+pool");
        }
        _ => {}
    }
    spec
}

fn report_stem(r: &ComplexityReport) -> String {
    format!("analyze-{}-{}x{}", r.model.replace('+', "-"), r.input.0, r.input.1)
}

fn cmd_analyze(a: &AnalyzeArgs) -> CliResult {
    let base = load_spec(&a.model, "bimlp-s")?;
    let spec = with_downsample(base.clone(), a.downsample);
    let (h, w) = a.input;
    let report = analyze(&spec, h, w)?;
    ensure_dir(&a.out)?;
    let stem = report_stem(&report);
    print!("{}", report.to_text());
    let txt = write_out(&a.out, &format!("{stem}.txt"), &report.to_text())?;
    write_out(&a.out, &format!("{stem}.csv"), &report.to_csv())?;
    eprintln!("wrote {} (+ .csv)", txt.display());
    if let Some(other) = &a.compare {
        let baseline = if other == "default" {
            base
        } else if ModelSpec::preset(other).is_ok() {
            ModelSpec::preset(other)?
        } else {
            load_spec(
                &ModelArgs {
                    preset: None,
                    config: Some(PathBuf::from(other)),
                },
                "",
            )?
        };
        let base_report = analyze(&baseline, h, w)?;
        let cmp = compare(&base_report, &report);
        println!();
        print!("{}", cmp.to_text());
        write_out(&a.out, "compare.txt", &cmp.to_text())?;
        write_out(&a.out, "compare.csv", &cmp.to_csv())?;
    }
    if a.emit_plot_data {
        let pts = [PlotPoint {
            model: report.model.clone(),
            ops: report.ops,
            top1: None,
        }];
        write_out(&a.out, "plot-data.csv", &plot_data_csv(&pts))?;
    }
    Ok(())
}

fn load_data(d: &DataArgs, norm: Option<&Normalization>) -> CliResult<(Dataset, Dataset, Normalization)> {
    let mut src = DatasetSource::detect(&d.data)?;
    src.train_limit = d.train_limit;
    src.test_limit = d.test_limit;
    Ok(src.load_with(norm)?)
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> CliResult {
    if data.channels != spec.in_channels {
        return Err(Failure::Usage(format!(
            "model expects {} input channels, dataset has {}",
            spec.in_channels, data.channels
        )));
    }
    if let Some(&l) = data.labels.iter().max() {
        if l as usize >= spec.num_classes {
            return Err(Failure::Usage(format!(
                "dataset label {l} exceeds the model's {} classes",
                spec.num_classes
            )));
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(Manifest, TrainState<f32>)> {
    Ok(checkpoint::load::<f32>(path)?)
}

fn log_text(state: &TrainState<f32>, data_dir: &Path) -> String {
    let c = &state.config;
    let mut s = String::new();
    let _ = writeln!(s, "# model={} stage={} init={:?}", state.model.spec().name, state.stage.index(), state.init);
    let _ = writeln!(s, "# data={}", data_dir.display());
    let _ = writeln!(
        s,
        "# seed={} epochs={} lr={} batch_size={} alpha={} temperature={} weight_decay={} latent_clamp={} ste={:?} bn_recalibration={}",
        c.seed,
        c.epochs,
        c.lr,
        c.batch_size,
        c.kd.alpha,
        c.kd.temperature,
        c.optimizer.weight_decay,
        c.optimizer.latent_clamp.map_or("none".to_string(), |v| v.to_string()),
        c.ste,
        c.bn_recalibration
    );
    let _ = writeln!(s, "{}", EpochLog::CSV_HEADER);
    for l in &state.history {
        let _ = writeln!(s, "{}", l.csv_line());
    }
    s
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let stage = Stage::from_index(a.stage)?;
    let mut state = if let Some(path) = &a.resume {
        let (_, st) = load_model(path)?;
        if st.stage != stage {
            return Err(Failure::Usage(format!(
                "{} holds a stage-{} run, not stage {}",
                path.display(),
                st.stage.index(),
                stage.index()
            )));
        }
        st
    } else {
        let mut cfg = TrainConfig::for_stage(stage, a.seed);
        cfg.epochs = a.epochs;
        cfg.lr = a.lr;
        cfg.batch_size = a.batch_size;
        cfg.kd.temperature = a.temperature;
        if let Some(alpha) = a.alpha {
            cfg.kd.alpha = alpha;
        }
        let (model, init, norm) = match (stage, &a.init) {
            (Stage::Stage2FullyBinary, Some(p)) => {
                let (_, src) = load_model(p)?;
                if src.stage != Stage::Stage1BinaryActivations {
                    return Err(Failure::Usage(format!("{} is not a stage-1 checkpoint", p.display())));
                }
                (src.model, Init::FromStage1, src.normalization)
            }
            (Stage::Stage2FullyBinary, None) if a.allow_cold_start => {
                (BiMlp::new(&load_spec(&a.model, "tiny")?, a.seed)?, Init::ColdStart, None)
            }
            (Stage::Stage2FullyBinary, None) => {
                return Err(Failure::Usage(
                    "stage 2 needs --init <stage-1 checkpoint> (or --allow-cold-start)".into(),
                ))
            }
            (_, Some(_)) => return Err(Failure::Usage("--init only applies to stage 2".into())),
            (_, None) => (BiMlp::new(&load_spec(&a.model, "tiny")?, a.seed)?, Init::Scratch, None),
        };
        let mut st = TrainState::new(model, stage, init, cfg)?;
        st.normalization = norm;
        st
    };
    let (train, test, norm) = load_data(&a.data, state.normalization.as_ref())?;
    state.normalization = Some(norm);
    check_data(state.model.spec(), &train)?;
    let mut teacher = match (&a.teacher, state.config.kd.alpha > 0.0) {
        (Some(p), _) => {
            let (_, t) = load_model(p)?;
            if t.stage != Stage::FullPrecision {
                return Err(Failure::Usage(format!("teacher {} is not a full-precision checkpoint", p.display())));
            }
            Some(t.model)
        }
        (None, true) => {
            return Err(Failure::Usage(
                "distillation (alpha > 0) needs --teacher <full-precision checkpoint>; pass --alpha 0 for plain cross-entropy"
                    .into(),
            ))
        }
        (None, false) => None,
    };
    ensure_dir(&a.out)?;
    let s = stage.index();
    let log_name = format!("stage{s}.log.csv");
    let preamble = log_text(&state, &a.data.data);
    print!("{preamble}");
    write_out(&a.out, &log_name, &preamble)?;
    let out = a.out.clone();
    let data_dir = a.data.data.clone();
    let mut failure = None;
    let result = train_stage(&mut state, &train, &test, teacher.as_mut(), |st, log| {
        println!("{}", log.csv_line());
        let mut step = || -> CliResult {
            let ckpt = out.join(format!("stage{s}-epoch{:03}.ckpt", st.epoch));
            checkpoint::save(st, &ckpt, None)?;
            write_out(&out, &log_name, &log_text(st, &data_dir))?;
            Ok(())
        };
        step().map_err(|f| {
            failure = Some(f);
            Error::Checkpoint("aborted".into())
        })
    });
    if let Some(f) = failure {
        return Err(f);
    }
    result?;
    let fin = a.out.join(format!("stage{s}-final.ckpt"));
    checkpoint::save(&mut state, &fin, Some("final"))?;
    eprintln!("wrote {}", fin.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let (manifest, mut state) = load_model(&a.checkpoint)?;
    let (_, test, _) = load_data(&a.data, state.normalization.as_ref())?;
    check_data(state.model.spec(), &test)?;
    let mode = state.stage.mode(false, state.config.ste);
    let m = evaluate(&mut state.model, &test, mode, state.config.eval_batch)?;
    println!(
        "model={} stage={} epoch={} samples={}",
        manifest.model.name,
        manifest.stage.index(),
        manifest.epoch,
        m.samples
    );
    println!("val_top1,val_top5");
    println!("{:.4},{:.4}", m.top1, m.top5);
    println!("class,top1");
    for (c, acc) in m.per_class.iter().enumerate() {
        println!("{c},{acc:.4}");
    }
    if a.emit_plot_data {
        let report = analyze(&manifest.model, test.height, test.width)?;
        ensure_dir(&a.out)?;
        let name = format!("{}-stage{}", manifest.model.name, manifest.stage.index());
        let pts = [PlotPoint {
            model: name,
            ops: report.ops,
            top1: Some(m.top1),
        }];
        let p = write_out(&a.out, "plot-data.csv", &plot_data_csv(&pts))?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Selftest { seed, quick } => cmd_selftest(*seed, *quick),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
