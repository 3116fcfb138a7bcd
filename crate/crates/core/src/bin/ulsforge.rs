use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ulsforge::neighborhood::Connectivity;
use ulsforge::pipeline::{
    aggregate_by_location, compare_models, emit_report, extract_vois, load_manifest, read_run_dir, resolve_workers,
    run_dice_eval, run_robustness_eval, split_patients, write_run_dir, ComparisonOutcome, EvalConfig, Metric,
    ReportFormat, RunKind, RunMetadata, DEFAULT_ALPHA,
};
use ulsforge::segmenter::{GrowParams, SegmenterRef, DEFAULT_MAX_VOXELS, DEFAULT_TIMEOUT_S};
use ulsforge::voi::{IsolationMode, VoiConfig, AIR_HU};

#[derive(Parser)]
#[command(name = "ulsforge", version, about = "Click-centered VOI extraction and click-robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check manifest schema and that every referenced file exists.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Patient-level train/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Write centered (and optionally shifted) VOI pairs plus an index.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        voi: VoiArgs,
        #[arg(long)]
        out: PathBuf,
        /// Shifted crops per lesion.
        #[arg(long, default_value_t = 0)]
        augment: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Centered-click Dice run.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Click-robustness run.
    Robustness {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shifted clicks per lesion.
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Paired t-tests of run B against run A.
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Bonferroni factor: AUTO (number of tests) or an integer.
        #[arg(long, default_value = "AUTO")]
        bonferroni_m: String,
        /// Metrics to test; defaults to every metric both runs carry.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location-stratified summary of one or more runs.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "location")]
        by: String,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
        /// Comparison file written by `compare`, to mark significant cells.
        #[arg(long)]
        comparisons: Vec<PathBuf>,
        /// Comma-separated list of known location tags; others become "undefined".
        #[arg(long, value_delimiter = ',')]
        taxonomy: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Lenient,
}

#[derive(Args)]
struct VoiArgs {
    /// VOI size as XxYxZ.
    #[arg(long, default_value = "128x128x64")]
    voi: String,
    /// Image padding value; -1024 (air) unless set, e.g. 0 for literal zero-padding.
    #[arg(long, default_value_t = AIR_HU, allow_negative_numbers = true)]
    pad_value: f64,
    #[arg(long, default_value_t = Connectivity::default())]
    connectivity: Connectivity,
}

impl VoiArgs {
    fn config(&self) -> Result<VoiConfig> {
        let cfg =
            VoiConfig { pad_value_image: self.pad_value, ..VoiConfig::with_size(VoiConfig::parse_size(&self.voi)?) };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `builtin` or `exec:"CMD {image} {x} {y} {z} {output}"`.
    #[arg(long, default_value = "builtin")]
    segmenter: String,
    #[command(flatten)]
    voi: VoiArgs,
    /// Built-in grower intensity window, LO,HI.
    #[arg(long, default_value = "0,200", allow_hyphen_values = true)]
    hu_window: String,
    #[arg(long, default_value_t = DEFAULT_MAX_VOXELS)]
    max_voxels: usize,
    /// Built-in grower behavior when the click is outside the window.
    #[arg(long, value_enum, default_value_t = ModeArg::Lenient)]
    grow_mode: ModeArg,
    /// External segmenter timeout in seconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_S)]
    timeout: f64,
    #[arg(long)]
    model_id: Option<String>,
    /// Parallel workers; falls back to ULSFORGE_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_window(s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s.split_once(',').context("--hu-window expects LO,HI")?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn run_eval(args: &RunArgs, robust: Option<(u64, usize)>) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let params = GrowParams {
        hu_window: parse_window(&args.hu_window)?,
        connectivity: args.voi.connectivity,
        max_voxels: args.max_voxels,
        mode: match args.grow_mode {
            ModeArg::Strict => IsolationMode::Strict,
            ModeArg::Lenient => IsolationMode::Lenient,
        },
    };
    let mut seg_ref = SegmenterRef::parse(&args.segmenter, params)?;
    seg_ref.timeout_s = args.timeout;
    seg_ref.model_id = args.model_id.clone();
    let seg = seg_ref.build()?;
    let (seed_root, k) = robust.unwrap_or((0, 0));
    let cfg = EvalConfig {
        voi: args.voi.config()?,
        connectivity: args.voi.connectivity,
        k,
        seed_root,
        workers: resolve_workers(args.workers),
    };
    let (kind, records) = match robust {
        Some(_) => (RunKind::Robustness, run_robustness_eval(&manifest, seg.as_ref(), &cfg)?),
        None => (RunKind::Dice, run_dice_eval(&manifest, seg.as_ref(), &cfg)?),
    };
    let meta = RunMetadata::new(kind, &seg.model_id(), &cfg, records.len());
    write_run_dir(&args.out, &meta, &records)?;
    let failed = records.iter().filter(|r| r.is_failed()).count();
    eprintln!("{} lesions evaluated, {failed} failed -> {}", records.len(), args.out.display());
    Ok(())
}

fn read_comparisons(path: &Path) -> Result<Vec<ComparisonOutcome>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Validate { manifest } => {
            let m = load_manifest(&manifest)?;
            println!("ok: {} lesions, {} patients", m.len(), m.patients().len());
            for (ds, n) in m.counts_by_dataset() {
                println!("  {ds}: {n}");
            }
        }
        Cmd::Split { manifest, test_fraction, seed, out_train, out_test } => {
            let m = load_manifest(&manifest)?;
            let (train, test) = split_patients(&m, test_fraction, seed)?;
            train.save(&out_train)?;
            test.save(&out_test)?;
            println!(
                "train: {} lesions / {} patients; test: {} lesions / {} patients",
                train.len(),
                train.patients().len(),
                test.len(),
                test.patients().len()
            );
        }
        Cmd::Extract { manifest, voi, out, augment, seed, workers } => {
            let m = load_manifest(&manifest)?;
            let cfg = EvalConfig {
                voi: voi.config()?,
                connectivity: voi.connectivity,
                k: augment,
                seed_root: seed,
                workers: resolve_workers(workers),
            };
            let index = extract_vois(&m, &cfg, augment, &out)?;
            println!("{} VOI pairs written, {} lesions failed", index.samples.len(), index.failures.len());
        }
        Cmd::Eval { run } => run_eval(&run, None)?,
        Cmd::Robustness { run, seed, k } => {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            run_eval(&run, Some((seed, k)))?
        }
        Cmd::Compare { run_a, run_b, alpha, bonferroni_m, metrics, out } => {
            let (_, a) = read_run_dir(&run_a)?;
            let (_, b) = read_run_dir(&run_b)?;
            let m = match bonferroni_m.trim() {
                s if s.eq_ignore_ascii_case("auto") => None,
                s => Some(s.parse::<usize>().context("--bonferroni-m expects AUTO or a positive integer")?),
            };
            let metrics = if metrics.is_empty() {
                let mut v = vec![Metric::Dice];
                if a.iter().chain(&b).all(|r| r.robustness.is_some()) {
                    v.push(Metric::Robustness);
                }
                v
            } else {
                metrics
            };
            let outcomes = compare_models(&a, &b, &metrics, m, alpha)?;
            for o in &outcomes {
                match (&o.result, &o.degenerate) {
                    (Some(r), _) => println!(
                        "{}: t = {:.4}, df = {}, p = {:.4e}, p_adj = {:.4e}{}",
                        o.comparison_id,
                        r.t_stat,
                        r.df,
                        r.p_two_tailed,
                        r.p_adjusted,
                        if o.significant { " *" } else { "" }
                    ),
                    (None, reason) => println!("{}: degenerate ({})", o.comparison_id, reason.as_deref().unwrap_or("")),
                }
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&outcomes)? + "\n")?;
        }
        Cmd::Report { runs, by, format, comparisons, taxonomy, out } => {
            if by != "location" {
                bail!("only --by location is supported");
            }
            let mut metas = Vec::new();
            let mut records = Vec::new();
            for dir in &runs {
                let (meta, rs) = read_run_dir(dir)?;
                metas.push(meta);
                records.extend(rs);
            }
            let tax = (!taxonomy.is_empty()).then_some(taxonomy.as_slice());
            let mut outcomes = Vec::new();
            for c in &comparisons {
                outcomes.extend(read_comparisons(c)?);
            }
            let report = aggregate_by_location(&records, tax)?.with_runs(metas).with_comparisons(outcomes);
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            emit_report(&report, format, &out)?;
            let (header, rows) = report.table_rows();
            println!("{}", header.join(" | "));
            for row in rows {
                println!("{}", row.join(" | "));
            }
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
