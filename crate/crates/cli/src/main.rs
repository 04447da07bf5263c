//! `meme`: data generation, training, evaluation and reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 invariant violation or
//! bad data, 4 numerical failure.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use meme_core::checkpoint::Checkpoint;
use meme_core::config::ExperimentConfig;
use meme_core::dataset_io::{load_split, write_dataset};
use meme_core::eval_metrics::{
    metrics, pooled_metrics, route_report, run_tracker, write_confidences, write_predictions, Metrics, RouteReport,
};
use meme_core::experiments::{comparison_table, evaluate, run_variant, Outcome, Variant};
use meme_core::gradcheck::{run_suite, table, GradCheckSizes};
use meme_core::model::ForwardOptions;
use meme_core::moe_router::GateMode;
use meme_core::synthetic_modalities::Split;
use meme_core::trainer::{log_csv, pretrain_rgb, train_meme};
use meme_core::{Error, Result, Tracker32};

use plot::{heatmap, line_chart, Series};

#[derive(Parser)]
#[command(name = "meme", version, about = "Mixture-of-modal-experts prompt tracking at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed used by this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/test splits.
    GenData(Common),
    /// Pretrain the RGB backbone and write its frozen checkpoint.
    Pretrain(Common),
    /// Train the modal branch on top of the frozen backbone.
    Train(Common),
    /// Blind evaluation of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Zero the final prompt projection of every layer before evaluating.
        #[arg(long)]
        zero_prompts: bool,
        /// Run the frozen backbone alone.
        #[arg(long)]
        rgb_only: bool,
    },
    /// Per-layer expert selection fractions by modality.
    RouteReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report a freshly initialised router with training-mode gate noise.
        #[arg(long)]
        untrained: bool,
    },
    /// Finite-difference checks of every loss and block.
    Gradcheck(Common),
    /// Train variants over several seeds and compare them with the full model.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// no_shared, no_specific or experts_per_modality=N (repeatable).
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

/// Loads, overrides and validates the configuration, writes the resolved
/// copy into the output directory and prints its hash.
fn setup(common: &Common, seed_is_pretrain: bool) -> Result<ExperimentConfig> {
    init_logging(common.verbose);
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        if seed_is_pretrain {
            cfg.pretrain_seed = s;
        } else {
            cfg.seed = s;
        }
    }
    cfg.validate()?;
    cfg.write_resolved(&common.out)?;
    println!("config hash: {}", cfg.hash());
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|_| Error::Config(format!("unknown split {s:?}")))
}

fn load_model(path: &Path) -> Result<Tracker32> {
    Checkpoint::load(path)?.to_tracker()
}

fn metrics_text(label: &str, m: &Metrics) -> String {
    format!(
        "{label}: frames {} | F {:.2} Pr {:.2} Re {:.2} | SR {:.2} | PR@20 {:.2} | mean IoU {:.2}\n",
        m.frames,
        100.0 * m.f.f,
        100.0 * m.f.precision,
        100.0 * m.f.recall,
        100.0 * m.success_auc,
        100.0 * m.precision_20px,
        100.0 * m.mean_iou
    )
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let cfg = setup(common, false)?;
    let splits = cfg.splits()?;
    let rows = write_dataset(&common.out, &splits)?;
    println!("wrote {} sequences to {}", rows.len(), common.out.display());
    Ok(())
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = setup(common, true)?;
    let (model, report) = pretrain_rgb::<f32>(&cfg.pretrain_config(), cfg.backbone_config(), &cfg.data_config())?;
    let path = common.out.join("backbone.json");
    Checkpoint::from_tracker(&model, 0).save(&path)?;
    let losses: String = report.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
    write(&common.out.join("pretrain_log.csv"), &format!("step,loss\n{losses}"))?;
    println!(
        "backbone held-out mean IoU {:.3}; checkpoint {}",
        report.heldout_iou,
        path.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = setup(common, false)?;
    let backbone = load_model(&cfg.backbone_checkpoint)?;
    let train = load_split(&cfg.data_dir, Split::Train)?;
    let mut model = Tracker32::new(cfg.backbone_config(), Some(cfg.modal_config()), cfg.seed)?;
    model.load_backbone(&backbone.params)?;
    let report = train_meme(&cfg.train_config(), &mut model, &train, Some(&common.out))?;
    write(&common.out.join("train_log.csv"), &log_csv(&report.log))?;
    let path = common.out.join("meme.json");
    Checkpoint::from_tracker(&model, cfg.epochs).save(&path)?;
    let last = report.log.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final total loss {last:.4}; {} modal parameters; checkpoint {}",
        report.log.len(),
        model.count("modal."),
        path.display()
    );
    Ok(())
}

fn curve_plots(out: &Path, m: &Metrics) -> Result<()> {
    let sr = Series {
        name: format!("AUC {:.3}", m.success_auc),
        points: m.success_curve.thresholds.iter().copied().zip(m.success_curve.values.iter().copied()).collect(),
    };
    write(&out.join("success.svg"), &line_chart("Success plot", "overlap threshold", "success rate", &[sr]))?;
    let pr = Series {
        name: format!("PR@20 {:.3}", m.precision_20px),
        points: m
            .precision_curve
            .thresholds
            .iter()
            .copied()
            .zip(m.precision_curve.values.iter().copied())
            .collect(),
    };
    write(
        &out.join("precision.svg"),
        &line_chart("Precision plot", "location error threshold (px)", "precision", &[pr]),
    )
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>, split: &str, zero_prompts: bool, rgb_only: bool) -> Result<()> {
    let cfg = setup(common, false)?;
    let split = parse_split(split)?;
    let mut model = load_model(checkpoint.unwrap_or(&cfg.checkpoint))?;
    if zero_prompts {
        let ids: Vec<_> = model
            .params
            .iter()
            .filter(|(_, n, _)| n.contains(".prompt.w8."))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            model.params.get_mut(id).fill(0.0);
        }
    }
    let seqs = load_split(&cfg.data_dir, split)?;
    let opts = if rgb_only || model.modal.is_none() {
        ForwardOptions::baseline()
    } else {
        ForwardOptions::eval()
    };
    let runs = run_tracker(&model, &seqs, opts)?;
    for r in &runs {
        write_predictions(&common.out.join("predictions").join(format!("{}.txt", r.id)), &r.result.pred)?;
        write_confidences(
            &common.out.join("predictions").join(format!("{}_confidence.txt", r.id)),
            &r.confidence,
        )?;
    }
    let all = pooled_metrics(&runs, |_| true)?;
    let mut text = metrics_text("all", &all);
    let mut report = serde_json::json!({ "all": all });
    if runs.iter().any(|r| r.degradation.is_degraded()) {
        let d = pooled_metrics(&runs, |r| r.degradation.is_degraded())?;
        text += &metrics_text("degraded", &d);
        report["degraded"] = serde_json::to_value(&d)?;
    }
    for r in &runs {
        let m = metrics(&r.result, &r.confidence)?;
        text += &metrics_text(&format!("  {} ({})", r.id, r.degradation.label()), &m);
    }
    write(&common.out.join("metrics.txt"), &text)?;
    write(&common.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    curve_plots(&common.out, &all)?;
    print!("{}", text.lines().take(2).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}

fn route_plot(report: &RouteReport) -> String {
    let layer = report.layers.len() - 1;
    let rows: Vec<String> = report.modalities.iter().map(|m| m.name().to_string()).collect();
    let cols: Vec<String> = (0..report.experts).map(|e| format!("e{e}")).collect();
    let values: Vec<Vec<f64>> = report
        .modalities
        .iter()
        .map(|m| report.layers[layer].fractions[m.index()].clone())
        .collect();
    heatmap(
        &format!("expert selections per token, layer {layer}"),
        &rows,
        &cols,
        &values,
        1.0,
    )
}

fn cmd_route_report(common: &Common, checkpoint: Option<&Path>, split: &str, untrained: bool) -> Result<()> {
    let cfg = setup(common, false)?;
    let split = parse_split(split)?;
    let seqs = load_split(&cfg.data_dir, split)?;
    let (model, mode) = if untrained {
        (Tracker32::new(cfg.backbone_config(), Some(cfg.modal_config()), cfg.seed)?, GateMode::Train)
    } else {
        (load_model(checkpoint.unwrap_or(&cfg.checkpoint))?, GateMode::Eval)
    };
    let report = route_report(&model, &seqs, mode, cfg.seed)?;
    for (l, layer) in report.layers.iter().enumerate() {
        for m in &report.modalities {
            let sum: f64 = layer.fractions[m.index()].iter().sum();
            if (sum - report.k as f64).abs() > 1e-9 {
                return Err(Error::Invariant(format!("layer {l} row {m} sums to {sum}, not {}", report.k)));
            }
        }
    }
    let text = report.to_text();
    write(&common.out.join("route_report.txt"), &text)?;
    write(&common.out.join("route_report.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&common.out.join("route_confusion.svg"), &route_plot(&report))?;
    print!("{text}");
    println!(
        "minimum specialization {:.3} (chance {:.3})",
        report.min_specialization(),
        report.k as f64 / report.experts as f64
    );
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let cfg = setup(common, false)?;
    let entries = run_suite(GradCheckSizes::default(), cfg.seed);
    let text = table(&entries);
    write(&common.out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if let Some(bad) = entries.iter().find(|e| !e.pass) {
        return Err(Error::Invariant(format!(
            "gradient check {} failed: relative error {:.3e}",
            bad.name, bad.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_ablate(common: &Common, variants: &[String], seeds: u64) -> Result<()> {
    let cfg = setup(common, false)?;
    let mut list = vec![Variant::Full];
    for v in variants {
        let v: Variant = v.parse()?;
        if !list.contains(&v) {
            list.push(v);
        }
    }
    if seeds == 0 {
        return Err(Error::Config("seeds must be positive".into()));
    }
    let backbone = load_model(&cfg.backbone_checkpoint)?;
    let train = load_split(&cfg.data_dir, Split::Train)?;
    let test = load_split(&cfg.data_dir, Split::Test)?;
    let mut outcomes: Vec<Outcome> = vec![evaluate(&backbone, &test, ForwardOptions::baseline(), "rgb_baseline", 0)?];
    for s in 0..seeds {
        let seed = cfg.seed + s;
        for v in &list {
            log::info!("training {v} with seed {seed}");
            let run = run_variant(
                &backbone.params,
                &backbone,
                cfg.modal_config(),
                &cfg.train_config(),
                *v,
                seed,
                &train,
                &test,
            )?;
            outcomes.push(run.outcome);
        }
    }
    let text = comparison_table(&outcomes);
    write(&common.out.join("ablation.txt"), &text)?;
    write(&common.out.join("ablation.json"), &serde_json::to_string_pretty(&outcomes)?)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval {
            common,
            checkpoint,
            split,
            zero_prompts,
            rgb_only,
        } => cmd_eval(common, checkpoint.as_deref(), split, *zero_prompts, *rgb_only),
        Command::RouteReport {
            common,
            checkpoint,
            split,
            untrained,
        } => cmd_route_report(common, checkpoint.as_deref(), split, *untrained),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Ablate {
            common,
            variants,
            seeds,
        } => cmd_ablate(common, variants, *seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
