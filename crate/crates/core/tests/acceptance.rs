//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use meme_core::backbone::BACKBONE_PREFIX;
use meme_core::config::ExperimentConfig;
use meme_core::eval_metrics::{f_measure, route_report, run_tracker};
use meme_core::expert_bank::{init_laplacian, ExpertAssignment};
use meme_core::experiments::{evaluate, mean_of, run_variant, Outcome, Variant, VariantRun};
use meme_core::gradcheck::{run_suite, table, GradCheckSizes};
use meme_core::model::{ForwardOptions, Tracker};
use meme_core::moe_router::GateMode;
use meme_core::objectives::{importance_loss, moe_loss};
use meme_core::scalar::normal_cdf;
use meme_core::synthetic_modalities::Sequence;
use meme_core::trainer::pretrain_rgb;
use meme_core::{Modality, Tracker32};
use ndarray::{array, Array2};

const SEEDS: u64 = 3;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict {
        id,
        pass,
        detail: detail.into(),
    };
    println!("{} criterion {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.detail);
    v
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let entries = run_suite(GradCheckSizes::default(), 0);
    let secs = t.elapsed().as_secs_f64();
    print!("{}", table(&entries));
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let ok = entries.iter().all(|e| e.pass && e.max_rel_err < 1e-3) && secs < 60.0;
    verdict(1, ok, format!("{} checks, worst relative error {worst:.2e} (< 1e-3), {secs:.1} s (< 60 s)", entries.len()))
}

fn closed_forms() -> Verdict {
    let mut notes = Vec::new();
    let lap = init_laplacian::<f64>();
    let lap_ok = lap == [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    notes.push(format!("laplacian {}", if lap_ok { "ok" } else { "wrong" }));

    let phi = normal_cdf(0.0f64, 1.0);
    let phi_ok = (phi - 0.5).abs() <= 1e-6;
    notes.push(format!("phi(0) = {phi}"));

    let h = ExpertAssignment::contiguous(2);
    let modalities = [Modality::Depth, Modality::Thermal, Modality::Event];
    let bce = moe_loss(&Array2::from_elem((3, 6), 0.5), &modalities, &h).unwrap();
    let bce_ok = (bce - 6.0 * std::f64::consts::LN_2).abs() <= 1e-6;
    notes.push(format!("bce(0.5) = {bce:.6} vs 6 ln 2"));

    let imp = importance_loss::<f64>(&array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
    let imp_ok = (imp - 1.0).abs() <= 1e-6;
    notes.push(format!("importance = {imp}"));

    let f = f_measure(0.598, 0.597);
    let f_ok = (f * 1000.0).round() / 10.0 == 59.7;
    notes.push(format!("F(59.8, 59.7) = {:.3}", 100.0 * f));

    verdict(7, lap_ok && phi_ok && bce_ok && imp_ok && f_ok, notes.join(", "))
}

/// Everything trained once and shared by the empirical criteria.
struct Trained {
    backbone: Tracker32,
    pretrain_secs: f64,
    test: Vec<Sequence>,
    baseline: Outcome,
    full: Vec<VariantRun<f32>>,
    full_secs: f64,
    others: Vec<(Variant, Vec<Outcome>)>,
}

fn train_all(cfg: &ExperimentConfig) -> meme_core::Result<Trained> {
    let t = Instant::now();
    let (backbone, report) = pretrain_rgb::<f32>(&cfg.pretrain_config(), cfg.backbone_config(), &cfg.data_config())?;
    let pretrain_secs = t.elapsed().as_secs_f64();
    println!("backbone held-out mean IoU {:.3} after {pretrain_secs:.0} s", report.heldout_iou);
    let splits = cfg.splits()?;
    let train = splits.train.render()?;
    let test = splits.test.render()?;
    let baseline = evaluate(&backbone, &test, ForwardOptions::baseline(), "rgb_baseline", 0)?;
    let tc = cfg.train_config();
    let run = |v: Variant, seed: u64| {
        let t = Instant::now();
        let r = run_variant(&backbone.params, &backbone, cfg.modal_config(), &tc, v, seed, &train, &test);
        if let Ok(r) = &r {
            println!(
                "  {v} seed {seed}: F {:.2}, degraded IoU {:.2} ({:.0} s)",
                100.0 * r.outcome.all.f.f,
                100.0 * r.outcome.degraded.mean_iou,
                t.elapsed().as_secs_f64()
            );
        }
        r
    };
    let t = Instant::now();
    let first = run(Variant::Full, 0)?;
    let full_secs = t.elapsed().as_secs_f64();
    let mut full = vec![first];
    for seed in 1..SEEDS {
        full.push(run(Variant::Full, seed)?);
    }
    let mut others = Vec::new();
    for (v, seeds) in [
        (Variant::NoShared, SEEDS),
        (Variant::NoSpecific, SEEDS),
        (Variant::ExpertsPerModality(1), SEEDS),
        (Variant::ExpertsPerModality(3), 1),
    ] {
        let mut outs = Vec::new();
        for seed in 0..seeds {
            outs.push(run(v, seed)?.outcome);
        }
        others.push((v, outs));
    }
    Ok(Trained {
        backbone,
        pretrain_secs,
        test,
        baseline,
        full,
        full_secs,
        others,
    })
}

fn mean_f(outs: &[&Outcome]) -> f64 {
    100.0 * mean_of(outs, |o| o.all.f.f)
}

fn variant_outcomes<'a>(t: &'a Trained, v: Variant) -> Vec<&'a Outcome> {
    t.others.iter().find(|(x, _)| *x == v).map(|(_, o)| o.iter().collect()).unwrap_or_default()
}

fn specialization(t: &Trained, cfg: &ExperimentConfig) -> Verdict {
    let run = &t.full[0];
    let routes = run.routes.as_ref().expect("full model is routed");
    for l in 0..routes.layers.len() {
        let row: Vec<String> = routes.modalities.iter().map(|&m| format!("{m} {:.3}", routes.specialization(l, m))).collect();
        println!("  layer {l}: {}", row.join(", "));
    }
    let trained = routes.min_specialization();
    let untrained_model = Tracker32::new(cfg.backbone_config(), Some(cfg.modal_config()), cfg.seed).unwrap();
    let untrained = route_report(&untrained_model, &t.test, GateMode::Train, cfg.seed).unwrap();
    let chance = untrained.k as f64 / untrained.experts as f64;
    let spread: Vec<f64> = (0..untrained.layers.len())
        .flat_map(|l| untrained.modalities.iter().map(move |&m| (l, m)))
        .map(|(l, m)| untrained.specialization(l, m))
        .collect();
    let lo = spread.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spread.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let minutes = (t.pretrain_secs + t.full_secs) / 60.0;
    let ok = trained >= 0.9 && lo >= chance - 0.05 && hi <= chance + 0.05 && minutes <= 30.0;
    verdict(
        2,
        ok,
        format!(
            "trained min specialization {trained:.3} (>= 0.9); untrained range [{lo:.3}, {hi:.3}] vs chance {chance:.3} +- 0.05; pretrain + train {minutes:.1} min (<= 30)"
        ),
    )
}

fn ablation(t: &Trained) -> Verdict {
    let full: Vec<&Outcome> = t.full.iter().map(|r| &r.outcome).collect();
    let f_full = mean_f(&full);
    let f_ns = mean_f(&variant_outcomes(t, Variant::NoShared));
    let f_nx = mean_f(&variant_outcomes(t, Variant::NoSpecific));
    let ok = f_full - f_ns >= 1.0 && f_ns - f_nx >= 1.0;
    verdict(
        3,
        ok,
        format!("mean F over {SEEDS} seeds: full {f_full:.2} > no_shared {f_ns:.2} > no_specific {f_nx:.2}, gaps >= 1 point"),
    )
}

fn sweep(t: &Trained) -> Verdict {
    let full: Vec<&Outcome> = t.full.iter().map(|r| &r.outcome).collect();
    let f2 = mean_f(&full);
    let f1 = mean_f(&variant_outcomes(t, Variant::ExpertsPerModality(1)));
    let f3 = mean_f(&variant_outcomes(t, Variant::ExpertsPerModality(3)));
    verdict(4, f2 >= f1, format!("F: 1 expert {f1:.2}, 2 experts {f2:.2} (>= 1 expert), 3 experts {f3:.2} (reported only)"))
}

fn blindness(t: &Trained) -> Verdict {
    let model = &t.full[0].model;
    let mut shuffled = t.test.clone();
    for (i, s) in shuffled.iter_mut().enumerate() {
        s.modality = Modality::ALL[(s.modality.index() + 1 + i) % 3];
    }
    let a = run_tracker(model, &t.test, ForwardOptions::eval()).unwrap();
    let b = run_tracker(model, &shuffled, ForwardOptions::eval()).unwrap();
    let same = a.iter().zip(&b).all(|(x, y)| {
        x.result.pred == y.result.pred
            && x.confidence.iter().zip(&y.confidence).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    verdict(5, same, format!("{} test sequences with relabelled modalities, predictions bit-identical", a.len()))
}

fn bits(m: &Tracker32, name: &str) -> Vec<u32> {
    m.params.get(m.params.id(name).unwrap()).iter().map(|x| x.to_bits()).collect()
}

fn frozen(t: &Trained) -> Verdict {
    let mut checked = 0;
    let mut frozen = true;
    for run in &t.full {
        for (_, name, _) in t.backbone.params.iter() {
            if name.starts_with(BACKBONE_PREFIX) {
                frozen &= bits(&run.model, name) == bits(&t.backbone, name);
                checked += 1;
            }
        }
    }
    let mut zeroed: Tracker<f32> = t.full[0].model.clone();
    let ids: Vec<_> = zeroed.params.iter().filter(|(_, n, _)| n.contains(".prompt.w8.")).map(|(id, _, _)| id).collect();
    for id in ids {
        zeroed.params.get_mut(id).fill(0.0);
    }
    let z = evaluate(&zeroed, &t.test, ForwardOptions::eval(), "zero", 0).unwrap();
    let reproduces = z.all == t.baseline.all && z.degraded == t.baseline.degraded && z.clean == t.baseline.clean;
    verdict(
        6,
        frozen && reproduces,
        format!(
            "{checked} backbone tensors byte-identical: {frozen}; zero-prompt metrics equal RGB baseline: {reproduces}"
        ),
    )
}

fn cross_modal(t: &Trained) -> Verdict {
    let full: Vec<&Outcome> = t.full.iter().map(|r| &r.outcome).collect();
    let prompted = 100.0 * mean_of(&full, |o| o.degraded.mean_iou);
    let base = 100.0 * t.baseline.degraded.mean_iou;
    verdict(
        8,
        prompted - base >= 5.0,
        format!("degraded mean IoU: prompted {prompted:.2} (mean of {SEEDS} seeds) vs RGB-only {base:.2}, gain {:.2} (>= 5)", prompted - base),
    )
}

fn main() -> ExitCode {
    let mut verdicts = vec![gradient_suite(), closed_forms()];
    let cfg = ExperimentConfig::default();
    match train_all(&cfg) {
        Ok(t) => {
            verdicts.push(specialization(&t, &cfg));
            verdicts.push(ablation(&t));
            verdicts.push(sweep(&t));
            verdicts.push(blindness(&t));
            verdicts.push(frozen(&t));
            verdicts.push(cross_modal(&t));
        }
        Err(e) => {
            for id in [2, 3, 4, 5, 6, 8] {
                verdicts.push(verdict(id, false, format!("training failed: {e}")));
            }
        }
    }
    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!("{} of {} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing: {failed:?}");
        ExitCode::FAILURE
    }
}
