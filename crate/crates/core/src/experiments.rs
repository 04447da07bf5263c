//! Ablation and sweep runner shared by the command line and the acceptance
//! suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::eval_metrics::{pooled_metrics, route_report, run_tracker, Metrics, RouteReport};
use crate::model::{ForwardOptions, ModalConfig, Tracker};
use crate::moe_router::GateMode;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synthetic_modalities::Sequence;
use crate::trainer::{train_meme, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoShared,
    NoSpecific,
    /// Sweep point; top-k follows the per-modality count.
    ExpertsPerModality(usize),
}

impl Variant {
    pub fn apply(&self, base: ModalConfig) -> ModalConfig {
        match *self {
            Variant::Full => base,
            Variant::NoShared => ModalConfig {
                use_shared: false,
                use_specific: true,
                ..base
            },
            Variant::NoSpecific => ModalConfig {
                use_specific: false,
                use_shared: true,
                ..base
            },
            Variant::ExpertsPerModality(n) => ModalConfig {
                experts_per_modality: n,
                top_k: n,
                ..base
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoShared => f.write_str("no_shared"),
            Variant::NoSpecific => f.write_str("no_specific"),
            Variant::ExpertsPerModality(n) => write!(f, "experts_per_modality={n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "no_shared" => Ok(Variant::NoShared),
            "no_specific" => Ok(Variant::NoSpecific),
            other => match other.strip_prefix("experts_per_modality=").map(str::parse::<usize>) {
                Some(Ok(n)) if n >= 1 => Ok(Variant::ExpertsPerModality(n)),
                _ => Err(config_err!(
                    "unknown variant {other:?}; expected no_shared, no_specific, full or experts_per_modality=N"
                )),
            },
        }
    }
}

/// Test-split metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub label: String,
    pub seed: u64,
    pub all: Metrics,
    pub degraded: Metrics,
    pub clean: Option<Metrics>,
    /// Lowest specialisation over layers and modalities (routed variants).
    pub min_specialization: Option<f64>,
}

pub fn evaluate<T: Scalar>(model: &Tracker<T>, test: &[Sequence], opts: ForwardOptions, label: &str, seed: u64) -> Result<Outcome> {
    let runs = run_tracker(model, test, opts)?;
    let has_clean = runs.iter().any(|r| !r.degradation.is_degraded());
    let min_specialization = if opts.prompts && model.modal.as_ref().is_some_and(|m| m.cfg.use_specific) {
        Some(route_report(model, test, GateMode::Eval, seed)?.min_specialization())
    } else {
        None
    };
    Ok(Outcome {
        label: label.to_string(),
        seed,
        all: pooled_metrics(&runs, |_| true)?,
        degraded: pooled_metrics(&runs, |r| r.degradation.is_degraded())?,
        clean: if has_clean {
            Some(pooled_metrics(&runs, |r| !r.degradation.is_degraded())?)
        } else {
            None
        },
        min_specialization,
    })
}

/// A trained variant with its report.
pub struct VariantRun<T> {
    pub model: Tracker<T>,
    pub report: TrainReport,
    pub outcome: Outcome,
    pub routes: Option<RouteReport>,
}

/// Builds the variant on top of `backbone`, trains it with `seed`, and
/// evaluates it on `test`.
pub fn run_variant<T: Scalar>(
    backbone: &ParamStore<T>,
    base: &Tracker<T>,
    modal: ModalConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    train: &[Sequence],
    test: &[Sequence],
) -> Result<VariantRun<T>> {
    let modal = variant.apply(modal);
    let mut model = Tracker::<T>::new(base.backbone.cfg, Some(modal), seed)?;
    model.load_backbone(backbone)?;
    let cfg = TrainConfig {
        seed,
        ..*train_cfg
    };
    let report = train_meme(&cfg, &mut model, train, None)?;
    let outcome = evaluate(&model, test, ForwardOptions::eval(), &variant.to_string(), seed)?;
    let routes = if modal.use_specific {
        Some(route_report(&model, test, GateMode::Eval, seed)?)
    } else {
        None
    };
    Ok(VariantRun {
        model,
        report,
        outcome,
        routes,
    })
}

/// Mean of `f` over outcomes.
pub fn mean_of(outcomes: &[&Outcome], f: impl Fn(&Outcome) -> f64) -> f64 {
    outcomes.iter().map(|o| f(o)).sum::<f64>() / outcomes.len().max(1) as f64
}

/// Plain-text table of seed-averaged metrics per label, in first-seen order.
pub fn comparison_table(outcomes: &[Outcome]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for o in outcomes {
        if !labels.contains(&o.label.as_str()) {
            labels.push(&o.label);
        }
    }
    let mut s = format!(
        "{:<26} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "variant", "seeds", "F", "Pr", "Re", "SR", "PR@20", "IoU(degr)"
    );
    for l in labels {
        let sel: Vec<&Outcome> = outcomes.iter().filter(|o| o.label == l).collect();
        s.push_str(&format!(
            "{:<26} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10.2}\n",
            l,
            sel.len(),
            100.0 * mean_of(&sel, |o| o.all.f.f),
            100.0 * mean_of(&sel, |o| o.all.f.precision),
            100.0 * mean_of(&sel, |o| o.all.f.recall),
            100.0 * mean_of(&sel, |o| o.all.success_auc),
            100.0 * mean_of(&sel, |o| o.all.precision_20px),
            100.0 * mean_of(&sel, |o| o.degraded.mean_iou),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::Full,
            Variant::NoShared,
            Variant::NoSpecific,
            Variant::ExpertsPerModality(3),
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("experts_per_modality=0".parse::<Variant>().is_err());
        assert!("bogus".parse::<Variant>().is_err());
    }
}
