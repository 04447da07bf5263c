//! Tracking metrics, the routing specialisation report, and plain-text
//! prediction/annotation files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Decoded;
use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BoxPx};
use crate::model::{ForwardOptions, PairBatch, PairInput, Tracker};
use crate::modality::Modality;
use crate::moe_router::GateMode;
use crate::autodiff::Tape;
use crate::scalar::Scalar;
use crate::synthetic_modalities::{Degradation, Sequence};
use crate::tokenizer::Role;

/// Success-curve thresholds: 0, 0.05, ..., 0.95.
pub fn success_thresholds() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 0.05).collect()
}

pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const PRECISION_CURVE_MAX_PX: usize = 50;

/// Per-frame predictions aligned with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub pred: Vec<BoxPx>,
    /// Tracker's own presence flag per frame (`None`: always present).
    pub present: Option<Vec<bool>>,
    pub gt: Vec<BoxPx>,
    pub visible: Vec<bool>,
}

impl TrackResult {
    /// Always-visible target, always-present tracker.
    pub fn new(pred: Vec<BoxPx>, gt: Vec<BoxPx>) -> Result<Self> {
        let visible = vec![true; gt.len()];
        let r = Self {
            pred,
            present: None,
            gt,
            visible,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gt.len();
        if self.pred.len() != n || self.visible.len() != n || self.present.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::Data(format!(
                "track result lengths differ: {} predictions, {} annotations",
                self.pred.len(),
                n
            )));
        }
        if self.pred.iter().chain(&self.gt).any(|b| b.w < 0.0 || b.h < 0.0) {
            return Err(Error::Data("negative box size".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn ious(&self) -> Vec<f64> {
        self.pred.iter().zip(&self.gt).map(|(p, g)| iou(p, g)).collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let v = self.ious();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    fn non_empty(&self) -> Result<()> {
        self.validate()?;
        if self.is_empty() {
            return Err(Error::Data("empty track result".into()));
        }
        Ok(())
    }

    /// Concatenates several results (frame order is irrelevant to every metric).
    pub fn concat(parts: &[TrackResult]) -> TrackResult {
        let mut out = TrackResult {
            pred: Vec::new(),
            present: None,
            gt: Vec::new(),
            visible: Vec::new(),
        };
        let any_present = parts.iter().any(|p| p.present.is_some());
        let mut present = Vec::new();
        for p in parts {
            out.pred.extend(&p.pred);
            out.gt.extend(&p.gt);
            out.visible.extend(&p.visible);
            match &p.present {
                Some(v) => present.extend(v),
                None => present.extend(std::iter::repeat_n(true, p.len())),
            }
        }
        if any_present {
            out.present = Some(present);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

/// Area under the success curve (mean over thresholds) and the curve itself.
pub fn success_rate(result: &TrackResult) -> Result<(f64, Curve)> {
    result.non_empty()?;
    let ious = result.ious();
    let thresholds = success_thresholds();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64)
        .collect();
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    Ok((auc, Curve { thresholds, values }))
}

/// Fraction of frames with centre error within `threshold` pixels, plus the
/// curve over 0..=50 px.
pub fn precision_rate(result: &TrackResult, threshold: f64) -> Result<(f64, Curve)> {
    result.non_empty()?;
    let d: Vec<f64> = result.pred.iter().zip(&result.gt).map(|(p, g)| center_distance(p, g)).collect();
    let frac = |t: f64| d.iter().filter(|&&v| v <= t).count() as f64 / d.len() as f64;
    let thresholds: Vec<f64> = (0..=PRECISION_CURVE_MAX_PX).map(|t| t as f64).collect();
    let values = thresholds.iter().map(|&t| frac(t)).collect();
    Ok((frac(threshold), Curve { thresholds, values }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub f: f64,
    pub recall: f64,
    pub precision: f64,
    /// Confidence threshold achieving `f`.
    pub threshold: f64,
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F at the confidence threshold maximising F.
/// A frame counts as reported present when its presence flag is set and its
/// confidence reaches the threshold.
pub fn f_score(result: &TrackResult, confidence: &[f64]) -> Result<FScore> {
    result.validate()?;
    if confidence.len() != result.len() {
        return Err(Error::Data(format!(
            "{} confidences for {} frames",
            confidence.len(),
            result.len()
        )));
    }
    let n_visible = result.visible.iter().filter(|&&v| v).count();
    if n_visible == 0 {
        return Err(Error::Data("no visible frames".into()));
    }
    let ious = result.ious();
    let flag = |i: usize| result.present.as_ref().is_none_or(|p| p[i]);
    let mut thresholds: Vec<f64> = confidence.to_vec();
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let mut best: Option<FScore> = None;
    for &thr in &thresholds {
        let present: Vec<usize> = (0..result.len()).filter(|&i| flag(i) && confidence[i] >= thr).collect();
        if present.is_empty() {
            continue;
        }
        let precision = present
            .iter()
            .map(|&i| if result.visible[i] { ious[i] } else { 0.0 })
            .sum::<f64>()
            / present.len() as f64;
        let recall = present.iter().filter(|&&i| result.visible[i]).map(|&i| ious[i]).sum::<f64>() / n_visible as f64;
        let f = f_measure(precision, recall);
        if best.is_none_or(|b| f > b.f) {
            best = Some(FScore {
                f,
                recall,
                precision,
                threshold: thr,
            });
        }
    }
    Ok(best.unwrap_or(FScore {
        f: 0.0,
        recall: 0.0,
        precision: 0.0,
        threshold: f64::INFINITY,
    }))
}

/// Every metric of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision_20px: f64,
    pub f: FScore,
    pub success_curve: Curve,
    pub precision_curve: Curve,
}

pub fn metrics(result: &TrackResult, confidence: &[f64]) -> Result<Metrics> {
    let (sr, sc) = success_rate(result)?;
    let (pr, pc) = precision_rate(result, PRECISION_THRESHOLD_PX)?;
    Ok(Metrics {
        frames: result.len(),
        mean_iou: result.mean_iou(),
        success_auc: sr,
        precision_20px: pr,
        f: f_score(result, confidence)?,
        success_curve: sc,
        precision_curve: pc,
    })
}

/// Tracker output on one sequence (frames 1.., frame 0 is the template).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRun {
    pub id: String,
    pub degradation: Degradation,
    pub result: TrackResult,
    pub confidence: Vec<f64>,
}

/// Runs blind inference on every sequence: template from frame 0, the
/// whole frame as search region. The sequences' modality labels are not read.
pub fn run_tracker<T: Scalar>(model: &Tracker<T>, seqs: &[Sequence], opts: ForwardOptions) -> Result<Vec<SequenceRun>> {
    let tsize = model.backbone.cfg.template_px;
    let mut runs = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let (trgb, tx) = seq.template::<T>(0, tsize);
        let frames: Vec<_> = (1..seq.len())
            .map(|t| (seq.rgb_frame::<T>(t, Role::Search), seq.x_frame::<T>(t, Role::Search)))
            .collect();
        let pairs: Vec<PairInput<'_, T>> = frames
            .iter()
            .map(|(r, x)| PairInput {
                template_rgb: &trgb,
                template_x: &tx,
                search_rgb: r,
                search_x: x,
            })
            .collect();
        let batch = PairBatch::from_pairs(&pairs, model.patch())?;
        let decoded: Vec<Decoded> = model.predict_batch(&batch, opts);
        let fs = seq.size as f64;
        let pred = decoded.iter().map(|d| d.bbox.to_px(fs, fs)).collect();
        runs.push(SequenceRun {
            id: seq.id.clone(),
            degradation: seq.degradation,
            result: TrackResult::new(pred, seq.boxes[1..].to_vec())?,
            confidence: decoded.iter().map(|d| d.confidence).collect(),
        });
    }
    Ok(runs)
}

/// Pooled metrics over runs selected by `keep`.
pub fn pooled_metrics(runs: &[SequenceRun], keep: impl Fn(&SequenceRun) -> bool) -> Result<Metrics> {
    let sel: Vec<&SequenceRun> = runs.iter().filter(|r| keep(r)).collect();
    let result = TrackResult::concat(&sel.iter().map(|r| r.result.clone()).collect::<Vec<_>>());
    let conf: Vec<f64> = sel.iter().flat_map(|r| r.confidence.iter().copied()).collect();
    metrics(&result, &conf)
}

/// Selection fractions of one layer: `fractions[m][e]` is the mean number of
/// times a token of modality `m` selected expert `e` (rows sum to k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRoute {
    pub fractions: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub modalities: Vec<Modality>,
    pub experts: usize,
    pub k: usize,
    pub assignment: Vec<Vec<usize>>,
    pub layers: Vec<LayerRoute>,
}

impl RouteReport {
    /// Share of modality `m`'s selections landing in its assigned set.
    pub fn specialization(&self, layer: usize, m: Modality) -> f64 {
        let row = &self.layers[layer].fractions[m.index()];
        self.assignment[m.index()].iter().map(|&e| row[e]).sum::<f64>() / self.k as f64
    }

    /// Lowest specialisation over layers and modalities.
    pub fn min_specialization(&self) -> f64 {
        (0..self.layers.len())
            .flat_map(|l| self.modalities.iter().map(move |&m| (l, m)))
            .map(|(l, m)| self.specialization(l, m))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, layer) in self.layers.iter().enumerate() {
            s.push_str(&format!("layer {l}\n"));
            for m in &self.modalities {
                let row = &layer.fractions[m.index()];
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                s.push_str(&format!(
                    "  {:<8} [{}] specialization {:.3}\n",
                    m.name(),
                    cells.join(" "),
                    self.specialization(l, *m)
                ));
            }
        }
        s
    }
}

/// Routing statistics of the tracker on labelled sequences. Labels only
/// select the report row; the model sees pixels alone. `mode` = Train draws
/// gate noise from `seed`.
pub fn route_report<T: Scalar>(
    model: &Tracker<T>,
    seqs: &[Sequence],
    mode: GateMode,
    seed: u64,
) -> Result<RouteReport> {
    use rand::SeedableRng;
    let branch = model
        .modal
        .as_ref()
        .filter(|b| b.cfg.use_specific)
        .ok_or_else(|| Error::Config("route report needs routed experts".into()))?;
    let experts = branch.cfg.experts();
    let k = branch.cfg.top_k;
    let points = branch.layers.len();
    let mut counts = vec![vec![vec![0usize; experts]; 3]; points];
    let mut tokens = vec![vec![0usize; 3]; points];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tsize = model.backbone.cfg.template_px;
    for seq in seqs {
        let (trgb, tx) = seq.template::<T>(0, tsize);
        let frames: Vec<_> = (1..seq.len())
            .map(|t| (seq.rgb_frame::<T>(t, Role::Search), seq.x_frame::<T>(t, Role::Search)))
            .collect();
        let pairs: Vec<PairInput<'_, T>> = frames
            .iter()
            .map(|(r, x)| PairInput {
                template_rgb: &trgb,
                template_x: &tx,
                search_rgb: r,
                search_x: x,
            })
            .collect();
        let batch = PairBatch::from_pairs(&pairs, model.patch())?;
        let mut tape = Tape::inference(&model.params);
        let opts = ForwardOptions {
            mode,
            ..ForwardOptions::eval()
        };
        let out = model.forward(&mut tape, &batch, opts, &mut rng);
        let m = seq.modality.index();
        for (l, r) in out.routing.iter().enumerate() {
            tokens[l][m] += r.decision.topk.len();
            for sel in &r.decision.topk {
                for &e in sel {
                    counts[l][m][e] += 1;
                }
            }
        }
    }
    let present: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| tokens.first().is_some_and(|t| t[m.index()] > 0))
        .collect();
    let layers = counts
        .into_iter()
        .zip(tokens)
        .map(|(c, t)| LayerRoute {
            fractions: c
                .iter()
                .zip(&t)
                .map(|(row, &n)| row.iter().map(|&v| v as f64 / n.max(1) as f64).collect())
                .collect(),
            tokens: t,
        })
        .collect();
    Ok(RouteReport {
        modalities: present,
        experts,
        k,
        assignment: Modality::ALL
            .iter()
            .map(|&m| branch.assignment.experts_of(m).map(<[usize]>::to_vec))
            .collect::<Result<_>>()?,
        layers,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One "x,y,w,h" line per frame.
pub fn write_predictions(path: &Path, boxes: &[BoxPx]) -> Result<()> {
    let text: String = boxes.iter().map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h)).collect();
    write_text(path, &text)
}

pub fn write_confidences(path: &Path, conf: &[f64]) -> Result<()> {
    let text: String = conf.iter().map(|c| format!("{c}\n")).collect();
    write_text(path, &text)
}

fn parse_floats(line: &str, n: usize, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
    if v.len() != n {
        return Err(Error::Data(format!(
            "{}:{}: expected {n} fields, found {}",
            path.display(),
            lineno + 1,
            v.len()
        )));
    }
    Ok(v)
}

pub fn read_predictions(path: &Path) -> Result<Vec<BoxPx>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_floats(l, 4, path, i).map(|v| BoxPx::new(v[0], v[1], v[2], v[3])))
        .collect()
}

pub fn read_confidences(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_floats(l, 1, path, i).map(|v| v[0]))
        .collect()
}

/// Annotation lines "frame_index,x,y,w,h".
pub fn write_annotations(path: &Path, boxes: &[BoxPx]) -> Result<()> {
    let text: String = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| format!("{i},{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect();
    write_text(path, &text)
}

pub fn read_annotations(path: &Path) -> Result<Vec<BoxPx>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v = parse_floats(l, 5, path, i)?;
        if v[0] as usize != out.len() {
            return Err(Error::Data(format!("{}:{}: frame index out of order", path.display(), i + 1)));
        }
        out.push(BoxPx::new(v[1], v[2], v[3], v[4]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64) -> BoxPx {
        BoxPx::new(x, y, 10.0, 10.0)
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![b(0.0, 0.0), b(5.0, 5.0)];
        let r = TrackResult::new(gt.clone(), gt).unwrap();
        let (auc, curve) = success_rate(&r).unwrap();
        assert_eq!(auc, 1.0);
        assert!(curve.values.iter().all(|&v| v == 1.0));
        assert_eq!(precision_rate(&r, 20.0).unwrap().0, 1.0);
    }

    #[test]
    fn half_perfect_half_disjoint() {
        let gt = vec![b(0.0, 0.0), b(0.0, 0.0)];
        let r = TrackResult::new(vec![b(0.0, 0.0), b(50.0, 50.0)], gt).unwrap();
        assert!((success_rate(&r).unwrap().0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn precision_counts_offsets() {
        let gt = vec![b(0.0, 0.0), b(0.0, 0.0)];
        let r = TrackResult::new(vec![b(0.0, 0.0), b(30.0, 0.0)], gt.clone()).unwrap();
        assert_eq!(precision_rate(&r, 20.0).unwrap().0, 0.5);
        let r = TrackResult::new(vec![b(30.0, 0.0), b(0.0, 30.0)], gt).unwrap();
        assert_eq!(precision_rate(&r, 20.0).unwrap().0, 0.0);
    }

    #[test]
    fn empty_result_is_an_error() {
        let r = TrackResult::new(vec![], vec![]).unwrap();
        assert!(success_rate(&r).is_err());
        assert!(precision_rate(&r, 20.0).is_err());
        assert!(f_score(&r, &[]).is_err());
    }

    #[test]
    fn always_present_tracker_has_equal_pr_re() {
        let gt = vec![b(0.0, 0.0), b(0.0, 0.0), b(0.0, 0.0)];
        let r = TrackResult::new(vec![b(0.0, 0.0), b(3.0, 0.0), b(50.0, 0.0)], gt).unwrap();
        let f = f_score(&r, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(f.precision, f.recall);
        assert!((f.f - f.precision).abs() < 1e-12);
    }

    #[test]
    fn rounded_f_score_arithmetic() {
        let f = f_measure(0.598, 0.597);
        assert!((f - 0.5975).abs() < 1e-4);
        assert_eq!((f * 1000.0).round() / 10.0, 59.7);
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        let boxes = vec![BoxPx::new(1.5, 2.0, 3.25, 4.0), BoxPx::new(0.0, 0.0, 1.0, 1.0)];
        write_annotations(&p, &boxes).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), boxes);
        let q = dir.path().join("p.txt");
        write_predictions(&q, &boxes).unwrap();
        assert_eq!(read_predictions(&q).unwrap(), boxes);
    }
}
