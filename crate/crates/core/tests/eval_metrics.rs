use meme_core::eval_metrics::{
    f_measure, f_score, metrics, precision_rate, read_annotations, read_confidences, read_predictions,
    success_rate, write_annotations, write_confidences, write_predictions, TrackResult,
};
use meme_core::{iou, BoxPx};
use proptest::prelude::*;

fn boxes(n: usize) -> impl Strategy<Value = Vec<BoxPx>> {
    proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 1.0f64..20.0), n)
        .prop_map(|v| v.into_iter().map(|(x, y, w, h)| BoxPx::new(x, y, w, h)).collect())
}

#[test]
fn iou_area_arithmetic() {
    let a = BoxPx::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert!((iou(&a, &BoxPx::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&a, &BoxPx::new(5.0, 5.0, 1.0, 1.0)), 0.0);
    assert_eq!(iou(&BoxPx::new(0.0, 0.0, 0.0, 0.0), &BoxPx::new(0.0, 0.0, 0.0, 0.0)), 0.0);
}

#[test]
fn precision_counts_mixed_offsets() {
    let gt = vec![BoxPx::new(10.0, 10.0, 8.0, 8.0); 4];
    let pred = vec![gt[0], gt[0].clone(), BoxPx::new(40.0, 10.0, 8.0, 8.0), BoxPx::new(10.0, 40.0, 8.0, 8.0)];
    let r = TrackResult::new(pred, gt).unwrap();
    let (p, curve) = precision_rate(&r, 20.0).unwrap();
    assert_eq!(p, 0.5);
    assert_eq!(curve.thresholds.len(), 51);
    assert_eq!(curve.values[50], 1.0);
}

#[test]
fn f_of_598_and_597_rounds_to_597() {
    let f = f_measure(0.598, 0.597);
    assert!((f - 0.5975).abs() < 1e-4);
    assert_eq!((f * 1000.0).round() / 10.0, 59.7);
}

#[test]
fn no_visible_frames_is_an_error() {
    let b = BoxPx::new(0.0, 0.0, 4.0, 4.0);
    let mut r = TrackResult::new(vec![b], vec![b]).unwrap();
    r.visible = vec![false];
    assert!(f_score(&r, &[1.0]).is_err());
}

#[test]
fn absent_reports_trade_recall_for_precision() {
    let g = BoxPx::new(0.0, 0.0, 10.0, 10.0);
    // Second frame is a miss with low confidence; dropping it lifts Pr, not Re.
    let r = TrackResult::new(vec![g, BoxPx::new(30.0, 30.0, 10.0, 10.0)], vec![g, g]).unwrap();
    let f = f_score(&r, &[0.9, 0.1]).unwrap();
    assert_eq!((f.precision, f.recall, f.threshold), (1.0, 0.5, 0.9));
    assert!((f.f - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let b = vec![BoxPx::new(1.5, 2.25, 10.0, 12.125), BoxPx::new(0.0, 3.0, 4.0, 5.0)];
    write_predictions(&dir.path().join("p.txt"), &b).unwrap();
    assert_eq!(read_predictions(&dir.path().join("p.txt")).unwrap(), b);
    write_annotations(&dir.path().join("a.txt"), &b).unwrap();
    assert_eq!(read_annotations(&dir.path().join("a.txt")).unwrap(), b);
    write_confidences(&dir.path().join("c.txt"), &[0.25, 1.0]).unwrap();
    assert_eq!(read_confidences(&dir.path().join("c.txt")).unwrap(), vec![0.25, 1.0]);
}

proptest! {
    #[test]
    fn metrics_ignore_frame_order(
        pred in boxes(8),
        gt in boxes(8),
        conf in proptest::collection::vec(0.0f64..1.0, 8),
        perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let a = TrackResult::new(pred.clone(), gt.clone()).unwrap();
        let b = TrackResult::new(perm.iter().map(|&i| pred[i]).collect(), perm.iter().map(|&i| gt[i]).collect()).unwrap();
        let cb: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let (ma, mb) = (metrics(&a, &conf).unwrap(), metrics(&b, &cb).unwrap());
        prop_assert!((ma.mean_iou - mb.mean_iou).abs() < 1e-12);
        prop_assert_eq!(ma.success_curve, mb.success_curve);
        prop_assert_eq!(ma.precision_curve, mb.precision_curve);
        prop_assert!((ma.f.f - mb.f.f).abs() < 1e-12);
        prop_assert_eq!(success_rate(&a).unwrap().0, ma.success_auc);
    }

    #[test]
    fn f_is_the_harmonic_mean_and_below_the_arithmetic(pr in 0.0f64..1.0, re in 0.0f64..1.0) {
        let f = f_measure(pr, re);
        prop_assert!((f - f_measure(re, pr)).abs() < 1e-15);
        let (lo, hi) = (pr.min(re), pr.max(re));
        if lo + hi > 0.0 {
            prop_assert!((f - 2.0 * lo * hi / (lo + hi)).abs() < 1e-15);
        }
        prop_assert!(f <= (pr + re) / 2.0 + 1e-15);
        prop_assert!((f_measure(pr, pr) - pr).abs() < 1e-15);
    }

    #[test]
    fn always_present_on_visible_target_has_equal_pr_and_re(pred in boxes(6), gt in boxes(6)) {
        let r = TrackResult::new(pred, gt).unwrap();
        let f = f_score(&r, &[1.0; 6]).unwrap();
        prop_assert!((f.precision - f.recall).abs() < 1e-12);
        prop_assert!((f.precision - r.mean_iou()).abs() < 1e-12);
    }
}
