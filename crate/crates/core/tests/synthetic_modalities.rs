use std::collections::HashSet;

use meme_core::synthetic_modalities::{
    box_contrast, generate_sequence, make_splits, quantize, render_sequence, DataConfig, Degradation, SeedRange,
    SequenceSpec, Split, Trajectory,
};
use meme_core::tokenizer::{patchify, Role};
use meme_core::Modality;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(trajectory: Trajectory, degradation: Degradation) -> SequenceSpec {
    SequenceSpec {
        length: 12,
        frame_size: 64,
        trajectory,
        object_size: (14.0, 12.0),
        appearance_seed: 11,
        background_seed: 12,
        distractors: 0,
        degradation,
    }
}

#[test]
fn static_object_fires_no_events_after_the_first_frame() {
    let seq = render_sequence("s", &spec(Trajectory::fixed(30.0, 34.0), Degradation::None), Modality::Event, 1).unwrap();
    let neutral = quantize(0.5);
    for t in 1..seq.len() {
        assert!(seq.x[t].iter().all(|&v| v == neutral), "frame {t}");
    }
}

#[test]
fn moving_object_fires_events_on_its_edges() {
    let moving = Trajectory {
        velocity: (1.2, 0.3),
        ..Trajectory::fixed(24.0, 30.0)
    };
    let seq = render_sequence("m", &spec(moving, Degradation::None), Modality::Event, 1).unwrap();
    let neutral = quantize(0.5);
    let t = 5;
    let fired: Vec<usize> = (0..64 * 64).filter(|&i| seq.x[t][i] != neutral).collect();
    assert!(!fired.is_empty());
    // Events cluster on the object's neighbourhood, not the background.
    let b = seq.boxes[t];
    let near = fired
        .iter()
        .filter(|&&i| {
            let (y, x) = ((i / 64) as f64, (i % 64) as f64);
            x >= b.x - 3.0 && x <= b.x + b.w + 3.0 && y >= b.y - 3.0 && y <= b.y + b.h + 3.0
        })
        .count();
    assert!(near as f64 >= 0.9 * fired.len() as f64, "{near} of {}", fired.len());
}

#[test]
fn darkness_hides_rgb_but_not_the_thermal_blob() {
    let traj = Trajectory {
        velocity: (0.8, -0.5),
        ..Trajectory::fixed(26.0, 36.0)
    };
    let dark = render_sequence("d", &spec(traj, Degradation::Darkness { level: 0.9 }), Modality::Thermal, 3).unwrap();
    let clean = render_sequence("c", &spec(traj, Degradation::None), Modality::Thermal, 3).unwrap();
    assert_eq!(dark.x, clean.x);
    for t in [0, 6, 11] {
        let rgb = |s: &meme_core::synthetic_modalities::Sequence| s.rgb_frame::<f64>(t, Role::Search).pixels().clone();
        let (cd, cc) = (box_contrast(&rgb(&dark), &dark.boxes[t]), box_contrast(&rgb(&clean), &clean.boxes[t]));
        assert!(cd < 0.1, "dark contrast {cd} at frame {t}");
        assert!(cc > cd);
        let x = dark.x_frame::<f64>(t, Role::Search).pixels().clone();
        assert!(box_contrast(&x, &dark.boxes[t]) > 0.2);
    }
}

#[test]
fn rendering_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in Modality::ALL {
        let s = SequenceSpec::sample(&mut rng, m, true, 10, 64);
        let a = render_sequence("a", &s, m, 9).unwrap();
        let b = render_sequence("a", &s, m, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_sequence::<f64>(&s, m, 9).unwrap(), generate_sequence::<f64>(&s, m, 9).unwrap());
    }
}

#[test]
fn samples_are_three_channel_unit_range_and_in_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in Modality::ALL {
        let s = SequenceSpec::sample(&mut rng, m, false, 6, 64);
        for sample in generate_sequence::<f64>(&s, m, 1).unwrap() {
            assert_eq!(sample.x.pixels().dim(), (3, 64, 64));
            assert_eq!(sample.rgb.pixels().dim(), (3, 64, 64));
            assert!(sample.x.pixels().iter().chain(sample.rgb.pixels().iter()).all(|v| (0.0..=1.0).contains(v)));
            let b = sample.gt_box;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 && b.y + b.h <= 64.0);
            assert!(b.w >= 8.0 && b.h >= 8.0);
        }
    }
}

#[test]
fn leaving_the_frame_is_rejected() {
    let runaway = Trajectory {
        velocity: (4.0, 0.0),
        ..Trajectory::fixed(20.0, 30.0)
    };
    assert!(render_sequence("r", &spec(runaway, Degradation::None), Modality::Depth, 0).is_err());
}

#[test]
fn split_counts_balance_and_disjointness() {
    let cfg = DataConfig::default();
    let s = make_splits(30, 10, SeedRange::new(0, 1000), SeedRange::new(5000, 1000), &cfg).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (90, 30));
    for m in Modality::ALL {
        assert_eq!(s.train.entries.iter().filter(|e| e.modality == m).count() * 3, 90);
        assert_eq!(s.test.entries.iter().filter(|e| e.modality == m).count(), 10);
    }
    assert!(s.train.entries.iter().all(|e| e.split == Split::Train));
    let train_ids: HashSet<_> = s.train.entries.iter().map(|e| e.id.clone()).collect();
    assert_eq!(train_ids.len(), 90);
    assert!(s.test.entries.iter().all(|e| !train_ids.contains(&e.id)));
    let train_seeds: HashSet<_> = s.train.entries.iter().map(|e| e.seed).collect();
    assert!(s.test.entries.iter().all(|e| !train_seeds.contains(&e.seed)));
    assert!(make_splits(30, 10, SeedRange::new(0, 1000), SeedRange::new(900, 1000), &cfg).is_err());
}

/// Mean per-patch statistics of an X plane.
fn features(plane: &Array2<f64>) -> Vec<f64> {
    let f = meme_core::tokenizer::Frame::from_single_channel(plane, Role::Search);
    let patches = patchify(&f, 8).unwrap();
    let n = patches.ncols() as f64;
    let means: Vec<f64> = patches.rows().into_iter().map(|r| r.sum() / n).collect();
    let stds: Vec<f64> = patches
        .rows()
        .into_iter()
        .zip(&means)
        .map(|(r, m)| (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let spread = |v: &[f64]| {
        let m = avg(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    vec![avg(&means), avg(&stds), spread(&means), spread(&stds)]
}

fn dataset(split: &meme_core::synthetic_modalities::Manifest) -> (Array2<f64>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for seq in split.render().unwrap() {
        for t in 0..seq.len() {
            rows.extend(features(&seq.x_plane::<f64>(t)));
            labels.push(seq.modality.index());
        }
    }
    (Array2::from_shape_vec((labels.len(), 4), rows).unwrap(), labels)
}

#[test]
fn logistic_probe_separates_the_modalities() {
    let cfg = DataConfig {
        length: 16,
        ..DataConfig::default()
    };
    let s = make_splits(8, 4, SeedRange::new(0, 100), SeedRange::new(1000, 100), &cfg).unwrap();
    let (xtr, ytr) = dataset(&s.train);
    let (xte, yte) = dataset(&s.test);
    let mean = xtr.mean_axis(ndarray::Axis(0)).unwrap();
    let std = xtr.std_axis(ndarray::Axis(0), 0.0).mapv(|v| v.max(1e-9));
    let prep = |x: &Array2<f64>| {
        let z = (x - &mean) / &std;
        ndarray::concatenate(ndarray::Axis(1), &[z.view(), Array2::ones((x.nrows(), 1)).view()]).unwrap()
    };
    let (ztr, zte) = (prep(&xtr), prep(&xte));
    let mut w = Array2::<f64>::zeros((5, 3));
    let onehot = Array2::from_shape_fn((ytr.len(), 3), |(i, c)| if ytr[i] == c { 1.0 } else { 0.0 });
    for _ in 0..3000 {
        let mut p = ztr.dot(&w);
        for mut r in p.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            r.mapv_inplace(|v| (v - m).exp());
            let s = r.sum();
            r.mapv_inplace(|v| v / s);
        }
        let g = ztr.t().dot(&(p - &onehot)) / ytr.len() as f64;
        w -= &(g * 0.5);
    }
    let pred = zte.dot(&w);
    let correct = pred
        .rows()
        .into_iter()
        .zip(&yte)
        .filter(|(r, &y)| {
            let arg = r.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
            arg == y
        })
        .count();
    let acc = correct as f64 / yte.len() as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}
