use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::seeded;

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

/// Area of overlap by pixel-free interval arithmetic written out longhand.
fn naive_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let left = if a.x > b.x { a.x } else { b.x };
    let right = if a.x + a.w < b.x + b.w { a.x + a.w } else { b.x + b.w };
    let top = if a.y > b.y { a.y } else { b.y };
    let bottom = if a.y + a.h < b.y + b.h { a.y + a.h } else { b.y + b.h };
    let inter = if right > left && bottom > top { (right - left) * (bottom - top) } else { 0.0 };
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

struct Seq {
    preds: Vec<Prediction>,
    annos: Vec<FrameAnnotation>,
}

fn random_sequence(seed: u64, n: usize) -> Seq {
    let mut rng = seeded(seed);
    let mut preds = Vec::new();
    let mut annos = Vec::new();
    for i in 0..n {
        let gt = bx(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(2.0..20.0), rng.gen_range(2.0..20.0));
        let visible = i == 0 || rng.gen_bool(0.85);
        annos.push(if visible { FrameAnnotation::visible(i, gt) } else { FrameAnnotation::invisible(i) });
        preds.push(if rng.gen_bool(0.1) {
            None
        } else {
            Some(gt.translate(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)))
        });
    }
    Seq { preds, annos }
}

#[test]
fn iou_examples() {
    let a = bx(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
    assert!((iou(&a, &bx(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&a, &bx(2.0, 0.0, 2.0, 2.0)), 0.0);
    assert_eq!(iou(&bx(1.0, 1.0, 0.0, 0.0), &bx(1.0, 1.0, 0.0, 0.0)), 0.0);
    assert!(iou_checked(&None, &Some(a)).is_err());
    assert!(BoundingBox::new(0.0, 0.0, -1.0, 1.0).is_err());
    assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
}

#[test]
fn center_error_examples() {
    let p = BoundingBox::centered(5.0, 5.0, 2.0, 2.0).unwrap();
    let g = BoundingBox::centered(8.0, 9.0, 4.0, 6.0).unwrap();
    assert_eq!(center_error(&p, &p), 0.0);
    assert_eq!(center_error(&p, &g), 5.0);
    assert_eq!(center_error(&p.translate(3.0, -7.0), &g.translate(3.0, -7.0)), 5.0);
    assert!(center_error_checked(&Some(p), &None).is_err());
}

#[test]
fn normalized_center_error_examples() {
    let g = BoundingBox::centered(10.0, 10.0, 3.0, 4.0).unwrap();
    assert_eq!(normalized_center_error(&g, &g).unwrap(), 0.0);
    assert_eq!(normalized_center_error(&g.translate(3.0, 0.0), &g).unwrap(), 1.0);
    assert!((normalized_center_error(&g.translate(3.0, 4.0), &g).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    assert!(normalized_center_error(&g, &bx(0.0, 0.0, 0.0, 4.0)).is_err());
}

#[test]
fn precision_step_curve() {
    let g = BoundingBox::centered(5.0, 5.0, 4.0, 4.0).unwrap();
    let p = BoundingBox::centered(8.0, 9.0, 4.0, 4.0).unwrap();
    let c = precision_curve(&[Some(p)], &[FrameAnnotation::visible(0, g)], &precision_thresholds()).unwrap();
    for (t, v) in c.thresholds.iter().zip(&c.values) {
        assert_eq!(*v, if *t < 5.0 { 0.0 } else { 1.0 }, "t={t}");
    }
    let exact = precision_curve(&[Some(g)], &[FrameAnnotation::visible(0, g)], &precision_thresholds()).unwrap();
    assert!(exact.values.iter().all(|&v| v == 1.0));
}

#[test]
fn success_examples() {
    let g = bx(0.0, 0.0, 10.0, 10.0);
    let perfect = success_curve(&[Some(g)], &[FrameAnnotation::visible(0, g)], &success_thresholds()).unwrap();
    assert!(perfect.values[..20].iter().all(|&v| v == 1.0));
    assert_eq!(perfect.values[20], 0.0);
    assert_eq!(auc(&perfect).unwrap(), 20.0 / 21.0);

    // Half overlap along x: IoU = 50 / 150 is not 0.5, so use a box inside gt.
    let half = bx(0.0, 0.0, 10.0, 5.0);
    assert_eq!(iou(&half, &g), 0.5);
    let c = success_curve(&[Some(half)], &[FrameAnnotation::visible(0, g)], &success_thresholds()).unwrap();
    assert!((auc(&c).unwrap() - 10.0 / 21.0).abs() < 1e-15);
    assert_eq!(c.value_at(0.5), Some(0.0));
}

#[test]
fn auc_examples() {
    let ones = MetricCurve::new(vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
    assert_eq!(auc(&ones).unwrap(), 1.0);
    assert!(auc(&MetricCurve::new(vec![], vec![]).unwrap()).is_err());
    assert!(MetricCurve::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    assert!(MetricCurve::new(vec![0.0], vec![1.0, 1.0]).is_err());
}

#[test]
fn auc_close_to_trapezoid_on_monotone_curves() {
    for seed in 0..20 {
        let s = random_sequence(seed, 100);
        let c = success_curve(&s.preds, &s.annos, &success_thresholds()).unwrap();
        let step = 1.0 / 20.0;
        let trap: f64 = c.values.windows(2).map(|w| (w[0] + w[1]) / 2.0 * step).sum();
        assert!((auc(&c).unwrap() - trap).abs() <= step);
    }
}

#[test]
fn state_accuracy_examples() {
    let g = bx(0.0, 0.0, 10.0, 10.0);
    let vis = vec![FrameAnnotation::visible(0, g), FrameAnnotation::visible(1, g)];
    assert_eq!(state_accuracy(&[Some(g), Some(g)], &vis).unwrap(), 1.0);
    let inv = vec![FrameAnnotation::invisible(0), FrameAnnotation::invisible(1)];
    assert_eq!(state_accuracy(&[None, None], &inv).unwrap(), 1.0);
    let mixed = vec![FrameAnnotation::visible(0, g), FrameAnnotation::invisible(1)];
    let sa = state_accuracy(&[Some(bx(0.0, 0.0, 10.0, 5.0)), Some(g)], &mixed).unwrap();
    assert_eq!(sa, 0.25);
    assert!(state_accuracy(&[Some(g)], &mixed).is_err());
    assert!(state_accuracy(&[], &[]).is_err());
}

#[test]
fn msa_examples() {
    assert_eq!(msa(&[1.0]).unwrap(), 1.0);
    assert_eq!(msa(&[0.2, 0.8]).unwrap(), 0.5);
    assert!(msa(&[]).is_err());
    let mut rng = seeded(3);
    let xs: Vec<f64> = (0..37).map(|_| rng.gen()).collect();
    let mut total = 0.0;
    for x in &xs {
        total += x;
    }
    assert!((msa(&xs).unwrap() - total / 37.0).abs() < 1e-12);
}

#[test]
fn empty_visible_prediction_is_a_miss() {
    let g = bx(0.0, 0.0, 4.0, 4.0);
    let annos = [FrameAnnotation::visible(0, g), FrameAnnotation::visible(1, g)];
    let preds = [None, Some(g)];
    let p = precision_curve(&preds, &annos, &[50.0]).unwrap();
    assert_eq!(p.values, vec![0.5]);
    let s = success_curve(&preds, &annos, &[0.0]).unwrap();
    assert_eq!(s.values, vec![0.5]);
}

#[test]
fn invisible_frames_leave_the_denominator() {
    let g = bx(0.0, 0.0, 4.0, 4.0);
    let annos = [FrameAnnotation::visible(0, g), FrameAnnotation::invisible(1)];
    let p = precision_curve(&[Some(g), Some(g.translate(30.0, 0.0))], &annos, &[0.0]).unwrap();
    assert_eq!(p.values, vec![1.0]);
    let only_invisible = [FrameAnnotation::invisible(0)];
    assert!(matches!(precision_curve(&[None], &only_invisible, &[0.0]), Err(Error::Evaluation(_))));
}

#[test]
fn curves_match_brute_force() {
    for seed in 0..10 {
        let s = random_sequence(100 + seed, 100);
        let counted: Vec<usize> = (0..100).filter(|&i| s.annos[i].visible).collect();
        let n = counted.len() as f64;

        let pt = precision_thresholds();
        let pc = precision_curve(&s.preds, &s.annos, &pt).unwrap();
        for (k, &t) in pt.iter().enumerate() {
            let mut hits = 0;
            for &i in &counted {
                if let Some(p) = s.preds[i] {
                    let g = s.annos[i].gt.unwrap();
                    let dx = (p.x + p.w / 2.0) - (g.x + g.w / 2.0);
                    let dy = (p.y + p.h / 2.0) - (g.y + g.h / 2.0);
                    if (dx * dx + dy * dy).sqrt() <= t {
                        hits += 1;
                    }
                }
            }
            assert!((pc.values[k] - hits as f64 / n).abs() < 1e-12);
        }

        let nt = normalized_precision_thresholds();
        let nc = normalized_precision_curve(&s.preds, &s.annos, &nt).unwrap();
        for (k, &t) in nt.iter().enumerate() {
            let mut hits = 0;
            for &i in &counted {
                if let Some(p) = s.preds[i] {
                    let g = s.annos[i].gt.unwrap();
                    let dx = ((p.x + p.w / 2.0) - (g.x + g.w / 2.0)) / g.w;
                    let dy = ((p.y + p.h / 2.0) - (g.y + g.h / 2.0)) / g.h;
                    if (dx * dx + dy * dy).sqrt() <= t {
                        hits += 1;
                    }
                }
            }
            assert!((nc.values[k] - hits as f64 / n).abs() < 1e-12);
        }

        let st = success_thresholds();
        let sc = success_curve(&s.preds, &s.annos, &st).unwrap();
        for (k, &t) in st.iter().enumerate() {
            let mut hits = 0;
            for &i in &counted {
                if let Some(p) = s.preds[i] {
                    if naive_iou(&p, &s.annos[i].gt.unwrap()) > t {
                        hits += 1;
                    }
                }
            }
            assert!((sc.values[k] - hits as f64 / n).abs() < 1e-12);
        }

        let mut sa = 0.0;
        for i in 0..100 {
            sa += match (s.annos[i].visible, s.preds[i]) {
                (true, Some(p)) => naive_iou(&p, &s.annos[i].gt.unwrap()),
                (true, None) => 0.0,
                (false, None) => 1.0,
                (false, Some(_)) => 0.0,
            };
        }
        assert!((state_accuracy(&s.preds, &s.annos).unwrap() - sa / 100.0).abs() < 1e-12);
    }
}

#[test]
fn evaluate_sequence_on_perfect_predictions() {
    let s = random_sequence(5, 30);
    let preds: Vec<Prediction> = s.annos.iter().map(|a| a.gt).collect();
    let r = evaluate_sequence(&preds, &s.annos, &ThresholdGrids::default()).unwrap();
    assert_eq!(r.summary.sa, 1.0);
    assert_eq!(r.summary.msa, 1.0);
    assert_eq!(r.summary.auc_success, 20.0 / 21.0);
    assert_eq!(r.summary.precision_at_5px, 1.0);
    assert_eq!(r.summary.auc_nprecision, 1.0);
}

#[test]
fn evaluate_sequences_averages_per_sequence_sa() {
    let seqs: Vec<(Vec<Prediction>, Vec<FrameAnnotation>)> =
        (0..4).map(|i| random_sequence(200 + i, 50)).map(|s| (s.preds, s.annos)).collect();
    let (summary, reports) = evaluate_sequences(&seqs, &ThresholdGrids::default()).unwrap();
    let sas: Vec<f64> = seqs.iter().map(|(p, a)| state_accuracy(p, a).unwrap()).collect();
    assert_eq!(reports.len(), 4);
    assert!((summary.msa - sas.iter().sum::<f64>() / 4.0).abs() < 1e-12);
}

#[test]
fn missing_headline_threshold_is_rejected() {
    let s = random_sequence(6, 10);
    let grids = ThresholdGrids {
        precision: vec![0.0, 10.0],
        ..ThresholdGrids::default()
    };
    assert!(evaluate_sequence(&s.preds, &s.annos, &grids).is_err());
}

#[test]
fn csv_round_trip() {
    let mut annos = random_sequence(7, 12).annos;
    annos[3].tags = vec!["OC".into(), "FM".into()];
    let records: Vec<FrameRecord> = annos.iter().map(FrameRecord::from_annotation).collect();
    let mut buf = Vec::new();
    write_frames(&records, &mut buf).unwrap();
    let back = read_frames(&buf[..]).unwrap();
    assert_eq!(back, records);
    assert_eq!(back.iter().map(FrameRecord::to_annotation).collect::<Vec<_>>(), annos);
}

#[test]
fn csv_empty_prediction_lines() {
    let text = "frame,x,y,w,h,visible\n0,1,2,3,4,1\n1,,,,,0\n";
    let recs = read_frames_str(text).unwrap();
    assert_eq!(recs[0].to_prediction(), Some(bx(1.0, 2.0, 3.0, 4.0)));
    assert_eq!(recs[1].to_prediction(), None);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let line_of = |text: &str| match read_frames_str(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    };
    assert_eq!(line_of(""), 1);
    assert_eq!(line_of("frame,x,y,w,h,visible\n"), 2);
    assert_eq!(line_of("a,b\n0,1\n"), 1);
    assert_eq!(line_of("frame,x,y,w,h,visible\n0,1,2,3,4,1\n1,1,2,x,4,1\n"), 3);
    assert_eq!(line_of("frame,x,y,w,h,visible\n0,1,2,3,4,yes\n"), 2);
    assert_eq!(line_of("frame,x,y,w,h,visible\n0,,,,,1\n"), 2);
    assert_eq!(line_of("frame,x,y,w,h,visible\n0,1,2,-3,4,1\n"), 2);
    assert_eq!(line_of("frame,x,y,w,h,visible\n0,1,2,3\n"), 2);
}

#[test]
fn curve_csv_layout() {
    let c = MetricCurve::new(vec![0.0, 0.5], vec![1.0, 0.25]).unwrap();
    let mut buf = Vec::new();
    write_curve_csv(&c, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "threshold,value\n0,1\n0.5,0.25\n");
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    // Integer grid coordinates make touching edges common.
    (0u8..20, 0u8..20, 0u8..10, 0u8..10).prop_map(|(x, y, w, h)| bx(x.into(), y.into(), w.into(), h.into()))
}

proptest! {
    #[test]
    fn prop_iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - naive_iou(&a, &b)).abs() < 1e-12);
        if a.w > 0.0 && a.h > 0.0 {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn prop_curve_monotonicity(seed in any::<u64>()) {
        let s = random_sequence(seed, 40);
        let p = precision_curve(&s.preds, &s.annos, &precision_thresholds()).unwrap();
        prop_assert!(p.values.windows(2).all(|w| w[0] <= w[1]));
        let n = normalized_precision_curve(&s.preds, &s.annos, &normalized_precision_thresholds()).unwrap();
        prop_assert!(n.values.windows(2).all(|w| w[0] <= w[1]));
        let c = success_curve(&s.preds, &s.annos, &success_thresholds()).unwrap();
        prop_assert!(c.values.windows(2).all(|w| w[0] >= w[1]));
        for curve in [&p, &n, &c] {
            let a = auc(curve).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn prop_auc_monotone_under_domination(vals in proptest::collection::vec(0.0f64..1.0, 1..30), bump in proptest::collection::vec(0.0f64..1.0, 30)) {
        let t: Vec<f64> = (0..vals.len()).map(|i| i as f64).collect();
        let hi: Vec<f64> = vals.iter().zip(&bump).map(|(v, b)| (v + b).min(1.0)).collect();
        let lo = MetricCurve::new(t.clone(), vals).unwrap();
        let hi = MetricCurve::new(t, hi).unwrap();
        prop_assert!(auc(&lo).unwrap() <= auc(&hi).unwrap());
    }

    #[test]
    fn prop_disjoint_frame_lowers_sa(seed in any::<u64>(), frame in 0usize..20) {
        let s = random_sequence(seed, 20);
        let annos: Vec<FrameAnnotation> = s.annos.iter().map(|a| {
            let gt = a.gt.unwrap_or(bx(0.0, 0.0, 5.0, 5.0));
            FrameAnnotation::visible(a.frame_index, gt)
        }).collect();
        let mut preds: Vec<Prediction> = annos.iter().map(|a| a.gt).collect();
        prop_assert_eq!(state_accuracy(&preds, &annos).unwrap(), 1.0);
        preds[frame] = Some(annos[frame].gt.unwrap().translate(1000.0, 1000.0));
        prop_assert!(state_accuracy(&preds, &annos).unwrap() < 1.0);
    }
}
