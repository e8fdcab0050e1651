use std::collections::BTreeSet;

use echoguide_core::cascade::GreenBuffer;
use echoguide_core::ingest::echonet::{LandmarkTarget, Point};
use echoguide_core::ingest::scores::{assign_continuous_scores, category_score_range};
use echoguide_core::ingest::sweep::{parse_sweep_manifest_str, serialize_sweep_manifest, SweepManifestEntry};
use echoguide_core::ingest::{augment_frame, make_subject_folds, AugmentParams};
use echoguide_core::landmarks::{
    argmax, decode_index, encode_target_index, masked_weighted_nll, spatial_softmax, uncertainty_radius,
    AnnotationBatch, HeatmapLogits, Visibility,
};
use echoguide_core::lvef::{clamp_lvef, gate_frames};
use echoguide_core::pose::{evaluate_categories, score_to_category, weighted_mse, ClassWeights};
use echoguide_core::protocol::{decode_frame_payload, encode_frame_payload, parse_client_message, ClientMessage};
use echoguide_core::rubric::{categorize, categorize_criteria, total_deduction, RubricCriterion};
use echoguide_core::{Frame, PoseCategory};
use proptest::prelude::*;

fn category() -> impl Strategy<Value = PoseCategory> {
    prop_oneof![
        Just(PoseCategory::Green),
        Just(PoseCategory::Yellow),
        Just(PoseCategory::Red)
    ]
}

/// Sequences made of runs so long runs are common.
fn run_sequence(max_runs: usize, max_run: usize) -> impl Strategy<Value = Vec<PoseCategory>> {
    prop::collection::vec((category(), 1..=max_run), 1..=max_runs)
        .prop_map(|runs| runs.into_iter().flat_map(|(c, n)| std::iter::repeat_n(c, n)).collect())
}

fn logits(max_b: usize, max_l: usize, max_side: usize) -> impl Strategy<Value = HeatmapLogits> {
    (1..=max_b, 1..=max_l, 1..=max_side, 1..=max_side).prop_flat_map(|(b, l, h, w)| {
        prop::collection::vec(-6.0f32..6.0, b * l * h * w)
            .prop_map(move |data| HeatmapLogits::new([b, l, h, w], data).unwrap())
    })
}

fn annotations(logits: &HeatmapLogits) -> impl Strategy<Value = AnnotationBatch> {
    let [b, l, h, w] = logits.shape();
    (
        prop::collection::vec(0..h * w, b * l),
        prop::collection::vec(any::<bool>(), b * l),
        prop::collection::vec(0.125f64..4.0, b),
    )
        .prop_map(move |(t, m, v)| AnnotationBatch::new(b, l, t, m, v).unwrap())
}

fn with_annotations() -> impl Strategy<Value = (HeatmapLogits, AnnotationBatch)> {
    logits(3, 4, 8).prop_flat_map(|lg| {
        let batch = annotations(&lg);
        (Just(lg), batch)
    })
}

proptest! {
    #[test]
    fn folds_are_subject_disjoint(n in 4usize..40, seed in any::<u64>()) {
        let subjects: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
        let all: BTreeSet<String> = subjects.iter().cloned().collect();
        for f in make_subject_folds(subjects, seed).unwrap() {
            prop_assert!(f.is_disjoint());
            prop_assert!(f.test_subjects.is_disjoint(&f.val_subjects));
            prop_assert!(f.test_subjects.is_disjoint(&f.train_subjects));
            prop_assert!(f.val_subjects.is_disjoint(&f.train_subjects));
            let union: BTreeSet<String> =
                f.test_subjects.iter().chain(&f.val_subjects).chain(&f.train_subjects).cloned().collect();
            prop_assert_eq!(&union, &all);
        }
    }

    #[test]
    fn continuous_scores_stay_in_range_and_descend_within_runs(cats in run_sequence(12, 30)) {
        let scores = assign_continuous_scores(&cats);
        prop_assert_eq!(scores.len(), cats.len());
        for (i, (&s, &c)) in scores.iter().zip(&cats).enumerate() {
            let (hi, lo) = category_score_range(c);
            prop_assert!(lo <= s && s <= hi);
            match c {
                PoseCategory::Green => prop_assert!(s >= 0.0),
                PoseCategory::Yellow => prop_assert!((-1.0..=0.0).contains(&s)),
                PoseCategory::Red => prop_assert!((-2.0..=-1.0).contains(&s)),
            }
            if i > 0 && cats[i - 1] == c {
                prop_assert!(scores[i - 1] >= s);
            }
        }
    }

    #[test]
    fn integer_shift_moves_image_and_landmark_together(
        (w, h) in (4usize..24, 4usize..24),
        px in 0usize..24, py in 0usize..24,
        tx in -3i32..=3, ty in -3i32..=3,
    ) {
        let (px, py) = (px % w, py % h);
        let frame = Frame::from_fn(w, h, |x, y| if (x, y) == (px, py) { 1.0 } else { 0.0 });
        let params = AugmentParams { tx: tx as f64, ty: ty as f64, ..AugmentParams::IDENTITY };
        let target = LandmarkTarget {
            point: Point { x: px as f64, y: py as f64 },
            visibility: Visibility::High,
            in_bounds: true,
        };
        let (out, lm) = augment_frame(&frame, Some(&[Some(target)]), &params);
        let moved = lm.unwrap()[0].unwrap();
        prop_assert_eq!(moved.point, params.transform_point(target.point, w, h));
        if moved.in_bounds {
            let idx = encode_target_index(moved.point.x, moved.point.y, w, h);
            prop_assert_eq!(argmax(out.pixels()), idx);
        } else {
            prop_assert!(out.pixels().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn manifest_round_trips(
        labels in prop::collection::vec(prop::collection::btree_set(0usize..7, 0..4), 1..20),
        fps in 1.0f64..120.0,
        with_deductions in any::<bool>(),
    ) {
        // Valid manifests start green, so prepend an empty deduction list.
        let mut deductions: Vec<Vec<RubricCriterion>> = vec![vec![]];
        for set in labels {
            let mut v: Vec<RubricCriterion> = set.into_iter().map(|i| RubricCriterion::ALL[i]).collect();
            if v.contains(&RubricCriterion::LaEntirelyOut) {
                v.retain(|c| *c != RubricCriterion::LaPartiallyOut);
            }
            deductions.push(v);
        }
        let cats: Vec<PoseCategory> = deductions.iter().map(|d| categorize_criteria(d).unwrap()).collect();
        let entry = SweepManifestEntry {
            subject_id: "subject-1".into(),
            sweep_id: "sweep-1".into(),
            device: "probe".into(),
            fps,
            video: "sweep-1".into(),
            labels: cats,
            deductions: with_deductions.then_some(deductions),
        };
        let text = serialize_sweep_manifest(std::slice::from_ref(&entry)).unwrap();
        prop_assert_eq!(parse_sweep_manifest_str(&text).unwrap(), vec![entry]);
    }

    #[test]
    fn more_deductions_never_improve_the_category(a in 0.0f64..6.0, b in 0.0f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(categorize(hi).unwrap() <= categorize(lo).unwrap());
    }

    #[test]
    fn adding_a_criterion_never_improves_the_category(mask in 0u32..128, extra in 0usize..7) {
        let set: BTreeSet<RubricCriterion> =
            (0..7).filter(|i| mask & (1 << i) != 0).map(|i| RubricCriterion::ALL[i]).collect();
        let Ok(before) = total_deduction(&set) else { return Ok(()) };
        let mut bigger = set.clone();
        bigger.insert(RubricCriterion::ALL[extra]);
        if let Ok(after) = total_deduction(&bigger) {
            prop_assert!(categorize(after).unwrap() <= categorize(before).unwrap());
        }
    }

    #[test]
    fn loss_is_linear_in_sample_weight((lg, batch) in with_annotations(), k in 0usize..3) {
        let k = k % batch.batch();
        let base = masked_weighted_nll(&lg, &batch).unwrap();
        let mut doubled = batch.clone();
        doubled.vis_w_mut()[k] *= 2.0;
        let mut only_k = batch.clone();
        for (i, m) in only_k.mask_mut().iter_mut().enumerate() {
            if i / batch.landmarks() != k {
                *m = false;
            }
        }
        let contribution = masked_weighted_nll(&lg, &only_k).unwrap();
        let got = masked_weighted_nll(&lg, &doubled).unwrap();
        prop_assert!((got - (base + contribution)).abs() <= 1e-9 * (1.0 + got.abs()));
    }

    #[test]
    fn unmasking_removes_exactly_one_term((lg, batch) in with_annotations(), pick in 0usize..64) {
        let k = pick % (batch.batch() * batch.landmarks());
        let mut on = batch.clone();
        on.mask_mut()[k] = true;
        let mut off = batch.clone();
        off.mask_mut()[k] = false;
        let mut single = batch.clone();
        single.mask_mut().iter_mut().enumerate().for_each(|(i, m)| *m = i == k);
        let diff = masked_weighted_nll(&lg, &on).unwrap() - masked_weighted_nll(&lg, &off).unwrap();
        let term = masked_weighted_nll(&lg, &single).unwrap();
        prop_assert!((diff - term).abs() <= 1e-9 * (1.0 + term.abs()));
    }

    #[test]
    fn softmax_ignores_channel_offsets(lg in logits(2, 3, 8), c in -20.0f32..20.0) {
        let mut shifted = lg.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += c);
        let (a, b) = (spatial_softmax(&lg), spatial_softmax(&shifted));
        let [bn, ln, ..] = lg.shape();
        for bi in 0..bn {
            for li in 0..ln {
                for (p, q) in a.channel(bi, li).iter().zip(b.channel(bi, li)) {
                    prop_assert!((p - q).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn index_encoding_round_trips(w in 1usize..200, h in 1usize..200, x in 0usize..200, y in 0usize..200) {
        let (x, y) = (x % w, y % h);
        prop_assert_eq!(decode_index(encode_target_index(x as f64, y as f64, w, h), w), (x, y));
    }

    #[test]
    fn sharper_peak_never_widens_the_radius(lg in logits(1, 1, 12), boost in 0.0f32..10.0) {
        let [_, _, h, w] = lg.shape();
        let tau = 1.0 / (h * w) as f64;
        let peak = argmax(lg.channel(0, 0));
        let mut sharper = lg.clone();
        sharper.data_mut()[peak] += boost;
        let before = uncertainty_radius(spatial_softmax(&lg).channel(0, 0), tau);
        let after = uncertainty_radius(spatial_softmax(&sharper).channel(0, 0), tau);
        prop_assert!(after <= before);
    }

    #[test]
    fn monotone_rescaling_preserves_categories(s in -3.0f64..2.0, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        // f(s) = a * s^3 + b is strictly increasing.
        let f = |v: f64| a * v * v * v + b;
        let (g, y) = (f(0.0), f(-1.0));
        let fs = f(s);
        let mapped = if fs >= g {
            PoseCategory::Green
        } else if fs >= y {
            PoseCategory::Yellow
        } else {
            PoseCategory::Red
        };
        prop_assert_eq!(mapped, score_to_category(s));
    }

    #[test]
    fn unit_weights_give_plain_mse(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, category()), 1..50)) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let cats: Vec<PoseCategory> = pairs.iter().map(|p| p.2).collect();
        let unit = ClassWeights { green: 1.0, yellow: 1.0, red: 1.0 };
        let mse = pred.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
        prop_assert_eq!(weighted_mse(&pred, &target, &cats, &unit).unwrap(), mse);
    }

    #[test]
    fn confusion_totals_and_accuracy(pairs in prop::collection::vec((category(), category()), 1..200)) {
        let truth: Vec<PoseCategory> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<PoseCategory> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate_categories(0, &truth, &pred).unwrap();
        prop_assert_eq!(r.confusion.total(), pairs.len() as u64);
        prop_assert_eq!(r.accuracy, r.confusion.trace() as f64 / pairs.len() as f64);
        for c in PoseCategory::ALL {
            let row: u64 = r.confusion.0[c.index()].iter().sum();
            prop_assert_eq!(row, truth.iter().filter(|t| **t == c).count() as u64);
        }
    }

    #[test]
    fn gate_matches_rule_for_any_rate(n in 0usize..200, fps in 0.5f64..240.0) {
        prop_assert_eq!(gate_frames(n, fps), n >= 26 || n as f64 / fps >= 1.0);
    }

    #[test]
    fn lvef_is_always_a_percentage(raw in prop::num::f64::ANY) {
        let v = clamp_lvef(raw);
        prop_assert!((0.0..=100.0).contains(&v));
    }

    #[test]
    fn green_buffer_holds_only_the_current_green_run(cats in run_sequence(10, 60), fps in 10.0f64..60.0) {
        let mut buf = GreenBuffer::new(fps, 40);
        let mut run = 0usize;
        let mut fired = 0;
        for (i, &c) in cats.iter().enumerate() {
            let u = buf.update(i, c, i);
            run = if c == PoseCategory::Green { run + 1 } else { 0 };
            prop_assert_eq!(buf.run_len(), run);
            prop_assert_eq!(buf.items().len(), run.min(40));
            prop_assert!(buf.items().enumerate().all(|(k, &j)| j == i + 1 - buf.items().len() + k));
            // Independent trace: first gated frame of the run, then every 26.
            let first = (1..).find(|&k| gate_frames(k, fps)).unwrap();
            let expect = run >= first && (run - first) % 26 == 0;
            prop_assert_eq!(u.fire, expect);
            fired += usize::from(u.fire);
        }
        prop_assert_eq!(buf.emitted_count(), fired);
    }

    #[test]
    fn client_messages_round_trip(id in "[a-z0-9-]{1,12}", idx in any::<u64>(), ts in 0.0f64..1e9) {
        let msgs = [
            ClientMessage::Frame { session_id: id.clone(), frame_index: idx, timestamp_ms: ts, image_b64: "AA==".into() },
            ClientMessage::OpenPlayback { sweep_path: format!("/data/{id}.json") },
            ClientMessage::Close { session_id: Some(id.clone()) },
            ClientMessage::Close { session_id: None },
        ];
        for m in msgs {
            prop_assert_eq!(parse_client_message(&serde_json::to_string(&m).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn frame_payload_round_trips_at_8_bits(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let frame = Frame::from_fn(w, h, |x, y| {
            ((seed.wrapping_add((x * 31 + y * 17) as u64) % 256) as f32) / 255.0
        });
        let back = decode_frame_payload(&encode_frame_payload(&frame)).unwrap();
        prop_assert_eq!(back.to_u8(), frame.to_u8());
        prop_assert_eq!((back.width(), back.height()), (w, h));
    }
}
