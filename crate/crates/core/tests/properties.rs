use proptest::prelude::*;

use pointspot::eval::{match_image, match_points, EvalConfig, EvalMode, Outcome};
use pointspot::geometry::{central_point, PointMode};
use pointspot::seqcodec::{build, parse, BuildConfig, Prediction, TextInstance, Vocab};
use pointspot::synth::{render_scene, SceneSpec};

const SIDE: f64 = 200.0;

fn word() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[A-Za-z0-9]{1,8}").unwrap()
}

/// Non-overlapping boxes on a 5x5 grid of 40 px cells.
fn scene() -> impl Strategy<Value = Vec<TextInstance>> {
    proptest::sample::subsequence((0..25usize).collect::<Vec<_>>(), 0..10)
        .prop_flat_map(|cells| {
            let n = cells.len();
            (Just(cells), proptest::collection::vec((word(), any::<bool>(), 4.0..30.0f64, 4.0..30.0f64), n))
        })
        .prop_map(|(cells, attrs)| {
            cells
                .into_iter()
                .zip(attrs)
                .map(|(c, (text, dc, w, h))| {
                    let (x, y) = ((c % 5) as f64 * 40.0 + 2.0, (c / 5) as f64 * 40.0 + 2.0);
                    TextInstance {
                        polygon: vec![[x, y], [x + w, y], [x + w, y + h], [x, y + h]],
                        transcript: text,
                        dont_care: dc,
                    }
                })
                .collect()
        })
}

fn predictions() -> impl Strategy<Value = Vec<Prediction>> {
    proptest::collection::vec(
        ((0.0..SIDE, 0.0..SIDE), word(), 0.0..1.0f64).prop_map(|((x, y), t, s)| Prediction { point: Some([x, y]), transcript: t, score: s }),
        0..12,
    )
}

fn cfg(n_bins: usize) -> BuildConfig {
    BuildConfig { point_mode: PointMode::Central, max_chars: 8, max_instances: 25, image_side: SIDE, n_bins }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trip(instances in scene(), n_bins in 8usize..1200, seed in any::<u64>()) {
        let vocab = Vocab::with_default_charset(n_bins);
        let scored = instances.iter().filter(|i| !i.dont_care).count();
        let built = build(&instances, &vocab, &cfg(n_bins), seed);
        if scored == 0 {
            prop_assert!(built.is_err());
            return Ok(());
        }
        let enc = built.unwrap();
        let preds = parse(&enc.as_decoded(&vocab), &vocab, SIDE, false);
        prop_assert_eq!(preds.len(), scored);
        let tol = SIDE / (2.0 * (n_bins - 1) as f64) + 1e-9;
        for (&orig, p) in enc.permutation.iter().zip(&preds) {
            let c = central_point(&instances[orig].polygon);
            let pt = p.point.unwrap();
            prop_assert!((pt[0] - c[0]).abs() <= tol && (pt[1] - c[1]).abs() <= tol);
            prop_assert!(!instances[orig].dont_care);
            prop_assert_eq!(&p.transcript, &instances[orig].transcript);
        }
    }

    #[test]
    fn counts_partition_predictions_and_ground_truth(gts in scene(), preds in predictions(), npts in any::<bool>()) {
        let cfg = EvalConfig { mode: if npts { EvalMode::Npts } else { EvalMode::Point }, ..Default::default() };
        let r = match_image(&preds, &gts, &cfg);
        let scored = gts.iter().filter(|g| !g.dont_care).count();
        let absorbed = r.matches.iter().filter(|m| m.outcome == Outcome::DontCare).count();
        prop_assert_eq!(r.tp + r.fn_, scored);
        prop_assert_eq!(r.tp + r.fp + absorbed, preds.len());
        prop_assert!(r.tp <= preds.len().min(scored));
    }

    #[test]
    fn ground_truth_as_predictions_scores_perfectly(gts in scene()) {
        let preds: Vec<Prediction> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| Prediction { point: Some(central_point(&g.polygon)), transcript: g.transcript.clone(), score: 1.0 - i as f64 * 0.01 })
            .collect();
        let r = match_points(&preds, &gts, &EvalConfig::default());
        prop_assert_eq!((r.tp, r.fp, r.fn_), (gts.iter().filter(|g| !g.dont_care).count(), 0, 0));
    }

    #[test]
    fn prediction_order_does_not_change_counts(gts in scene(), mut preds in predictions(), rot in 0usize..12) {
        // Distinct scores make the claim order fully determined.
        for (i, p) in preds.iter_mut().enumerate() {
            p.score = i as f64 / 16.0;
        }
        let a = match_points(&preds, &gts, &EvalConfig::default());
        let k = if preds.is_empty() { 0 } else { rot % preds.len() };
        preds.rotate_left(k);
        let b = match_points(&preds, &gts, &EvalConfig::default());
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
    }

    #[test]
    fn synthesis_is_a_function_of_the_seed(seed in any::<u64>()) {
        let spec = SceneSpec { side: 64, n_bins: 64, instances: [0, 4], scale: [1.0, 1.5], min_separation: 4.0, ..Default::default() };
        let a = render_scene(&spec, seed).unwrap();
        let b = render_scene(&spec, seed).unwrap();
        prop_assert_eq!(&a.image.data, &b.image.data);
        prop_assert_eq!(&a.instances, &b.instances);
        for inst in &a.instances {
            for p in &inst.polygon {
                prop_assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= 64.0 && p[1] <= 64.0);
            }
        }
    }
}
