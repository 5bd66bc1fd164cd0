use num_rational::Ratio;
use proptest::prelude::*;
use vigil_core::decode::{BBox, Detection};
use vigil_core::evalkit::{average_precision, match_detections, metrics, GroundTruth, ScoredMatch};

/// AP by evaluating every score threshold directly, in exact arithmetic.
fn oracle_ap(scored: &[(u32, bool)], gt_count: usize) -> Ratio<i64> {
    let mut thresholds: Vec<u32> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_unstable();
    thresholds.dedup();
    let points: Vec<(Ratio<i64>, Ratio<i64>)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<_> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as i64;
            (Ratio::new(tp, gt_count as i64), Ratio::new(tp, kept.len() as i64))
        })
        .collect();
    let mut recalls: Vec<Ratio<i64>> = points.iter().map(|p| p.0).collect();
    recalls.sort();
    recalls.dedup();
    let mut area = Ratio::from_integer(0);
    let mut prev = Ratio::from_integer(0);
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).max().unwrap();
        area += (r - prev) * best;
        prev = r;
    }
    area
}

fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Up to 8 detections over up to 4 ground truths, scores on a coarse grid so
/// ties occur.
fn instance() -> impl Strategy<Value = (Vec<(u32, bool)>, usize)> {
    (1usize..=4).prop_flat_map(|gt| {
        prop::collection::vec((1u32..=6, any::<bool>()), 0..=8).prop_map(move |mut dets| {
            let mut hits = 0;
            for d in dets.iter_mut() {
                if d.1 {
                    if hits == gt {
                        d.1 = false;
                    } else {
                        hits += 1;
                    }
                }
            }
            (dets, gt)
        })
    })
}

fn scored(dets: &[(u32, bool)], f: impl Fn(u32) -> f64) -> Vec<ScoredMatch> {
    dets.iter()
        .map(|&(s, tp)| ScoredMatch {
            confidence: f(s),
            true_positive: tp,
        })
        .collect()
}

fn boxes() -> impl Strategy<Value = Vec<(usize, [f64; 4])>> {
    prop::collection::vec((0usize..3, 0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0), 0..10)
        .prop_map(|v| v.into_iter().map(|(c, x, y, w, h)| (c, [x, y, x + w, y + h])).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ap_matches_threshold_oracle((dets, gt) in instance()) {
        let ap = average_precision(&scored(&dets, |s| s as f64 / 10.0), gt).unwrap();
        prop_assert!((ap - to_f64(oracle_ap(&dets, gt))).abs() <= 1e-12);
    }

    #[test]
    fn ap_depends_only_on_ranking((dets, gt) in instance()) {
        let base = average_precision(&scored(&dets, |s| s as f64 / 10.0), gt);
        let cubed = average_precision(&scored(&dets, |s| (s as f64).powi(3) * 7.0 + 2.0), gt);
        let logit = average_precision(&scored(&dets, |s| (s as f64 / 7.0).ln()), gt);
        prop_assert_eq!(base, cubed);
        prop_assert_eq!(base, logit);
    }

    #[test]
    fn matching_conserves_counts(dets in boxes(), gts in boxes(), scores in prop::collection::vec(0.0f64..1.0, 10)) {
        let dets: Vec<Detection> = dets
            .iter()
            .zip(&scores)
            .map(|(&(c, b), &s)| Detection {
                bbox: BBox::corner(b[0], b[1], b[2], b[3]),
                class_id: c,
                class_name: String::new(),
                confidence: s,
                frame_id: None,
            })
            .collect();
        let gts: Vec<GroundTruth> = gts.iter().map(|&(c, b)| GroundTruth::new(0, c, b, None).unwrap()).collect();
        let m = match_detections(&dets, &gts, 0.6).unwrap();
        prop_assert_eq!(m.counts.tp + m.counts.fn_, gts.len() as u64);
        prop_assert_eq!(m.counts.tp + m.counts.fp, dets.len() as u64);
        prop_assert_eq!(m.counts.tn, 0);

        let mut claimed: Vec<usize> = m.matches.iter().filter_map(|e| e.ground_truth).collect();
        let n = claimed.len();
        claimed.sort_unstable();
        claimed.dedup();
        prop_assert_eq!(claimed.len(), n, "a ground truth matched twice");

        let r = metrics(&m.counts);
        for v in [r.accuracy, r.precision, r.recall].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn oracle_reference_rankings() {
    assert_eq!(oracle_ap(&[(2, true), (1, false)], 1), Ratio::from_integer(1));
    assert_eq!(oracle_ap(&[(2, false), (1, true)], 1), Ratio::new(1, 2));
}
