use proptest::prelude::*;

use ssr_core::metrics::{miou, ConfusionMatrix};

/// Brute-force IoU per class straight from the definition, counting pixels
/// one pair at a time.
fn brute_force(rows: &[Vec<u64>]) -> (Vec<Option<f64>>, Option<f64>) {
    let k = rows.len();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let (mut inter, mut union) = (0u64, 0u64);
        for t in 0..k {
            for p in 0..k {
                let n = rows[t][p];
                if t == c && p == c {
                    inter += n;
                }
                if t == c || p == c {
                    union += n;
                }
            }
        }
        per_class.push(if union == 0 { None } else { Some(inter as f64 / union as f64) });
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { None } else { Some(present.iter().sum::<f64>() / present.len() as f64) };
    (per_class, mean)
}

fn matrices() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..6).prop_flat_map(|k| {
        // Roughly a third of the cells are zero so that empty classes occur.
        prop::collection::vec(prop::collection::vec(prop_oneof![Just(0u64), 0u64..40], k), k)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 50, ..ProptestConfig::default() })]

    #[test]
    fn miou_matches_brute_force(rows in matrices()) {
        let (per_class, mean) = brute_force(&rows);
        let conf = ConfusionMatrix::from_rows(&rows).unwrap();
        match mean {
            None => prop_assert!(miou(&conf).is_err()),
            Some(m) => {
                let report = miou(&conf).unwrap();
                prop_assert_eq!(&report.per_class_iou, &per_class);
                prop_assert_eq!(report.miou, m);
            }
        }
    }

    #[test]
    fn relabelling_classes_permutes_the_report(rows in matrices(), shift in 1usize..5) {
        let k = rows.len();
        let perm = |c: usize| (c + shift) % k;
        let mut permuted = vec![vec![0u64; k]; k];
        for t in 0..k {
            for p in 0..k {
                permuted[perm(t)][perm(p)] = rows[t][p];
            }
        }
        let a = miou(&ConfusionMatrix::from_rows(&rows).unwrap());
        let b = miou(&ConfusionMatrix::from_rows(&permuted).unwrap());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                for c in 0..k {
                    prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm(c)]);
                }
                prop_assert!((a.miou - b.miou).abs() <= 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one of the two matrices was empty"),
        }
    }
}

#[test]
fn zero_union_classes_are_excluded() {
    // Class 2 never appears in truth or prediction.
    let conf = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 4, 0], vec![0, 0, 0]]).unwrap();
    let report = miou(&conf).unwrap();
    assert_eq!(report.per_class_iou, vec![Some(0.75), Some(0.8), None]);
    assert_eq!(report.miou, (0.75 + 0.8) / 2.0);
}
