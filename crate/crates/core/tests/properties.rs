use proptest::prelude::*;

use sdt_core::eval::{average_precision, bin_index, final_score, num_bins};
use sdt_core::fnda::build_masks;
use sdt_core::geometry::{iou, pairwise_distances, BBox};

fn boxes(max: usize) -> impl Strategy<Value = Vec<BBox>> {
    prop::collection::vec((0.05..0.95f64, 0.05..0.95f64, 0.01..0.3f64, 0.01..0.3f64), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h)| BBox::from_center(x, y, w, h).unwrap())
            .collect()
    })
}

proptest! {
    #[test]
    fn masks_cover_every_pair_once(bs in boxes(16)) {
        let d = pairwise_distances(&bs).unwrap();
        let m = build_masks(&d);
        let n = bs.len();
        for i in 0..n {
            prop_assert_eq!(m.far[(i, i)], 1.0);
            prop_assert_eq!(m.near[(i, i)], 1.0);
            for j in (0..n).filter(|&j| j != i) {
                prop_assert_eq!(m.far[(i, j)] + m.near[(i, j)], 1.0);
                if m.far[(i, j)] == 1.0 {
                    // anything farther than a far column is far as well
                    for k in 0..n {
                        if k != i && d.get(i, k) > d.get(i, j) {
                            prop_assert_eq!(m.far[(i, k)], 1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(1), b in boxes(1)) {
        let (a, b) = (a[0], b[0]);
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_is_bounded_and_rewards_earlier_hits(tp in prop::collection::vec(any::<bool>(), 0..40), extra in 0usize..5) {
        let hits = tp.iter().filter(|&&t| t).count();
        let ap = average_precision(&tp, hits + extra);
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut sorted = tp.clone();
        sorted.sort_by(|a, b| b.cmp(a));
        prop_assert!(average_precision(&sorted, hits + extra) >= ap - 1e-12);
    }

    #[test]
    fn final_score_is_monotone(s_h in 0.01..1.0f64, s_o in 0.01..1.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64, lambda in 1.0..4.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(final_score(s_h, s_o, lo, lambda) <= final_score(s_h, s_o, hi, lambda));
    }

    #[test]
    fn bins_cover_the_unit_square(d in 0.0..std::f64::consts::SQRT_2) {
        let b = bin_index(d, 0.05);
        prop_assert!(b < num_bins(0.05));
        prop_assert!(b as f64 * 0.05 <= d + 1e-9);
    }
}
