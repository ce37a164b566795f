use std::collections::BTreeMap;

use proptest::prelude::*;
use rmipn_core::evalkit::{evaluate, polygon_iou};
use rmipn_core::geometry::Polygon;

fn squares(cells: &[(u8, u8, u8)]) -> Vec<Polygon> {
    cells
        .iter()
        .map(|&(x, y, s)| {
            let (x, y) = (f64::from(x % 8) * 20.0, f64::from(y % 8) * 20.0);
            let s = 6.0 + f64::from(s % 10);
            Polygon::rect(x, y, x + s, y + s).unwrap()
        })
        .collect()
}

proptest! {
    #[test]
    fn metrics_ignore_prediction_and_image_order(
        gt in prop::collection::vec((any::<u8>(), any::<u8>(), any::<u8>()), 1..8),
        pred in prop::collection::vec((any::<u8>(), any::<u8>(), any::<u8>()), 0..10),
        rot in 0usize..10,
    ) {
        let g = squares(&gt);
        let mut p = squares(&pred);
        let gts = BTreeMap::from([("x".to_string(), g.clone()), ("y".to_string(), g.clone())]);
        let preds = BTreeMap::from([("x".to_string(), p.clone()), ("y".to_string(), Vec::new())]);
        let a = evaluate(&preds, &gts, 0.5).unwrap();
        if !p.is_empty() {
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
        }
        let preds2 = BTreeMap::from([("y".to_string(), Vec::new()), ("x".to_string(), p)]);
        let b = evaluate(&preds2, &gts, 0.5).unwrap();
        prop_assert_eq!((a.matched, a.recall, a.precision, a.fmeasure), (b.matched, b.recall, b.precision, b.fmeasure));
        prop_assert!(a.matched <= a.gt_count.min(a.pred_count));
        prop_assert!(a.fmeasure <= 1.0 && a.fmeasure >= 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0f64..20.0, 0.0f64..20.0, 2.0f64..15.0), b in (0.0f64..20.0, 0.0f64..20.0, 2.0f64..15.0)) {
        let pa = Polygon::rect(a.0, a.1, a.0 + a.2, a.1 + a.2).unwrap();
        let pb = Polygon::rect(b.0, b.1, b.0 + b.2, b.1 + b.2).unwrap();
        let (x, y) = (polygon_iou(&pa, &pb), polygon_iou(&pb, &pa));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn f_is_one_only_for_perfect_matching() {
    let g = squares(&[(0, 0, 4), (2, 2, 4), (4, 1, 4)]);
    let gts = BTreeMap::from([("a".to_string(), g.clone())]);
    assert_eq!(evaluate(&gts, &gts, 0.5).unwrap().fmeasure, 1.0);
    let mut extra = g.clone();
    extra.push(Polygon::rect(150.0, 150.0, 160.0, 160.0).unwrap());
    let r = evaluate(&BTreeMap::from([("a".to_string(), extra)]), &gts, 0.5).unwrap();
    assert!(r.fmeasure < 1.0);
    let r = evaluate(&BTreeMap::from([("a".to_string(), g[..2].to_vec())]), &gts, 0.5).unwrap();
    assert!(r.fmeasure < 1.0);
}
