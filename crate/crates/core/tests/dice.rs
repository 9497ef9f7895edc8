//! Dice overlap: unit cases and properties.

use ndarray::Array2;
use proptest::prelude::*;

use semicontrast::eval::{average_scores, dice_score, DiceAccumulator};

fn mask(side: usize, on: &[(usize, usize)]) -> Array2<i32> {
    let mut m = Array2::zeros((side, side));
    for &p in on {
        m[p] = 1;
    }
    m
}

#[test]
fn unit_cases() {
    let a = mask(4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert_eq!(dice_score(a.view(), a.view(), 2).unwrap().mean, Some(1.0));
    let b = mask(4, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
    assert_eq!(dice_score(a.view(), b.view(), 2).unwrap().mean, Some(0.0));
    // 4 and 4 pixels sharing 2: 2 * 2 / 8
    let c = mask(4, &[(0, 0), (0, 1), (2, 2), (2, 3)]);
    assert_eq!(dice_score(a.view(), c.view(), 2).unwrap().mean, Some(0.5));
}

#[test]
fn absent_classes_are_left_out() {
    let z = Array2::<i32>::zeros((3, 3));
    let s = dice_score(z.view(), z.view(), 3).unwrap();
    assert_eq!(s.per_class, vec![None, None]);
    assert_eq!(s.mean, None);
    let avg = average_scores(&[s, dice_score(mask(3, &[(0, 0)]).view(), mask(3, &[(0, 0)]).view(), 3).unwrap()]);
    assert_eq!(avg.per_class, vec![Some(1.0), None]);
    assert_eq!(avg.mean, Some(1.0));
}

#[test]
fn out_of_range_classes_are_rejected() {
    let a = Array2::from_elem((2, 2), 3);
    assert!(dice_score(a.view(), a.view(), 3).is_err());
    assert!(dice_score(a.view(), Array2::zeros((2, 3)).view(), 4).is_err());
}

fn label_pair(h: usize, w: usize) -> impl Strategy<Value = (Array2<i32>, Array2<i32>)> {
    let cells = proptest::collection::vec(0i32..4, h * w);
    (cells.clone(), cells)
        .prop_map(move |(a, b)| (Array2::from_shape_vec((h, w), a).unwrap(), Array2::from_shape_vec((h, w), b).unwrap()))
}

fn label_map() -> impl Strategy<Value = (Array2<i32>, Array2<i32>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| label_pair(h, w))
}

/// Two prediction/truth pairs of equal width.
fn stacked_maps() -> impl Strategy<Value = ((Array2<i32>, Array2<i32>), (Array2<i32>, Array2<i32>))> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(h1, h2, w)| (label_pair(h1, w), label_pair(h2, w)))
}

proptest! {
    #[test]
    fn dice_is_symmetric_bounded_and_one_on_identity((a, b) in label_map()) {
        let ab = dice_score(a.view(), b.view(), 4).unwrap();
        let ba = dice_score(b.view(), a.view(), 4).unwrap();
        prop_assert_eq!(&ab, &ba);
        for d in ab.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(d));
        }
        let aa = dice_score(a.view(), a.view(), 4).unwrap();
        for (k, d) in aa.per_class.iter().enumerate() {
            let present = a.iter().any(|&v| v == k as i32 + 1);
            prop_assert_eq!(*d, present.then_some(1.0));
        }
    }

    #[test]
    fn pooling_equals_concatenation(((a, b), (c, d)) in stacked_maps()) {
        let mut acc = DiceAccumulator::new(4);
        acc.add(a.view(), b.view()).unwrap();
        acc.add(c.view(), d.view()).unwrap();
        let top = ndarray::concatenate(ndarray::Axis(0), &[a.view(), c.view()]).unwrap();
        let bottom = ndarray::concatenate(ndarray::Axis(0), &[b.view(), d.view()]).unwrap();
        prop_assert_eq!(acc.scores(), dice_score(top.view(), bottom.view(), 4).unwrap());
    }
}
