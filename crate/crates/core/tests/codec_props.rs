use metacodec::codec::{mask_from_importance, quantize_st};
use metacodec::{
    apply_mask, crop_image, dequantize, expand_mask, pad_image, quantize, ImageTensor, ImportanceMap, LatentStage,
    LatentTensor,
};
use metacodec_autodiff::{grad, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;

fn latent(data: Vec<f64>, h: usize, w: usize, c: usize) -> LatentTensor {
    LatentTensor { data: Array3::from_shape_vec((h, w, c), data).unwrap(), stage: LatentStage::Raw }
}

#[test]
fn mask_semantics_exhaustive() {
    for c in [1usize, 3, 6, 8] {
        for level in 0..=c {
            let tau_q = level as f64 / c as f64;
            let map = ImportanceMap::from_tau(Array2::from_elem((1, 1), tau_q), c);
            let m = expand_mask(&map, c);
            let col: Vec<u8> = m.data.iter().copied().collect();
            assert!(col.windows(2).all(|w| w[0] >= w[1]), "prefix c={c} level={level}");
            let count: usize = col.iter().map(|&v| v as usize).sum();
            assert_eq!(count, (c as f64 * tau_q).round() as usize, "count c={c} level={level}");
            // The differentiable mask agrees on the grid.
            let st = mask_from_importance(&Var::constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), tau_q)), c);
            assert_eq!(st.value().iter().map(|&v| v as u8).collect::<Vec<_>>(), col);
        }
    }
}

proptest! {
    #[test]
    fn mask_prefix_and_count_for_any_tau(tau in proptest::collection::vec(0.0f64..=1.0, 1..30), c in 1usize..=8) {
        let n = tau.len();
        let map = ImportanceMap::from_tau(Array2::from_shape_vec((1, n), tau).unwrap(), c);
        let m = expand_mask(&map, c);
        for j in 0..n {
            let col: Vec<u8> = (0..c).map(|k| m.data[[0, j, k]]).collect();
            prop_assert!(col.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(col.iter().map(|&v| v as usize).sum::<usize>(), map.levels[[0, j]] as usize);
        }
    }

    #[test]
    fn quantizer_idempotence(vals in proptest::collection::vec(-0.2f64..1.2, 1..64), bits in 1u8..=8) {
        let n = vals.len();
        let y = latent(vals, 1, n, 1);
        let z = quantize(&y, bits);
        let z2 = quantize(&dequantize(&z).unwrap(), bits);
        prop_assert_eq!(&z, &z2);
        prop_assert!(z.data.iter().all(|&s| u32::from(s) < (1u32 << bits)));
    }

    #[test]
    fn straight_through_gradient_equals_identity_gradient(
        vals in proptest::collection::vec(0.0f64..1.0, 1..32),
        weights in proptest::collection::vec(-2.0f64..2.0, 32),
        bits in 1u8..=8,
    ) {
        let n = vals.len();
        let y = Var::param(ArrayD::from_shape_vec(IxDyn(&[n]), vals).unwrap());
        let w = Var::constant(ArrayD::from_shape_vec(IxDyn(&[n]), weights[..n].to_vec()).unwrap());
        // A nonlinear downstream loss: sum(w * v^2).
        let loss = |v: &Var| v.mul(v).mul(&w).sum();
        let q = quantize_st(&y, bits);
        let g_st = grad(&loss(&q), &[&y], false).remove(0);
        // Identity in place of quantization: the loss gradient at the
        // quantized point passes to y unchanged.
        let q_leaf = Var::param(q.value().clone());
        let g_id = grad(&loss(&q_leaf), &[&q_leaf], false).remove(0);
        prop_assert_eq!(g_st.value(), g_id.value());
    }

    #[test]
    fn masked_positions_stay_zero(
        vals in proptest::collection::vec(0.0f64..1.0, 24),
        levels in proptest::collection::vec(0u8..=6, 4),
        bits in 1u8..=8,
    ) {
        let y = latent(vals, 2, 2, 6);
        let map = ImportanceMap { tau: Array2::zeros((2, 2)), levels: Array2::from_shape_vec((2, 2), levels).unwrap(), channels: 6 };
        let m = expand_mask(&map, 6);
        let masked = apply_mask(&y, &m).unwrap();
        let round = dequantize(&quantize(&masked, bits)).unwrap();
        for ((idx, &mv), &v) in m.data.indexed_iter().zip(round.data.iter()) {
            if mv == 0 {
                prop_assert_eq!(v, 0.0, "{:?}", idx);
            }
        }
    }

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..40, w in 1usize..40, s in prop::sample::select(vec![2usize, 4, 8, 16])) {
        let img = ImageTensor::from_fn(h, w, |y, x, c| ((y * 13 + x * 7 + c * 3) % 17) as f64 / 16.0);
        let (p, rec) = pad_image(&img, s);
        prop_assert_eq!(p.height() % s, 0);
        prop_assert_eq!(p.width() % s, 0);
        prop_assert!(p.height() - h < s && p.width() - w < s);
        prop_assert_eq!(crop_image(&p, rec), img);
    }
}
