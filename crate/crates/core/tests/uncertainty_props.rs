//! Property tests for the uncertainty mathematics.

use fskd_core::grid::Mat2;
use fskd_core::tensor::Tensor;
use fskd_core::uncertainty::{
    fuse_covariances, nll_covariance, nll_precision, precision_from_factor, uc_loss,
    uncertainty_ellipse,
};
use proptest::prelude::*;

fn spd_from(values: &[f64], k: usize, d: usize) -> Tensor {
    let q = Tensor::new(vec![k, d], values[..k * d].to_vec()).unwrap();
    precision_from_factor(&q, 0.05).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn precision_covariance_duality_holds(
        raw in proptest::collection::vec(-2.0..2.0f64, 16),
        x in proptest::collection::vec(-1.5..1.5f64, 2),
        v in proptest::collection::vec(-1.5..1.5f64, 2),
    ) {
        let sigma = spd_from(&raw, 2, 6);
        let l = fskd_core::linalg::cholesky(sigma.data(), 2).unwrap();
        let inv = fskd_core::linalg::chol_inverse(&l, 2);
        let omega = Tensor::new(vec![2, 2], inv).unwrap();
        let a = nll_covariance(&x, &v, &sigma).unwrap();
        let b = nll_precision(&x, &v, &omega).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "gap {}", (a - b).abs());
    }

    #[test]
    fn uc_loss_with_zero_beta_is_exact_nll(
        raw in proptest::collection::vec(-2.0..2.0f64, 16),
        x in proptest::collection::vec(-1.0..1.0f64, 2),
        w in 0.05..1.0f64,
    ) {
        let omega = spd_from(&raw, 2, 6);
        let a = uc_loss(&x, &[0.0, 0.0], &omega, &[w], 0.0).unwrap();
        let b = nll_precision(&x, &[0.0, 0.0], &omega).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fused_covariance_stays_symmetric_psd(
        raws in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 8), 1..4),
    ) {
        let scales = [8usize, 12, 16];
        let sigmas: Vec<(Mat2, usize)> = raws
            .iter()
            .enumerate()
            .map(|(i, raw)| {
                let t = spd_from(raw, 2, 4);
                let m: Mat2 = [[t.at2(0, 0), t.at2(0, 1)], [t.at2(1, 0), t.at2(1, 1)]];
                (m, scales[i % scales.len()])
            })
            .collect();
        let fused = fuse_covariances(&sigmas, 384.0).unwrap();
        prop_assert!((fused[0][1] - fused[1][0]).abs() < 1e-9);
        let trace = fused[0][0] + fused[1][1];
        let det = fused[0][0] * fused[1][1] - fused[0][1] * fused[1][0];
        prop_assert!(trace >= -1e-9 && det >= -1e-6, "trace {trace} det {det}");
    }

    #[test]
    fn ellipse_reconstruction_roundtrip(
        raw in proptest::collection::vec(-2.0..2.0f64, 8),
    ) {
        let t = spd_from(&raw, 2, 4);
        let sigma: Mat2 = [[t.at2(0, 0), t.at2(0, 1)], [t.at2(1, 0), t.at2(1, 1)]];
        let e = uncertainty_ellipse(sigma).unwrap();
        let l1 = (e.semi_axes[0] / 3.0).powi(2);
        let l2 = (e.semi_axes[1] / 3.0).powi(2);
        let (c, s) = (e.angle.cos(), e.angle.sin());
        let rec = [
            [c * c * l1 + s * s * l2, c * s * (l1 - l2)],
            [c * s * (l1 - l2), s * s * l1 + c * c * l2],
        ];
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((rec[i][j] - sigma[i][j]).abs() < 1e-9);
            }
        }
        prop_assert!((e.strength - (e.semi_axes[0] + e.semi_axes[1])).abs() < 1e-12);
    }
}
