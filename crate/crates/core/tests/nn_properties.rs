mod common;

use common::*;
use factrfm::nn::{feature_estimates, forward_backward, Activation, EstimateKind, Layer, MlpModel, Regularization};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_net(seed: u64) -> (MlpModel, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let act = [Activation::Relu, Activation::Quadratic, Activation::Identity][(seed % 3) as usize];
    let dims = [3 + (seed % 3) as usize, 5, 4, 2];
    let model = MlpModel::init(&dims, act, seed % 2 == 0, seed).unwrap();
    let x = gaussian_matrix(&mut r, 7, dims[0], 1.0);
    let y = gaussian_matrix(&mut r, 7, 2, 1.0);
    (model, x, y)
}

fn linear_model(w: DMatrix<f64>) -> MlpModel {
    MlpModel::new(vec![Layer { weight: w, bias: None, activation: Activation::Identity }]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn input_gradients_chain_through_the_weights(seed in any::<u64>()) {
        let (model, x, y) = random_net(seed);
        let fb = forward_backward(&model, &x, &y, None, Regularization::new(1e-2)).unwrap();
        for (l, b) in fb.bundle.layers.iter().enumerate() {
            let w = model.weight(l);
            let chained = &b.dl_dwh * w;
            prop_assert!((&b.dl_dh - &chained).norm() <= 1e-10 * chained.norm().max(1.0));
            for (dh, dwh) in b.df_dh.iter().zip(&b.df_dwh) {
                let chained = dwh * w;
                prop_assert!((dh - &chained).norm() <= 1e-10 * chained.norm().max(1.0));
            }
        }
    }

    #[test]
    fn both_identities_hold_at_ridge_optima(seed in any::<u64>(), n in 5usize..40, d in 1usize..6, c in 1usize..4, log_lambda in -4.0f64..0.0) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, n, d, 1.0);
        let y = gaussian_matrix(&mut r, n, c, 1.0);
        let lambda = 10f64.powf(log_lambda);
        let w = ridge_optimum(&x, &y, lambda);
        let est = feature_estimates(&linear_model(w.clone()), &x, &y, None, lambda, 0).unwrap();
        let get = |k: EstimateKind| est.iter().find(|e| e.kind == k).unwrap().matrix.clone();
        prop_assert!(rel(&get(EstimateKind::Fact), &(w.transpose() * &w)) <= 1e-8);
        prop_assert!(rel(&get(EstimateKind::BFact), &(&w * w.transpose())) <= 1e-8);
    }

    #[test]
    fn sample_weights_act_like_repeated_rows(seed in any::<u64>(), repeat in 1usize..4) {
        let (model, x, y) = random_net(seed);
        let n = x.nrows();
        let mut weights = DVector::from_element(n, 1.0);
        weights[0] = 1.0 + repeat as f64;
        let rows: Vec<usize> = (0..n).chain(std::iter::repeat_n(0, repeat)).collect();
        let xr = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
        let yr = DMatrix::from_fn(rows.len(), y.ncols(), |i, j| y[(rows[i], j)]);
        let weighted = feature_estimates(&model, &x, &y, Some(&weights), 1e-2, 0).unwrap();
        let repeated = feature_estimates(&model, &xr, &yr, None, 1e-2, 0).unwrap();
        for (a, b) in weighted.iter().zip(&repeated) {
            prop_assert_eq!(a.kind, b.kind);
            prop_assert!((&a.matrix - &b.matrix).norm() <= 1e-12 * b.matrix.norm().max(1e-12));
        }
    }
}
