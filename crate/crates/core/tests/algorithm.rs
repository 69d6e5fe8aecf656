//! One training step on a 2x4 sampling matrix, checked against values
//! worked out by hand. With the conv stack zeroed and the residual path on,
//! the network output is the linear map `W y + b`, so the sampling gradient
//! is `(W^T r) x^T` with `r` the reconstruction error.

use dsmm_core::recon::ReconstructionParams;
use dsmm_core::train::{train_step_traced, LossDivisor, OptimizerState, TrainConfig};
use dsmm_core::{SamplingLayerState, Tensor};

const THETA: [f64; 8] = [0.9, -0.2, 0.5, -1.3, 0.1, 0.7, -0.05, 0.4];
const X: [f64; 4] = [0.2, 0.6, 0.9, 0.4];
// W is n_B x n_b = 4 x 2
const W: [[f64; 2]; 4] = [[0.3, -0.1], [0.2, 0.4], [-0.5, 0.25], [0.1, 0.6]];
const BIAS: [f64; 4] = [0.05, -0.02, 0.0, 0.1];
const GAMMA: f64 = 0.07;

fn setup() -> (SamplingLayerState, ReconstructionParams, TrainConfig) {
    let sampling = SamplingLayerState::new(THETA.to_vec(), 2, 2, 0.5).unwrap();
    let mut recon = ReconstructionParams::zeros(2, 2, 4);
    recon.residual = true;
    recon.init.weight = Tensor::new(&[4, 2, 1, 1], W.iter().flatten().copied().collect()).unwrap();
    recon.init.bias = Tensor::new(&[4], BIAS.to_vec()).unwrap();
    let cfg = TrainConfig {
        block_size: 2,
        sampling_ratio: 0.5,
        alpha: 0.5,
        patch_size: 2,
        batch_size: 1,
        momentum: 0.0,
        weight_decay: 0.0,
        loss_divisor: LossDivisor::Batch,
        ..TrainConfig::default()
    };
    (sampling, recon, cfg)
}

#[test]
fn one_step_matches_hand_oracle() {
    // S keeps the four largest magnitudes 1.3, 0.9, 0.7, 0.5
    let s = [[0.9, 0.0, 0.5, -1.3], [0.0, 0.7, 0.0, 0.0]];
    let omega: [f64; 2] = [0.81 + 0.25 + 1.69, 0.49];
    let phi: Vec<Vec<f64>> = (0..2).map(|k| s[k].iter().map(|v| v / omega[k].sqrt()).collect()).collect();
    let f_prime: Vec<Vec<f64>> = (0..2).map(|k| s[k].iter().map(|v| 1.0 - v * v / omega[k]).collect()).collect();

    let y: Vec<f64> = (0..2).map(|k| (0..4).map(|j| phi[k][j] * X[j]).sum()).collect();
    let x_hat: Vec<f64> = (0..4).map(|i| W[i][0] * y[0] + W[i][1] * y[1] + BIAS[i]).collect();
    let r: Vec<f64> = (0..4).map(|i| x_hat[i] - X[i]).collect();
    let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
    let wt_r: Vec<f64> = (0..2).map(|k| (0..4).map(|i| W[i][k] * r[i]).sum()).collect();

    let (mut sampling, mut recon, cfg) = setup();
    let mut opt = OptimizerState::new(&sampling, &recon);
    let batch = Tensor::new(&[1, 1, 2, 2], X.to_vec()).unwrap();
    let trace = train_step_traced(&batch, &mut sampling, &mut recon, &mut opt, GAMMA, &cfg).unwrap();

    assert!((trace.loss - loss).abs() < 1e-15);
    for k in 0..2 {
        for j in 0..4 {
            let g = wt_r[k] * X[j];
            let idx = k * 4 + j;
            assert!((trace.grad_constrained[idx] - g).abs() < 1e-14, "grad {idx}");
            assert!((trace.grad_modulated[idx] - g * f_prime[k][j]).abs() < 1e-14, "modulated {idx}");
            let want = THETA[idx] - GAMMA * g * f_prime[k][j];
            assert!((sampling.theta()[idx] - want).abs() < 1e-12, "theta {idx}");
        }
    }
    // the reconstruction layer takes a plain gradient step
    for i in 0..4 {
        for k in 0..2 {
            let want = W[i][k] - GAMMA * r[i] * y[k];
            assert!((recon.init.weight.data()[i * 2 + k] - want).abs() < 1e-12);
        }
        assert!((recon.init.bias.data()[i] - (BIAS[i] - GAMMA * r[i])).abs() < 1e-12);
    }
}

#[test]
fn saved_parameters_are_restored_bit_exactly() {
    let (mut sampling, mut recon, cfg) = setup();
    let mut opt = OptimizerState::new(&sampling, &recon);
    let batch = Tensor::new(&[1, 1, 2, 2], X.to_vec()).unwrap();
    let trace = train_step_traced(&batch, &mut sampling, &mut recon, &mut opt, GAMMA, &cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&trace.saved_theta), bits(&THETA));
    assert_eq!(bits(&trace.restored_theta), bits(&THETA));
    // a zero step leaves the free parameters bitwise unchanged
    let (mut sampling, mut recon, cfg) = setup();
    let mut opt = OptimizerState::new(&sampling, &recon);
    train_step_traced(&batch, &mut sampling, &mut recon, &mut opt, 0.0, &cfg).unwrap();
    assert_eq!(bits(sampling.theta()), bits(&THETA));
}
