mod common;

use common::{end_to_end_grad, end_to_end_loss, fd_param_grad, max_rel_err, random_mat};
use patient_embed::encoder::{backward, forward, init_params, EncoderParams};
use patient_embed::linalg::{Mat, SeededRng};
use patient_embed::loss::LossConfig;

/// Straight-line forward pass with explicit loops.
fn scalar_forward(p: &EncoderParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = p.n_layers() - 1;
    for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        let mut z = vec![0.0; w.rows()];
        for r in 0..w.rows() {
            let mut acc = b[r];
            for c in 0..w.cols() {
                acc += w[(r, c)] * h[c];
            }
            z[r] = if l < last && acc < 0.0 { 0.0 } else { acc };
        }
        h = z;
    }
    let mut ss = 0.0;
    for v in &h {
        ss += v * v;
    }
    h.iter().map(|v| v / ss.sqrt()).collect()
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = SeededRng::new(5);
    let mut p = init_params(&[7, 9, 6, 5], &mut rng).unwrap();
    for b in &mut p.biases {
        b.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    let x = random_mat(4, 7, &mut rng);
    let (e, _) = forward(&p, &x, false).unwrap();
    for i in 0..4 {
        let oracle = scalar_forward(&p, x.row(i));
        for (a, b) in e.row(i).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = SeededRng::new(8);
    let p = init_params(&[5, 8, 4], &mut rng).unwrap();
    let x = random_mat(6, 5, &mut rng);
    assert_eq!(forward(&p, &x, false).unwrap().0, forward(&p, &x, true).unwrap().0);
}

#[test]
fn tiny_net_end_to_end_gradient() {
    let mut rng = SeededRng::new(31);
    let mut p = init_params(&[6, 5, 4], &mut rng).unwrap();
    p.biases[0].iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    let x = random_mat(9, 6, &mut rng);
    let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
    let analytic = end_to_end_grad(&p, &x, &cfg);
    let fd = fd_param_grad(&p, 1e-6, |q| end_to_end_loss(q, &x, &cfg));
    let err = max_rel_err(&analytic, &fd);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn rectifier_boundary_brackets_reported_gradient() {
    // hidden unit 0 sees pre-activation exactly 0 for input (1, 0)
    let w1 = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.5]).unwrap();
    let w2 = Mat::from_vec(2, 2, vec![1.0, 0.3, -0.7, 1.0]).unwrap();
    let p = EncoderParams::from_layers(vec![w1, w2], vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let x = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let c = [0.4, -1.3];
    let loss = |q: &EncoderParams| {
        let e = forward(q, &x, false).unwrap().0;
        c[0] * e[(0, 0)] + c[1] * e[(0, 1)]
    };
    let (_, trace) = forward(&p, &x, true).unwrap();
    let upstream = Mat::from_vec(1, 2, c.to_vec()).unwrap();
    let reported = backward(&p, &trace.unwrap(), &upstream).unwrap().biases[0][0];
    assert_eq!(reported, 0.0);

    let h = 1e-6;
    let bumped = |delta: f64| {
        let mut q = p.clone();
        q.biases[0][0] += delta;
        loss(&q)
    };
    let right = (bumped(h) - loss(&p)) / h;
    let left = (loss(&p) - bumped(-h)) / h;
    assert!(left.abs() < 1e-9, "inactive side moves the loss: {left}");
    assert!(right.abs() > 1e-3, "active side should move the loss: {right}");
    assert!(left.min(right) <= reported && reported <= left.max(right));
}
