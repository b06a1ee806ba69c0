#![allow(dead_code)]

use patient_embed::encoder::{backward, forward, EncoderParams};
use patient_embed::linalg::{Mat, SeededRng};
use patient_embed::loss::{batch_loss, batch_loss_gradient, EmbeddingBatch, LossConfig};

pub fn random_mat(rows: usize, cols: usize, rng: &mut SeededRng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    m.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
    m
}

/// Embeds `3n` stacked input rows (anchors, views, second modality) and
/// evaluates the batch loss.
pub fn end_to_end_loss(params: &EncoderParams, x: &Mat, cfg: &LossConfig) -> f64 {
    let n = x.rows() / 3;
    let (e, _) = forward(params, x, false).unwrap();
    let batch = EmbeddingBatch::new(e.slice_rows(0, n), e.slice_rows(n, 2 * n), e.slice_rows(2 * n, 3 * n)).unwrap();
    batch_loss(&batch, cfg).unwrap().total
}

/// Analytic parameter gradient of [`end_to_end_loss`], flattened.
pub fn end_to_end_grad(params: &EncoderParams, x: &Mat, cfg: &LossConfig) -> Vec<f64> {
    let n = x.rows() / 3;
    let (e, trace) = forward(params, x, true).unwrap();
    let batch = EmbeddingBatch::new(e.slice_rows(0, n), e.slice_rows(n, 2 * n), e.slice_rows(2 * n, 3 * n)).unwrap();
    let g = batch_loss_gradient(&batch, cfg).unwrap();
    let d_e = Mat::vstack(&[&g.fundus, &g.transformed, &g.modality]).unwrap();
    backward(params, &trace.unwrap(), &d_e).unwrap().flat()
}

/// Central differences of `f` over every parameter, in flat order.
pub fn fd_param_grad(params: &EncoderParams, h: f64, f: impl Fn(&EncoderParams) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.n_params());
    let mut work = params.clone();
    let sizes: Vec<usize> = work.param_slices_mut().iter().map(|s| s.len()).collect();
    for (block, &len) in sizes.iter().enumerate() {
        for idx in 0..len {
            let orig = work.param_slices_mut()[block][idx];
            work.param_slices_mut()[block][idx] = orig + h;
            let plus = f(&work);
            work.param_slices_mut()[block][idx] = orig - h;
            let minus = f(&work);
            work.param_slices_mut()[block][idx] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

/// Largest `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max)
}

pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Mat {
    let mut m = random_mat(rows, cols, rng);
    patient_embed::linalg::l2_normalize_rows(&mut m).unwrap();
    m
}

pub fn random_batch(n: usize, d: usize, rng: &mut SeededRng) -> EmbeddingBatch {
    EmbeddingBatch::new(random_unit_rows(n, d, rng), random_unit_rows(n, d, rng), random_unit_rows(n, d, rng)).unwrap()
}

/// Orthogonal `d × d` matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(d: usize, rng: &mut SeededRng) -> Mat {
    let mut q = Mat::zeros(d, d);
    let mut done = 0;
    while done < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for r in 0..done {
            let p = patient_embed::linalg::dot(&v, q.row(r));
            v.iter_mut().zip(q.row(r)).for_each(|(a, b)| *a -= p * b);
        }
        if let Ok(u) = patient_embed::linalg::l2_normalize(&v) {
            if patient_embed::linalg::norm(&v) > 1e-6 {
                q.row_mut(done).copy_from_slice(&u);
                done += 1;
            }
        }
    }
    q
}

/// Rows of `m` multiplied by the orthogonal matrix `r`.
pub fn rotate_rows(m: &Mat, r: &Mat) -> Mat {
    m.matmul(&r.transpose()).unwrap()
}
