//! Feed-forward embedding network: affine layers with rectifiers between them,
//! no activation on the last layer, then row-wise l2 normalization.
//!
//! Reverse mode is hand-written; [`backward`] consumes the [`Trace`] kept by
//! [`forward`].

use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat, SeededRng, NORM_EPS};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;

const MAGIC: &[u8; 8] = b"PEMBENC\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layer_dims: Vec<usize>,
    /// `weights[l]` is `layer_dims[l+1] × layer_dims[l]`.
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradients congruent with [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            weights: params.weights.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// All gradient entries, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidDims(format!(
            "need at least input and output sizes, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidDims(format!("layer sizes must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

/// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(layer_dims: &[usize], rng: &mut SeededRng) -> Result<EncoderParams> {
    validate_dims(layer_dims)?;
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut w = Mat::zeros(fan_out, fan_in);
        w.as_mut_slice().iter_mut().for_each(|v| *v = std * rng.normal());
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(EncoderParams { layer_dims: layer_dims.to_vec(), weights, biases })
}

impl EncoderParams {
    /// Builds parameters from explicit weights (`out × in`) and biases.
    pub fn from_layers(weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidDims(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *dims.last().unwrap() || b.len() != w.rows() {
                return Err(Error::InvalidDims(format!(
                    "layer {l}: weight {}x{}, bias {}, previous width {}",
                    w.rows(),
                    w.cols(),
                    b.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(w.rows());
        }
        validate_dims(&dims)?;
        Ok(EncoderParams { layer_dims: dims, weights, biases })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Mutable views of every parameter, layer by layer (weights then bias),
    /// in the same order as [`EncoderGrads::flat`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * (self.layer_dims.len() + self.n_params()));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.as_slice().iter().chain(b) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::format("offset 0", "not an encoder parameter file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("offset 8", format!("unsupported version {version}")));
        }
        let n_dims = r.u32()? as usize;
        let dims = (0..n_dims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        validate_dims(&dims).map_err(|e| Error::format("offset 16", e.to_string()))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let w = r.f64s(pair[0] * pair[1])?;
            weights.push(Mat::from_vec(pair[1], pair[0], w)?);
            biases.push(r.f64s(pair[1])?);
        }
        r.finish()?;
        Ok(EncoderParams { layer_dims: dims, weights, biases })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Intermediate values from [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Mat,
    /// Pre-activation of every layer; the last entry is the pre-norm output.
    pre_activations: Vec<Mat>,
    /// Rectified hidden activations (one per hidden layer).
    activations: Vec<Mat>,
    output_norms: Vec<f64>,
    embeddings: Mat,
}

/// `x Wᵀ + b` for every row of `x`.
fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (o, (wo, bo)) in out.row_mut(i).iter_mut().zip(w.row_iter().zip(b)) {
            *o = dot(xi, wo) + bo;
        }
    }
    out
}

/// Embeds every row of `x`. The trace is returned only when `keep_trace` is set.
pub fn forward(params: &EncoderParams, x: &Mat, keep_trace: bool) -> Result<(Mat, Option<Trace>)> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch { expected: params.input_dim(), got: x.cols() });
    }
    let last = params.n_layers() - 1;
    let mut pre_activations = Vec::new();
    let mut activations = Vec::new();
    let mut h = x.clone();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let z = affine(&h, w, b);
        if l == last {
            h = z.clone();
        } else {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            h = a.clone();
            if keep_trace {
                activations.push(a);
            }
        }
        if keep_trace {
            pre_activations.push(z);
        }
    }
    let mut norms = Vec::with_capacity(h.rows());
    for i in 0..h.rows() {
        let row = h.row_mut(i);
        let n = norm(row);
        if !(n > NORM_EPS) {
            return Err(Error::ZeroVector { norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    let trace = keep_trace.then(|| Trace {
        input: x.clone(),
        pre_activations,
        activations,
        output_norms: norms,
        embeddings: h.clone(),
    });
    Ok((h, trace))
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the unit-norm embeddings.
pub fn backward(params: &EncoderParams, trace: &Trace, d_embeddings: &Mat) -> Result<EncoderGrads> {
    let n_layers = params.n_layers();
    if trace.pre_activations.len() != n_layers || trace.activations.len() + 1 != n_layers {
        return Err(Error::TraceMismatch(format!(
            "trace has {} layers, parameters have {n_layers}",
            trace.pre_activations.len()
        )));
    }
    for (l, (z, w)) in trace.pre_activations.iter().zip(&params.weights).enumerate() {
        if z.cols() != w.rows() {
            return Err(Error::TraceMismatch(format!(
                "layer {l}: trace width {} vs weight rows {}",
                z.cols(),
                w.rows()
            )));
        }
    }
    if trace.input.cols() != params.input_dim() {
        return Err(Error::TraceMismatch("input width differs from parameters".into()));
    }
    let e = &trace.embeddings;
    if d_embeddings.rows() != e.rows() || d_embeddings.cols() != e.cols() {
        return Err(Error::TraceMismatch(format!(
            "gradient is {}x{}, embeddings are {}x{}",
            d_embeddings.rows(),
            d_embeddings.cols(),
            e.rows(),
            e.cols()
        )));
    }

    // Through the normalization: dz = (I − e eᵀ) de / ||z||.
    let mut dz = Mat::zeros(e.rows(), e.cols());
    for i in 0..e.rows() {
        let (ei, gi) = (e.row(i), d_embeddings.row(i));
        let proj = dot(ei, gi);
        let inv = 1.0 / trace.output_norms[i];
        for ((o, &ev), &gv) in dz.row_mut(i).iter_mut().zip(ei).zip(gi) {
            *o = (gv - ev * proj) * inv;
        }
    }

    let mut grads = EncoderGrads::zeros_like(params);
    for l in (0..n_layers).rev() {
        let input = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        for i in 0..dz.rows() {
            let (dzi, xi) = (dz.row(i), input.row(i));
            for (o, &g) in dzi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (w, &xv) in gw.row_mut(o).iter_mut().zip(xi) {
                    *w += g * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        // dA = dZ W, then mask by the rectifier (subgradient 0 at 0).
        let w = &params.weights[l];
        let z_prev = &trace.pre_activations[l - 1];
        let mut d_prev = Mat::zeros(dz.rows(), w.cols());
        for i in 0..dz.rows() {
            let out = d_prev.row_mut(i);
            for (o, &g) in dz.row(i).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (a, &wv) in out.iter_mut().zip(w.row(o)) {
                    *a += g * wv;
                }
            }
            for (a, &zv) in out.iter_mut().zip(z_prev.row(i)) {
                if zv <= 0.0 {
                    *a = 0.0;
                }
            }
        }
        dz = d_prev;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&[4, 2], &mut SeededRng::new(5)).unwrap();
        let b = init_params(&[4, 2], &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_shapes() {
        let p = init_params(&[4, 8, 128], &mut SeededRng::new(1)).unwrap();
        assert_eq!((p.weights[0].rows(), p.weights[0].cols()), (8, 4));
        assert_eq!((p.weights[1].rows(), p.weights[1].cols()), (128, 8));
        assert_eq!(p.biases[0].len(), 8);
        assert_eq!(p.biases[1].len(), 128);
        assert!(p.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let p = init_params(&[256, 64, 128], &mut SeededRng::new(99)).unwrap();
        for (w, fan_in) in p.weights.iter().zip([256.0, 64.0]) {
            let vals = w.as_slice();
            assert!(vals.len() >= 8192);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let target = 2.0 / fan_in;
            assert!((var - target).abs() / target < 0.3, "var {var} target {target}");
        }
    }

    #[test]
    fn invalid_dims() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(init_params(&[4], &mut rng), Err(Error::InvalidDims(_))));
        assert!(matches!(init_params(&[4, 0, 2], &mut rng), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn identity_network() {
        let p = EncoderParams::from_layers(vec![Mat::identity(2)], vec![vec![0.0; 2]]).unwrap();
        let x = Mat::from_vec(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        let (e, trace) = forward(&p, &x, false).unwrap();
        assert!(trace.is_none());
        assert_eq!(e.row(0), &[1.0, 0.0]);
        assert!((e[(1, 0)] - 0.6).abs() < 1e-15 && (e[(1, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_output_is_an_error() {
        let p = EncoderParams::from_layers(vec![Mat::identity(2)], vec![vec![0.0; 2]]).unwrap();
        let x = Mat::zeros(1, 2);
        assert!(matches!(forward(&p, &x, false), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let p = init_params(&[5, 4, 3], &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(4);
        let mut x = Mat::zeros(2, 5);
        x.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        let (_, trace) = forward(&p, &x, true).unwrap();
        let g = backward(&p, &trace.unwrap(), &Mat::zeros(2, 3)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_trace_rejected() {
        let p = init_params(&[5, 4, 3], &mut SeededRng::new(3)).unwrap();
        let q = init_params(&[5, 3], &mut SeededRng::new(3)).unwrap();
        let x = Mat::from_vec(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (_, trace) = forward(&q, &x, true).unwrap();
        assert!(matches!(backward(&p, &trace.unwrap(), &Mat::zeros(1, 3)), Err(Error::TraceMismatch(_))));
    }

    #[test]
    fn bytes_round_trip() {
        let p = init_params(&[6, 5, 4], &mut SeededRng::new(8)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(EncoderParams::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(EncoderParams::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EncoderParams::from_bytes(&bad).is_err());
    }
}
