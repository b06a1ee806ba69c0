//! Patient-level softmax embedding objective.
//!
//! For a batch of `n` patients with fundus embeddings `f`, transformed-fundus
//! embeddings `f̂` and second-modality embeddings `g` (all unit rows), every
//! query vector `q` induces a softmax over the fundus rows:
//!
//! ```text
//! P(i | q) = exp(f_i·q / τ) / Σ_k exp(f_k·q / τ)
//! ```
//!
//! Patient `i` wants its own transformed image and second-modality image
//! recognized as `i` (positive concentration) and every other patient's
//! fundus and second-modality image *not* recognized as `i` (negative
//! separation):
//!
//! ```text
//! L_i = −log P(i|f̂_i) − log P_m(i|g_i) − Σ_{j≠i} log(1 − P(i|f_j)) − Σ_{j≠i} log(1 − P(i|g_j))
//! L   = (1/n) Σ_i L_i
//! ```
//!
//! `P_m` subtracts an optional margin from the numerator logit only. Every
//! softmax is evaluated in log space with max-shift stabilization, and
//! `log(1 − P)` is computed as a log-sum-exp over the other logits so it stays
//! accurate when `P` is close to 1.

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm, Mat};

/// Row norms must be within this of 1.
pub const UNIT_NORM_TOL: f64 = 1e-8;

/// Three aligned `n × d` embedding matrices; row `i` of each belongs to patient `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    fundus: Mat,
    transformed: Mat,
    modality: Mat,
}

impl EmbeddingBatch {
    pub fn new(fundus: Mat, transformed: Mat, modality: Mat) -> Result<Self> {
        let (n, d) = (fundus.rows(), fundus.cols());
        if n == 0 {
            return Err(Error::ShapeMismatch("embedding batch needs at least one patient".into()));
        }
        for (name, m) in [("transformed", &transformed), ("modality", &modality)] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{name} embeddings are {}x{}, fundus embeddings are {n}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, m) in [("fundus", &fundus), ("transformed", &transformed), ("modality", &modality)] {
            for (i, row) in m.row_iter().enumerate() {
                let r = norm(row);
                if !((r - 1.0).abs() <= UNIT_NORM_TOL) {
                    return Err(Error::ShapeMismatch(format!(
                        "{name} embedding row {i} has norm {r}, expected 1"
                    )));
                }
            }
        }
        Ok(EmbeddingBatch { fundus, transformed, modality })
    }

    pub fn n(&self) -> usize {
        self.fundus.rows()
    }

    pub fn dim(&self) -> usize {
        self.fundus.cols()
    }

    pub fn fundus(&self) -> &Mat {
        &self.fundus
    }

    pub fn transformed(&self) -> &Mat {
        &self.transformed
    }

    pub fn modality(&self) -> &Mat {
        &self.modality
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange { index: i, len: self.n() });
        }
        Ok(())
    }
}

/// How the second modality enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Triplet objective with both positive terms and both negative families.
    Ours,
    /// Every fundus and second-modality image is its own instance (2n
    /// singletons, no pairing); only the transform positive is used.
    EnlargedData,
    /// The second-modality image is one more random view of the fundus image;
    /// only the transform positive is used.
    AsAugmentation,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ours => "ours",
            LossMode::EnlargedData => "enlarged-data",
            LossMode::AsAugmentation => "as-augmentation",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(LossMode::Ours),
            "enlarged-data" => Ok(LossMode::EnlargedData),
            "as-augmentation" => Ok(LossMode::AsAugmentation),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected ours, enlarged-data or as-augmentation)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which terms are active and how sharp the softmax is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    /// Subtracted from the second-modality positive logit only.
    pub margin: f64,
    pub use_transform_term: bool,
    pub use_modality_term: bool,
    pub use_negative_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            margin: 0.0,
            use_transform_term: true,
            use_modality_term: true,
            use_negative_terms: true,
        }
    }
}

impl LossConfig {
    /// Term flags for a training mode, keeping `tau` and `margin` from `self`.
    pub fn with_mode(self, mode: LossMode) -> Self {
        match mode {
            LossMode::Ours => LossConfig {
                use_transform_term: true,
                use_modality_term: true,
                use_negative_terms: true,
                ..self
            },
            LossMode::EnlargedData | LossMode::AsAugmentation => LossConfig {
                use_transform_term: true,
                use_modality_term: false,
                use_negative_terms: true,
                ..self
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if !(self.use_transform_term || self.use_modality_term) {
            return Err(Error::InvalidConfig("at least one positive term must be enabled".into()));
        }
        if !self.use_negative_terms {
            return Err(Error::InvalidConfig("negative terms must be enabled".into()));
        }
        Ok(())
    }

    // Probability helpers only need a usable temperature; the term flags are
    // irrelevant to them.
    fn check_tau(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Batch loss and its per-patient breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_patient: Vec<f64>,
}

/// Gradients of the batch loss with respect to each embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub fundus: Mat,
    pub transformed: Mat,
    pub modality: Mat,
}

/// Which matrix a negative-pair query row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryModality {
    Fundus,
    Modality,
}

/// Softmax over fundus rows for one query vector, kept in log space.
struct QuerySoftmax {
    logits: Vec<f64>,
    lse: f64,
}

impl QuerySoftmax {
    fn new(fundus: &Mat, query: &[f64], tau: f64) -> Self {
        let logits: Vec<f64> = fundus.row_iter().map(|f| dot(f, query) / tau).collect();
        let lse = log_sum_exp(&logits);
        QuerySoftmax { logits, lse }
    }

    fn log_prob(&self, i: usize) -> f64 {
        self.logits[i] - self.lse
    }

    fn prob(&self, i: usize) -> f64 {
        self.log_prob(i).exp()
    }

    /// `log Σ_{k≠i} exp(z_k)`.
    fn lse_excluding(&self, i: usize) -> f64 {
        let m = self
            .logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &z)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        let s: f64 = self
            .logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &z)| (z - m).exp())
            .sum();
        m + s.ln()
    }

    /// `log(1 − P(i|q))`.
    fn log_one_minus_prob(&self, i: usize) -> f64 {
        let p = self.prob(i);
        if p < 0.5 {
            (-p).ln_1p()
        } else {
            self.lse_excluding(i) - self.lse
        }
    }

    /// `P(i|q) / (1 − P(i|q))`, computed without forming `1 − P`.
    fn odds(&self, i: usize) -> f64 {
        let p = self.prob(i);
        if p < 0.5 {
            p / (1.0 - p)
        } else {
            (self.logits[i] - self.lse_excluding(i)).exp()
        }
    }
}

fn finite_log(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalOverflow(what()))
    }
}

/// Probability that patient `i`'s transformed image is recognized as patient `i`.
pub fn positive_prob_transform(batch: &EmbeddingBatch, i: usize, cfg: &LossConfig) -> Result<f64> {
    cfg.check_tau()?;
    batch.check_index(i)?;
    let sm = QuerySoftmax::new(&batch.fundus, batch.transformed.row(i), cfg.tau);
    Ok(sm.prob(i))
}

/// Probability that patient `i`'s second-modality image is recognized as
/// patient `i`, with `cfg.margin` subtracted from the numerator similarity.
pub fn positive_prob_modality(batch: &EmbeddingBatch, i: usize, cfg: &LossConfig) -> Result<f64> {
    cfg.check_tau()?;
    batch.check_index(i)?;
    let sm = QuerySoftmax::new(&batch.fundus, batch.modality.row(i), cfg.tau);
    Ok((sm.log_prob(i) - cfg.margin / cfg.tau).exp())
}

/// Probability that patient `j`'s image of the given modality is recognized as
/// patient `i` (`i ≠ j`). The denominator runs over all patients, `j` included.
pub fn negative_prob(
    batch: &EmbeddingBatch,
    i: usize,
    j: usize,
    query: QueryModality,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.check_tau()?;
    batch.check_index(i)?;
    batch.check_index(j)?;
    if i == j {
        return Err(Error::SameIndex(i));
    }
    let q = match query {
        QueryModality::Fundus => batch.fundus.row(j),
        QueryModality::Modality => batch.modality.row(j),
    };
    Ok(QuerySoftmax::new(&batch.fundus, q, cfg.tau).prob(i))
}

/// Negative log likelihood `L_i` for one patient.
pub fn patient_loss(batch: &EmbeddingBatch, i: usize, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    batch.check_index(i)?;
    let tau = cfg.tau;
    let mut loss = 0.0;
    if cfg.use_transform_term {
        let sm = QuerySoftmax::new(&batch.fundus, batch.transformed.row(i), tau);
        loss -= finite_log(sm.log_prob(i), || format!("log P(i|transformed) for patient {i}"))?;
    }
    if cfg.use_modality_term {
        let sm = QuerySoftmax::new(&batch.fundus, batch.modality.row(i), tau);
        let lp = sm.log_prob(i) - cfg.margin / tau;
        loss -= finite_log(lp, || format!("log P(i|modality) for patient {i}"))?;
    }
    if cfg.use_negative_terms {
        for j in (0..batch.n()).filter(|&j| j != i) {
            for q in [batch.fundus.row(j), batch.modality.row(j)] {
                let sm = QuerySoftmax::new(&batch.fundus, q, tau);
                loss -= finite_log(sm.log_one_minus_prob(i), || {
                    format!("log(1 - P({i}|{j})) underflowed")
                })?;
            }
        }
    }
    Ok(loss)
}

/// Per-query softmaxes shared by the loss and its gradient.
struct BatchSoftmaxes {
    transformed: Vec<QuerySoftmax>,
    modality: Vec<QuerySoftmax>,
    fundus: Vec<QuerySoftmax>,
}

impl BatchSoftmaxes {
    fn new(batch: &EmbeddingBatch, tau: f64) -> Self {
        let build = |m: &Mat| -> Vec<QuerySoftmax> {
            m.row_iter().map(|q| QuerySoftmax::new(&batch.fundus, q, tau)).collect()
        };
        BatchSoftmaxes {
            transformed: build(&batch.transformed),
            modality: build(&batch.modality),
            fundus: build(&batch.fundus),
        }
    }
}

/// Mean patient loss over the batch.
pub fn batch_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    let n = batch.n();
    let tau = cfg.tau;
    let sms = BatchSoftmaxes::new(batch, tau);
    let mut per_patient = vec![0.0; n];
    for (i, li) in per_patient.iter_mut().enumerate() {
        if cfg.use_transform_term {
            *li -= finite_log(sms.transformed[i].log_prob(i), || {
                format!("log P(i|transformed) for patient {i}")
            })?;
        }
        if cfg.use_modality_term {
            let lp = sms.modality[i].log_prob(i) - cfg.margin / tau;
            *li -= finite_log(lp, || format!("log P(i|modality) for patient {i}"))?;
        }
    }
    if cfg.use_negative_terms {
        // Query j contributes log(1 − P(i|q_j)) to every patient i ≠ j; walk
        // patients in the outer loop so each L_i sums in a fixed order.
        for (i, li) in per_patient.iter_mut().enumerate() {
            for j in (0..n).filter(|&j| j != i) {
                for sm in [&sms.fundus[j], &sms.modality[j]] {
                    *li -= finite_log(sm.log_one_minus_prob(i), || {
                        format!("log(1 - P({i}|{j})) underflowed")
                    })?;
                }
            }
        }
    }
    let total = per_patient.iter().sum::<f64>() / n as f64;
    Ok(LossValue { total, per_patient })
}

/// Exact gradient of [`batch_loss`] with respect to every entry of the three
/// embedding matrices. Gradients flow through both sides of every inner
/// product and through every softmax denominator.
pub fn batch_loss_gradient(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossGradient> {
    cfg.validate()?;
    let n = batch.n();
    let d = batch.dim();
    let tau = cfg.tau;
    let scale = 1.0 / (n as f64 * tau);
    let sms = BatchSoftmaxes::new(batch, tau);

    let mut grad = LossGradient {
        fundus: Mat::zeros(n, d),
        transformed: Mat::zeros(n, d),
        modality: Mat::zeros(n, d),
    };
    // dL/dz for one query; z_k = f_k·q/τ. Then
    //   dL/df_k += (dL/dz_k) q / τ   and   dL/dq += Σ_k (dL/dz_k) f_k / τ.
    let mut dz = vec![0.0; n];

    let push = |dz: &[f64], query: &[f64], query_grad: &mut [f64], fundus_grad: &mut Mat| {
        for (k, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let c = g * scale;
            for (o, &qv) in fundus_grad.row_mut(k).iter_mut().zip(query) {
                *o += c * qv;
            }
            for (o, &fv) in query_grad.iter_mut().zip(batch.fundus.row(k)) {
                *o += c * fv;
            }
        }
    };

    for qi in 0..n {
        // transformed query: positive term only
        if cfg.use_transform_term {
            let sm = &sms.transformed[qi];
            for (k, g) in dz.iter_mut().enumerate() {
                *g = sm.prob(k) - if k == qi { 1.0 } else { 0.0 };
            }
            let mut qg = vec![0.0; d];
            push(&dz, batch.transformed.row(qi), &mut qg, &mut grad.fundus);
            add_into(grad.transformed.row_mut(qi), &qg);
        }

        // modality query: positive term for patient qi, negative terms for all others
        let sm = &sms.modality[qi];
        dz.iter_mut().for_each(|g| *g = 0.0);
        if cfg.use_modality_term {
            for (k, g) in dz.iter_mut().enumerate() {
                *g += sm.prob(k) - if k == qi { 1.0 } else { 0.0 };
            }
        }
        if cfg.use_negative_terms {
            add_negative_dz(sm, qi, &mut dz);
        }
        let mut qg = vec![0.0; d];
        push(&dz, batch.modality.row(qi), &mut qg, &mut grad.fundus);
        add_into(grad.modality.row_mut(qi), &qg);

        // fundus query: negative terms only
        if cfg.use_negative_terms {
            let sm = &sms.fundus[qi];
            dz.iter_mut().for_each(|g| *g = 0.0);
            add_negative_dz(sm, qi, &mut dz);
            let mut qg = vec![0.0; d];
            push(&dz, batch.fundus.row(qi), &mut qg, &mut grad.fundus);
            add_into(grad.fundus.row_mut(qi), &qg);
        }
    }
    Ok(grad)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `d/dz Σ_{i≠j} −log(1 − P(i|q_j))` into `dz`, where `q_j` is the
/// query owned by patient `j`:
/// `dz_k += [k≠j]·r_k − p_k·Σ_{i≠j} r_i` with odds `r_i = P_i / (1 − P_i)`.
fn add_negative_dz(sm: &QuerySoftmax, j: usize, dz: &mut [f64]) {
    let n = dz.len();
    let odds: Vec<f64> = (0..n).map(|i| if i == j { 0.0 } else { sm.odds(i) }).collect();
    let total: f64 = odds.iter().sum();
    for (k, g) in dz.iter_mut().enumerate() {
        *g += odds[k] - sm.prob(k) * total;
    }
}
