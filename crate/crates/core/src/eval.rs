//! Frozen-feature evaluation: nearest-neighbour classification, ranking and
//! confusion metrics, a softmax linear probe, two-sample t-tests and a 2-D
//! principal-component projection for plotting.

use std::fmt::Write as _;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

pub const DEFAULT_KNN_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Vote {
    Majority,
    /// Each neighbour votes with weight `exp(similarity / temperature)`.
    SimilarityWeighted { temperature: f64 },
}

impl Vote {
    pub fn as_str(&self) -> &'static str {
        match self {
            Vote::Majority => "majority",
            Vote::SimilarityWeighted { .. } => "weighted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub vote: Vote,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: DEFAULT_KNN_K, vote: Vote::Majority }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutput {
    pub predictions: Vec<usize>,
    /// Per query, the (weighted) fraction of neighbours in each class.
    pub class_scores: Vec<Vec<f64>>,
}

impl KnnOutput {
    /// Class-1 neighbour fraction per query, the score used for binary AUC.
    pub fn positive_scores(&self) -> Vec<f64> {
        self.class_scores.iter().map(|s| s.get(1).copied().unwrap_or(0.0)).collect()
    }
}

/// Indices of the `k` rows of `train` most similar to `query`, best first;
/// equal similarities keep the lower training index first.
pub fn nearest_neighbors(train: &Mat, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> = train.row_iter().map(|r| dot(r, query)).enumerate().collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    sims
}

/// Classifies each query row by a vote among its `cfg.k` most cosine-similar
/// training rows (embeddings are unit-norm, so cosine is the dot product).
/// Vote ties go to the class with the larger summed similarity, then to the
/// lower class index.
pub fn knn_classify(
    train_emb: &Mat,
    train_labels: &[usize],
    query_emb: &Mat,
    n_classes: usize,
    cfg: &KnnConfig,
) -> Result<KnnOutput> {
    let n = train_emb.rows();
    if n == 0 {
        return Err(Error::EmptyTrainSet);
    }
    if train_labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: train_labels.len() });
    }
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::KTooLarge { k: cfg.k, n });
    }
    if query_emb.cols() != train_emb.cols() {
        return Err(Error::DimensionMismatch { expected: train_emb.cols(), got: query_emb.cols() });
    }
    let n_classes = n_classes.max(train_labels.iter().max().map_or(0, |m| m + 1));
    let mut predictions = Vec::with_capacity(query_emb.rows());
    let mut class_scores = Vec::with_capacity(query_emb.rows());
    for q in query_emb.row_iter() {
        let neighbors = nearest_neighbors(train_emb, q, cfg.k);
        let mut votes = vec![0.0; n_classes];
        let mut sim_sum = vec![0.0; n_classes];
        for &(idx, sim) in &neighbors {
            let c = train_labels[idx];
            votes[c] += match cfg.vote {
                Vote::Majority => 1.0,
                Vote::SimilarityWeighted { temperature } => (sim / temperature).exp(),
            };
            sim_sum[c] += sim;
        }
        let mut best = 0;
        for c in 1..n_classes {
            let better = votes[c] > votes[best] || (votes[c] == votes[best] && sim_sum[c] > sim_sum[best]);
            if better {
                best = c;
            }
        }
        let total: f64 = votes.iter().sum();
        predictions.push(best);
        class_scores.push(votes.iter().map(|v| v / total).collect());
    }
    Ok(KnnOutput { predictions, class_scores })
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(None));
    }
    // midranks over the pooled scores
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives among `labels`. For two classes this is the class-1 AUC.
pub fn macro_auc(class_scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if class_scores.len() != labels.len() {
        return Err(Error::LengthMismatch { left: class_scores.len(), right: labels.len() });
    }
    if n_classes == 2 {
        let s: Vec<f64> = class_scores.iter().map(|s| s[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&s, &l);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        if l.iter().all(|&b| b) || !l.iter().any(|&b| b) {
            continue;
        }
        let s: Vec<f64> = class_scores.iter().map(|s| s[c]).collect();
        total += auc(&s, &l)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::SingleClass(None));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Absent when no ranking scores were supplied.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: labels.len() });
    }
    let mut cm = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Config(format!("class index {} out of range for {n_classes} classes", p.max(l))));
        }
        cm[l][p] += 1;
    }
    Ok(cm)
}

/// Accuracy and macro-averaged precision, recall and F1. Ratios with a zero
/// denominator are 0.
pub fn classification_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    let cm = confusion_matrix(preds, labels, n_classes)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = cm[c][c];
            let predicted: usize = (0..n_classes).map(|l| cm[l][c]).sum();
            let actual: usize = cm[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassMetrics { precision, recall, f1, support: actual }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes.max(1) as f64;
    let correct: usize = (0..n_classes).map(|c| cm[c][c]).sum();
    Ok(MetricsReport {
        auc: None,
        accuracy: ratio(correct, preds.len()),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}

/// Field order of [`MetricsReport::to_record`].
pub const RECORD_FIELDS: [&str; 5] = ["auc", "accuracy", "precision", "recall", "f1"];

impl MetricsReport {
    /// One `key = value` line per metric, then per-class lines.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let auc = self.auc.map_or("na".to_string(), |a| a.to_string());
        writeln!(out, "auc = {auc}").unwrap();
        writeln!(out, "accuracy = {}", self.accuracy).unwrap();
        writeln!(out, "precision = {}", self.precision).unwrap();
        writeln!(out, "recall = {}", self.recall).unwrap();
        writeln!(out, "f1 = {}", self.f1).unwrap();
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(out, "class{c}.precision = {}", m.precision).unwrap();
            writeln!(out, "class{c}.recall = {}", m.recall).unwrap();
            writeln!(out, "class{c}.f1 = {}", m.f1).unwrap();
            writeln!(out, "class{c}.support = {}", m.support).unwrap();
        }
        out
    }

    /// Tab-separated values in [`RECORD_FIELDS`] order, then
    /// precision/recall/F1 for each class.
    pub fn to_record(&self) -> String {
        let mut fields = vec![
            self.auc.map_or("na".to_string(), |a| a.to_string()),
            self.accuracy.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
        ];
        for m in &self.per_class {
            fields.extend([m.precision.to_string(), m.recall.to_string(), m.f1.to_string()]);
        }
        fields.join("\t")
    }
}

/// Affine softmax classifier trained on frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `n_classes × d`.
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        LinearProbe { weights: Mat::zeros(n_classes, dim), bias: vec![0.0; n_classes] }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.row_iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    /// Highest logit; ties resolve to the lower class index.
    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        x.row_iter()
            .map(|r| {
                let z = self.logits(r);
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean cross-entropy over the rows of `x` and its gradient.
    pub fn loss_and_grad(&self, x: &Mat, labels: &[usize]) -> (f64, LinearProbe) {
        let n = x.rows().max(1) as f64;
        let mut grad = LinearProbe::zeros(self.weights.rows(), self.weights.cols());
        let mut loss = 0.0;
        for (r, &y) in x.row_iter().zip(labels) {
            let z = self.logits(r);
            let lse = crate::linalg::log_sum_exp(&z);
            loss += lse - z[y];
            for (c, &zc) in z.iter().enumerate() {
                let g = ((zc - lse).exp() - if c == y { 1.0 } else { 0.0 }) / n;
                grad.bias[c] += g;
                for (w, &xv) in grad.weights.row_mut(c).iter_mut().zip(r) {
                    *w += g * xv;
                }
            }
        }
        (loss / n, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub report: MetricsReport,
    pub final_train_loss: f64,
}

/// Trains a zero-initialized softmax layer by full-batch gradient descent on
/// the training embeddings and reports metrics on the test embeddings.
pub fn linear_probe(
    train_emb: &Mat,
    train_labels: &[usize],
    test_emb: &Mat,
    test_labels: &[usize],
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<ProbeResult> {
    if n_classes < 2 {
        return Err(Error::Config("linear probe needs at least two classes".into()));
    }
    if train_emb.rows() != train_labels.len() {
        return Err(Error::LengthMismatch { left: train_emb.rows(), right: train_labels.len() });
    }
    if test_emb.rows() != test_labels.len() {
        return Err(Error::LengthMismatch { left: test_emb.rows(), right: test_labels.len() });
    }
    if train_emb.rows() == 0 {
        return Err(Error::EmptyTrainSet);
    }
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut probe = LinearProbe::zeros(n_classes, train_emb.cols());
    let mut last = probe.loss_and_grad(train_emb, train_labels).0;
    for _ in 0..epochs {
        let (loss, g) = probe.loss_and_grad(train_emb, train_labels);
        last = loss;
        for (w, gw) in probe.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
            *w -= lr * gw;
        }
        for (b, gb) in probe.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    if epochs > 0 {
        last = probe.loss_and_grad(train_emb, train_labels).0;
    }
    let preds = probe.predict(test_emb);
    let mut report = classification_metrics(&preds, test_labels, n_classes)?;
    let scores: Vec<Vec<f64>> = test_emb
        .row_iter()
        .map(|r| {
            let z = probe.logits(r);
            let lse = crate::linalg::log_sum_exp(&z);
            z.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect();
    report.auc = macro_auc(&scores, test_labels, n_classes).ok();
    Ok(ProbeResult { probe, report, final_train_loss: last })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and matching unit eigenvectors as rows.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(r, k)] = v[(k, i)];
        }
    }
    (values, vectors)
}

/// Sample covariance (divisor `n − 1`) of the rows of `x`, and the column means.
pub fn covariance(x: &Mat) -> (Mat, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Mat::zeros(d, d);
    for r in x.row_iter() {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (cov, mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2 {
    /// `n × 2` coordinates.
    pub coords: Mat,
    /// `2 × d` principal directions.
    pub components: Mat,
    pub explained_variance: [f64; 2],
}

/// Projects mean-centered rows onto the top two principal directions. Each
/// direction's sign makes its largest-magnitude loading positive.
pub fn pca_project2(x: &Mat) -> Result<Projection2> {
    if x.rows() < 2 {
        return Err(Error::InsufficientSamples { a: x.rows(), b: x.rows() });
    }
    let (cov, mean) = covariance(x);
    let (values, vectors) = symmetric_eigen(&cov);
    let scale = x.as_slice().iter().fold(0.0f64, |m, v| m.max(v * v));
    if !(values.first().copied().unwrap_or(0.0) > 1e-24 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateCovariance);
    }
    let d = x.cols();
    let mut components = Mat::zeros(2, d);
    for c in 0..2.min(d) {
        let mut v = vectors.row(c).to_vec();
        let mut pivot = 0;
        for k in 1..d {
            if v[k].abs() > v[pivot].abs() {
                pivot = k;
            }
        }
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.row_mut(c).copy_from_slice(&v);
    }
    let mut coords = Mat::zeros(x.rows(), 2);
    for (i, r) in x.row_iter().enumerate() {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        coords[(i, 0)] = dot(&c, components.row(0));
        coords[(i, 1)] = dot(&c, components.row(1));
    }
    let ev = |i: usize| values.get(i).copied().unwrap_or(0.0).max(0.0);
    Ok(Projection2 { coords, components, explained_variance: [ev(0), ev(1)] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom,
/// via the regularized incomplete beta function.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Independent two-sample t-test with pooled variance.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples { a: a.len(), b: b.len() });
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |s: &[f64], m: f64| s.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    if pooled == 0.0 {
        if ma == mb {
            return Ok(TTest { t: 0.0, df, p: 1.0 });
        }
        return Err(Error::DegenerateTest);
    }
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(TTest { t, df, p: t_two_sided_p(t, df) })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
