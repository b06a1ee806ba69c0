//! Training runs and cross-validated evaluation built from the lower-level
//! modules.

use crate::data::{augment, make_batch, make_folds, make_stratified_folds, AugmentConfig, Dataset, FoldSplit};
use crate::encoder::{backward, forward, init_params, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    classification_metrics, knn_classify, linear_probe, macro_auc, mean_std, KnnConfig, MetricsReport,
};
use crate::linalg::{dot, Mat, SeededRng};
use crate::loss::{batch_loss, batch_loss_gradient, EmbeddingBatch, LossConfig, LossMode};
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hidden and output sizes; the input size comes from the dataset.
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub loss: LossConfig,
    pub mode: LossMode,
    pub batch_patients: usize,
    pub epochs: u64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![128],
            embedding_dim: crate::encoder::DEFAULT_EMBEDDING_DIM,
            loss: LossConfig::default(),
            mode: LossMode::Ours,
            batch_patients: crate::data::DEFAULT_BATCH_PATIENTS,
            epochs: 200,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    /// The loss configuration with the mode's term flags applied. Only the
    /// `Ours` mode honours the user's term flags.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            LossMode::Ours => self.loss,
            m => self.loss.with_mode(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Batch loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Encoder inputs for one step: anchor rows, positive-view rows, and the rows
/// used as second-modality queries. `views_are_modality` marks batches where
/// the modality rows alias the view rows.
struct StepInputs {
    anchors: Mat,
    views: Mat,
    modality: Option<Mat>,
}

fn step_inputs(dataset: &Dataset, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<StepInputs> {
    let n = cfg.batch_patients.min(dataset.len());
    match cfg.mode {
        LossMode::Ours => {
            let b = make_batch(dataset, n, &cfg.augment, rng)?;
            Ok(StepInputs { anchors: b.fundus, views: b.transformed, modality: Some(b.modality) })
        }
        LossMode::EnlargedData => {
            // every image is its own instance: n fundus + n second-modality
            let patients = rng.sample_indices(dataset.len(), n);
            let dim = dataset.input_dim();
            let mut anchors = Mat::zeros(2 * n, dim);
            let mut views = Mat::zeros(2 * n, dim);
            for (row, &p) in patients.iter().enumerate() {
                let s = &dataset.samples[p];
                for (offset, img) in [(0, &s.fundus), (n, &s.modality)] {
                    anchors.row_mut(row + offset).copy_from_slice(&augment(img, &cfg.augment, rng).to_input());
                    views.row_mut(row + offset).copy_from_slice(&augment(img, &cfg.augment, rng).to_input());
                }
            }
            Ok(StepInputs { anchors, views, modality: None })
        }
        LossMode::AsAugmentation => {
            // the second modality is one more random view of the fundus image
            let patients = rng.sample_indices(dataset.len(), n);
            let dim = dataset.input_dim();
            let mut anchors = Mat::zeros(n, dim);
            let mut views = Mat::zeros(n, dim);
            for (row, &p) in patients.iter().enumerate() {
                let s = &dataset.samples[p];
                anchors.row_mut(row).copy_from_slice(&augment(&s.fundus, &cfg.augment, rng).to_input());
                let src = if rng.bernoulli(0.5) { &s.modality } else { &s.fundus };
                views.row_mut(row).copy_from_slice(&augment(src, &cfg.augment, rng).to_input());
            }
            Ok(StepInputs { anchors, views, modality: None })
        }
    }
}

/// One optimization step; returns the batch loss before the update.
fn train_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    inputs: StepInputs,
    loss_cfg: &LossConfig,
    epoch: u64,
) -> Result<f64> {
    let n = inputs.anchors.rows();
    let mut parts = vec![&inputs.anchors, &inputs.views];
    if let Some(m) = &inputs.modality {
        parts.push(m);
    }
    let x = Mat::vstack(&parts)?;
    let (e, trace) = forward(params, &x, true)?;
    let trace = trace.expect("trace requested");
    let anchors = e.slice_rows(0, n);
    let views = e.slice_rows(n, 2 * n);
    let modality = if inputs.modality.is_some() { e.slice_rows(2 * n, 3 * n) } else { views.clone() };
    let batch = EmbeddingBatch::new(anchors, views, modality)?;
    let loss = batch_loss(&batch, loss_cfg)?.total;
    let g = batch_loss_gradient(&batch, loss_cfg)?;
    let d_e = if inputs.modality.is_some() {
        Mat::vstack(&[&g.fundus, &g.transformed, &g.modality])?
    } else {
        let mut dv = g.transformed.clone();
        for (a, b) in dv.as_mut_slice().iter_mut().zip(g.modality.as_slice()) {
            *a += b;
        }
        Mat::vstack(&[&g.fundus, &dv])?
    };
    let grads = backward(params, &trace, &d_e)?;
    adam.step(params, &grads, epoch)?;
    Ok(loss)
}

/// Self-supervised training on `dataset`; labels are never read.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<TrainOutcome> {
    let loss_cfg = cfg.effective_loss();
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientPatients { requested: cfg.batch_patients, available: 0 });
    }
    let mut init_rng = rng.fork();
    let mut params = init_params(&cfg.layer_dims(dataset.input_dim()), &mut init_rng)?;
    let mut adam = AdamState::for_params(cfg.adam, &params);
    let mut losses = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let inputs = step_inputs(dataset, cfg, rng)?;
        let loss = train_step(&mut params, &mut adam, inputs, &loss_cfg, epoch)?;
        if !loss.is_finite() {
            return Err(Error::NumericalOverflow(format!("loss became {loss} at epoch {epoch}")));
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Unit-norm embeddings of unaugmented inputs.
pub fn embed(params: &EncoderParams, inputs: &Mat) -> Result<Mat> {
    Ok(forward(params, inputs, false)?.0)
}

/// Mean cosine similarity between each patient's fundus and second-modality embeddings.
pub fn modality_alignment(params: &EncoderParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(f64::NAN);
    }
    let f = embed(params, &dataset.fundus_inputs())?;
    let g = embed(params, &dataset.modality_inputs())?;
    let total: f64 = f.row_iter().zip(g.row_iter()).map(|(a, b)| dot(a, b)).sum();
    Ok(total / dataset.len() as f64)
}

/// KNN evaluation of held-out fundus embeddings against training embeddings.
/// `k` is capped at the training-set size.
pub fn knn_evaluate(params: &EncoderParams, train: &Dataset, test: &Dataset, knn: &KnnConfig) -> Result<MetricsReport> {
    let train_emb = embed(params, &train.fundus_inputs())?;
    let test_emb = embed(params, &test.fundus_inputs())?;
    let cfg = KnnConfig { k: knn.k.min(train.len()), ..*knn };
    let n_classes = train.n_classes.max(test.n_classes);
    let out = knn_classify(&train_emb, &train.labels(), &test_emb, n_classes, &cfg)?;
    let mut report = classification_metrics(&out.predictions, &test.labels(), n_classes)?;
    report.auc = Some(macro_auc(&out.class_scores, &test.labels(), n_classes)?);
    Ok(report)
}

/// Linear-probe evaluation on frozen fundus embeddings.
pub fn probe_evaluate(
    params: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    lr: f64,
) -> Result<MetricsReport> {
    let train_emb = embed(params, &train.fundus_inputs())?;
    let test_emb = embed(params, &test.fundus_inputs())?;
    let n_classes = train.n_classes.max(test.n_classes);
    Ok(linear_probe(&train_emb, &train.labels(), &test_emb, &test.labels(), n_classes, epochs, lr)?.report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub folds: usize,
    /// Evaluate only the first this-many folds (all when `None`).
    pub max_folds: Option<usize>,
    /// Balance classes across folds.
    pub stratify: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { train: TrainConfig::default(), knn: KnnConfig::default(), folds: 5, max_folds: None, stratify: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
    /// Mean fundus/second-modality cosine over the fold's training patients.
    pub train_alignment: f64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
    pub auc: Summary,
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub alignment: Summary,
}

impl CvReport {
    /// Flat `key = value` report: per-fold records, then mean and std per metric.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "# fields: fold\tn_train\tn_test\talignment\t{}", crate::eval::RECORD_FIELDS.join("\t")).unwrap();
        for f in &self.folds {
            writeln!(
                out,
                "fold\t{}\t{}\t{}\t{}\t{}",
                f.fold,
                f.n_train,
                f.n_test,
                f.train_alignment,
                f.metrics.to_record()
            )
            .unwrap();
        }
        for (name, s) in [
            ("auc", &self.auc),
            ("accuracy", &self.accuracy),
            ("precision", &self.precision),
            ("recall", &self.recall),
            ("f1", &self.f1),
            ("alignment", &self.alignment),
        ] {
            writeln!(out, "{name}.mean = {}", s.mean).unwrap();
            writeln!(out, "{name}.std = {}", s.std).unwrap();
        }
        out
    }
}

fn summarize(xs: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = xs.collect();
    let (mean, std) = mean_std(&v);
    Summary { mean, std }
}

/// Splits `dataset` positions into (train, test) for one fold.
pub fn fold_partition(dataset: &Dataset, split: &FoldSplit, fold: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if split.assignments[&s.patient_id] == fold {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

/// The fold assignment `run_cv` uses; `rng` is the first fork of the run's seed.
pub fn cv_split(dataset: &Dataset, cfg: &CvConfig, rng: &mut SeededRng) -> Result<FoldSplit> {
    if cfg.stratify {
        make_stratified_folds(&dataset.ids(), &dataset.labels(), cfg.folds, rng)
    } else {
        make_folds(&dataset.ids(), cfg.folds, rng)
    }
}

/// k-fold cross-validation: per fold, self-supervised training on the other
/// folds, then frozen-feature KNN on the held-out fold.
pub fn run_cv(dataset: &Dataset, cfg: &CvConfig, seed: u64) -> Result<CvReport> {
    let mut master = SeededRng::new(seed);
    let split = cv_split(dataset, cfg, &mut master.fork())?;
    let n_eval = cfg.max_folds.unwrap_or(cfg.folds).min(cfg.folds);
    let mut folds = Vec::with_capacity(n_eval);
    for fold in 0..n_eval {
        let mut fold_rng = master.fork();
        let (train_idx, test_idx) = fold_partition(dataset, &split, fold);
        let train_set = dataset.subset(&train_idx);
        let test_set = dataset.subset(&test_idx);
        let outcome = train(&train_set, &cfg.train, &mut fold_rng)?;
        let metrics = knn_evaluate(&outcome.params, &train_set, &test_set, &cfg.knn).map_err(|e| match e {
            Error::SingleClass(_) => Error::SingleClass(Some(format!("fold {fold}"))),
            other => other,
        })?;
        folds.push(FoldResult {
            fold,
            n_train: train_set.len(),
            n_test: test_set.len(),
            train_alignment: modality_alignment(&outcome.params, &train_set)?,
            first_loss: outcome.losses.first().copied(),
            last_loss: outcome.losses.last().copied(),
            metrics,
        });
    }
    Ok(CvReport {
        auc: summarize(folds.iter().map(|f| f.metrics.auc.unwrap_or(f64::NAN))),
        accuracy: summarize(folds.iter().map(|f| f.metrics.accuracy)),
        precision: summarize(folds.iter().map(|f| f.metrics.precision)),
        recall: summarize(folds.iter().map(|f| f.metrics.recall)),
        f1: summarize(folds.iter().map(|f| f.metrics.f1)),
        alignment: summarize(folds.iter().map(|f| f.train_alignment)),
        split,
        folds,
    })
}
