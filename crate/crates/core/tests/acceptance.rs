//! Acceptance suite: one PASS/FAIL line per criterion. With `ACCEPTANCE_STRICT`
//! set, the process exits nonzero if any criterion fails.
//!
//! The learning criteria share cross-validation runs on the default synthetic
//! dataset with the settings in `configs/desk.conf`.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{end_to_end_grad, end_to_end_loss, fd_param_grad, max_rel_err, random_batch, random_mat, random_rotation, random_unit_rows, rotate_rows};
use patient_embed::config::RunConfig;
use patient_embed::data::generate_synthetic;
use patient_embed::encoder::init_params;
use patient_embed::eval::{auc, knn_classify, t_test, KnnConfig, Vote};
use patient_embed::linalg::{dot, Mat, SeededRng};
use patient_embed::loss::{batch_loss, negative_prob, positive_prob_modality, EmbeddingBatch, LossConfig, LossMode, QueryModality};
use patient_embed::pipeline::{run_cv, CvConfig, CvReport};

const DATA_SEED: u64 = 2024;
const CV_SEED: u64 = 7;

struct Line {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    RunConfig::load(&path).expect("configs/desk.conf")
}

fn gradient_check() -> Line {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for &n in &[2usize, 4, 8] {
        for &d in &[4usize, 16] {
            for &tau in &[0.1, 1.0] {
                for _ in 0..2 {
                    let mut p = init_params(&[6, 8, d], &mut rng).unwrap();
                    p.biases[0].iter_mut().for_each(|v| *v = 0.1 * rng.normal());
                    let x = random_mat(3 * n, 6, &mut rng);
                    let cfg = LossConfig { tau, ..LossConfig::default() };
                    let analytic = end_to_end_grad(&p, &x, &cfg);
                    let fd = fd_param_grad(&p, 1e-6, |q| end_to_end_loss(q, &x, &cfg));
                    worst = worst.max(max_rel_err(&analytic, &fd));
                    instances += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 1,
        title: "gradient correctness",
        pass: worst < 1e-5 && instances >= 20 && secs < 60.0,
        detail: format!("max rel err {worst:.2e} over {instances} instances in {secs:.1}s"),
    }
}

fn closed_form_values() -> Line {
    let one = Mat::from_vec(1, 2, vec![0.6, 0.8]).unwrap();
    let single = EmbeddingBatch::new(one.clone(), one.clone(), one).unwrap();
    let l1 = batch_loss(&single, &LossConfig { tau: 0.1, ..LossConfig::default() }).unwrap().total;
    let f = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let pair = EmbeddingBatch::new(f.clone(), f.clone(), f).unwrap();
    let l2 = batch_loss(&pair, &LossConfig { tau: 1.0, ..LossConfig::default() }).unwrap().total;
    Line {
        id: 2,
        title: "closed-form loss values",
        pass: l1 == 0.0 && (l2 - 1.253046).abs() < 1e-5,
        detail: format!("n=1 loss {l1}, n=2 orthogonal loss {l2:.7}"),
    }
}

fn softmax_and_invariance() -> Line {
    let mut rng = SeededRng::new(303);
    let cfg = LossConfig::default();
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        // the query sits in the second-modality slot of patient 0
        let b = random_batch(6, 8, &mut rng);
        let total = positive_prob_modality(&b, 0, &cfg).unwrap()
            + (1..6).map(|i| negative_prob(&b, i, 0, QueryModality::Modality, &cfg).unwrap()).sum::<f64>();
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    let mut worst_inv: f64 = 0.0;
    for _ in 0..20 {
        let b = random_batch(7, 5, &mut rng);
        let base = batch_loss(&b, &cfg).unwrap().total;
        let mut perm: Vec<usize> = (0..7).collect();
        rng.shuffle(&mut perm);
        let p = EmbeddingBatch::new(b.fundus().select_rows(&perm), b.transformed().select_rows(&perm), b.modality().select_rows(&perm)).unwrap();
        let r = random_rotation(5, &mut rng);
        let rot = EmbeddingBatch::new(rotate_rows(b.fundus(), &r), rotate_rows(b.transformed(), &r), rotate_rows(b.modality(), &r)).unwrap();
        for other in [&p, &rot] {
            worst_inv = worst_inv.max((batch_loss(other, &cfg).unwrap().total - base).abs());
        }
    }
    Line {
        id: 3,
        title: "softmax normalization and invariances",
        pass: worst_sum <= 1e-10 && worst_inv <= 1e-10,
        detail: format!("max |sum P - 1| {worst_sum:.1e}, max invariance gap {worst_inv:.1e}"),
    }
}

struct Runs {
    untrained: CvReport,
    ours: CvReport,
    ours_secs: f64,
    ours_again: CvReport,
    enlarged: CvReport,
    transform_only: CvReport,
    modality_only: CvReport,
}

fn cv_with(base: &CvConfig, edit: impl FnOnce(&mut CvConfig)) -> CvConfig {
    let mut c = base.clone();
    edit(&mut c);
    c
}

fn learning_runs() -> Runs {
    let cfg = desk_config();
    let data = generate_synthetic(&cfg.synthetic, &mut SeededRng::new(DATA_SEED)).unwrap();
    let base = cfg.cv.clone();
    let run = |c: &CvConfig| run_cv(&data, c, CV_SEED).expect("cross-validation");
    let untrained = run(&cv_with(&base, |c| c.train.epochs = 0));
    let start = Instant::now();
    let ours = run(&base);
    let ours_secs = start.elapsed().as_secs_f64();
    Runs {
        untrained,
        ours,
        ours_secs,
        ours_again: run(&base),
        enlarged: run(&cv_with(&base, |c| c.train.mode = LossMode::EnlargedData)),
        transform_only: run(&cv_with(&base, |c| c.train.loss.use_modality_term = false)),
        modality_only: run(&cv_with(&base, |c| c.train.loss.use_transform_term = false)),
    }
}

fn learning_works(r: &Runs) -> Line {
    let (before, after) = (r.untrained.accuracy.mean, r.ours.accuracy.mean);
    let per_fold = r.ours_secs / r.ours.folds.len() as f64;
    Line {
        id: 4,
        title: "learning works",
        pass: after >= 0.85 && before <= 0.45 && per_fold < 300.0,
        detail: format!("held-out KNN accuracy {before:.3} untrained -> {after:.3} trained ({per_fold:.0}s per fold)"),
    }
}

fn modality_alignment(r: &Runs) -> Line {
    let (before, after) = (r.untrained.alignment.mean, r.ours.alignment.mean);
    Line {
        id: 5,
        title: "modality alignment",
        pass: after >= 0.8 && before <= 0.3,
        detail: format!("mean cos(f, g) {before:.3} untrained -> {after:.3} trained"),
    }
}

fn ablation_modes(r: &Runs) -> Line {
    let gap = r.ours.accuracy.mean - r.enlarged.accuracy.mean;
    let align_gap = r.ours.alignment.mean - r.enlarged.alignment.mean;
    Line {
        id: 6,
        title: "ours vs enlarged-data",
        pass: gap >= 0.05 && align_gap >= 0.1,
        detail: format!(
            "accuracy {:.3} vs {:.3} (gap {gap:+.3}), alignment {:.3} vs {:.3} (gap {align_gap:+.3})",
            r.ours.accuracy.mean, r.enlarged.accuracy.mean, r.ours.alignment.mean, r.enlarged.alignment.mean
        ),
    }
}

fn term_ablation(r: &Runs) -> Line {
    let full = r.ours.accuracy.mean;
    let (t, m) = (r.transform_only.accuracy.mean, r.modality_only.accuracy.mean);
    Line {
        id: 7,
        title: "term ablation",
        pass: full >= t - 0.01 && full >= m - 0.01,
        detail: format!("accuracy full {full:.3}, transform positive only {t:.3}, modality positive only {m:.3}"),
    }
}

/// Sort-based KNN with the same vote and tie rules as the library.
fn brute_force_knn(train: &Mat, labels: &[usize], q: &[f64], k: usize, n_classes: usize) -> usize {
    let mut sims: Vec<(f64, usize)> = train.row_iter().enumerate().map(|(i, r)| (dot(r, q), i)).collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; n_classes];
    let mut sim_sum = vec![0.0; n_classes];
    for &(s, i) in &sims[..k] {
        votes[labels[i]] += 1;
        sim_sum[labels[i]] += s;
    }
    (0..n_classes)
        .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(sim_sum[a].partial_cmp(&sim_sum[b]).unwrap()).then(b.cmp(&a)))
        .unwrap()
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn oracles() -> Line {
    let mut rng = SeededRng::new(808);
    let train = random_unit_rows(60, 6, &mut rng);
    let labels: Vec<usize> = (0..60).map(|_| rng.below(3)).collect();
    let queries = random_unit_rows(100, 6, &mut rng);
    let mut knn_mismatch = 0;
    for k in [1usize, 7, 20] {
        let out = knn_classify(&train, &labels, &queries, 3, &KnnConfig { k, vote: Vote::Majority }).unwrap();
        for (qi, q) in queries.row_iter().enumerate() {
            if out.predictions[qi] != brute_force_knn(&train, &labels, q, k, 3) {
                knn_mismatch += 1;
            }
        }
    }

    let mut fixtures: Vec<(Vec<f64>, Vec<bool>)> = vec![
        (vec![0.9, 0.8, 0.1, 0.2], vec![true, true, false, false]),
        (vec![0.9, 0.8, 0.7], vec![true, false, true]),
        (vec![0.3; 5], vec![true, false, true, false, false]),
    ];
    for _ in 0..50 {
        let n = 2 + rng.below(30);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        l[0] = true;
        l[1] = false;
        fixtures.push((scores, l));
    }
    let auc_mismatch = fixtures.iter().filter(|(s, l)| auc(s, l).unwrap() != pairwise_auc(s, l)).count();

    let t = t_test(&[2.0, 4.0], &[1.0, 3.0]).unwrap().t;
    let t_err = (t - 1.0 / 2f64.sqrt()).abs();
    Line {
        id: 8,
        title: "oracle equivalence",
        pass: knn_mismatch == 0 && auc_mismatch == 0 && t_err < 1e-10,
        detail: format!(
            "KNN mismatches {knn_mismatch}/300, AUC mismatches {auc_mismatch}/{}, |t - 1/sqrt2| {t_err:.1e}",
            fixtures.len()
        ),
    }
}

fn determinism(r: &Runs) -> Line {
    let (a, b) = (r.ours.to_text(), r.ours_again.to_text());
    Line {
        id: 9,
        title: "determinism",
        pass: a == b,
        detail: format!("two {}-fold runs with seed {CV_SEED}: reports {}", r.ours.folds.len(), if a == b { "identical" } else { "differ" }),
    }
}

fn config_fidelity() -> Line {
    let expected = [
        ("tau", "0.1"),
        ("batch_patients", "75"),
        ("embedding_dim", "128"),
        ("lr", "0.0001"),
        ("decay_factor", "0.1"),
        ("decay_every", "1000"),
        ("k", "100"),
        ("folds", "5"),
    ];
    let entries = RunConfig::default().entries();
    let wrong: Vec<String> = expected
        .iter()
        .filter(|(k, v)| entries.iter().find(|(ek, _)| ek == k).map(|(_, ev)| ev.as_str()) != Some(*v))
        .map(|(k, v)| format!("{k} != {v}"))
        .collect();
    Line {
        id: 10,
        title: "config fidelity",
        pass: wrong.is_empty(),
        detail: if wrong.is_empty() { "defaults match".into() } else { wrong.join(", ") },
    }
}

fn main() {
    let mut lines = vec![gradient_check(), closed_form_values(), softmax_and_invariance()];
    let runs = learning_runs();
    lines.push(learning_works(&runs));
    lines.push(modality_alignment(&runs));
    lines.push(ablation_modes(&runs));
    lines.push(term_ablation(&runs));
    lines.push(oracles());
    lines.push(determinism(&runs));
    lines.push(config_fidelity());
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!("criterion {:>2} {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.title, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
