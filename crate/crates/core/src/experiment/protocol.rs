use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, ModelKind, Protocol};
use super::report::{LossRow, MetricsReport, ProjectionRow, ScoreRow};
use super::ExperimentError;
use crate::data::{build_rotated_mnist, generate_canm, load_idx, make_change_pairs, DomainDataset};
use crate::metrics::{
    accuracy, adjusted_parity, change_detection_accuracy, forest_fit, forest_predict, macro_f1,
    normalize_score, pca2, ForestParams,
};
use crate::nested::{
    train_beta_vae, train_nested, BetaVae, ModelConfig, NestedVae, SavedModel, TrainConfig,
    TrainLog,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// SplitMix64 finalizer: decorrelated child seeds from `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_splits(spec: &DatasetSpec) -> Result<Splits, ExperimentError> {
    match spec {
        DatasetSpec::RotatedMnist {
            images,
            labels,
            per_class,
            angles,
            seed,
        } => {
            let source = load_idx(images, labels)?;
            let s = build_rotated_mnist(&source, *per_class, angles, *seed)?;
            Ok(Splits {
                train: s.train,
                test: s.test,
            })
        }
        DatasetSpec::Canm {
            canm,
            n_per_domain,
            n_test_per_domain,
            seed,
        } => Ok(Splits {
            train: generate_canm(canm, *n_per_domain, *seed)?,
            test: generate_canm(canm, *n_test_per_domain, derive_seed(*seed, 1))?,
        }),
    }
}

pub fn train_model(
    kind: ModelKind,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DomainDataset,
) -> Result<(SavedModel, TrainLog), ExperimentError> {
    let (c, h, w) = data.item_shape();
    let img = model_cfg.image;
    if (img.channels, img.height, img.width) != (c, h, w) {
        return Err(ExperimentError::Config(format!(
            "model expects {}x{}x{} images, dataset has {c}x{h}x{w}",
            img.channels, img.height, img.width
        )));
    }
    Ok(match kind {
        ModelKind::Nested => {
            let mut m = NestedVae::new(model_cfg, train_cfg.seed)?;
            let log = train_nested(&mut m, data, train_cfg)?;
            (SavedModel::Nested(m), log)
        }
        ModelKind::BetaVae => {
            let mut m = BetaVae::new(model_cfg, train_cfg.seed)?;
            let log = train_beta_vae(&mut m, data, train_cfg)?;
            (SavedModel::BetaVae(m), log)
        }
    })
}

fn labels(xs: &[i32], what: &str) -> Result<Vec<usize>, ExperimentError> {
    xs.iter()
        .map(|&v| {
            usize::try_from(v)
                .map_err(|_| ExperimentError::Config(format!("negative {what} label {v}")))
        })
        .collect()
}

fn n_labels(a: &[usize], b: &[usize]) -> usize {
    a.iter().chain(b).copied().max().map_or(1, |m| m + 1).max(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: i32,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoScores {
    /// Digit probe scored on each test domain, in ascending domain order.
    pub digit: Vec<DomainScore>,
    /// Adjusted parity over the per-domain digit macro-F1.
    pub digit_parity: f64,
    pub rotation_f1: f64,
    pub rotation_accuracy: f64,
}

/// Probes trained on the seen-domain training embeddings: digit class
/// scored per test domain, and domain scored over the whole test set.
pub fn lodo_scores(
    model: &SavedModel,
    seen: &DomainDataset,
    test: &DomainDataset,
    probe: &ForestParams,
    seed: u64,
) -> Result<LodoScores, ExperimentError> {
    let e_seen = model.representation(&seen.images)?;
    let e_test = model.representation(&test.images)?;

    let y_seen = labels(&seen.class_labels, "class")?;
    let y_test = labels(&test.class_labels, "class")?;
    let n_classes = n_labels(&y_seen, &y_test);
    let digit_probe = forest_fit(&e_seen, &y_seen, n_classes, probe, derive_seed(seed, 10))?;
    let pred = forest_predict(&digit_probe, &e_test)?;
    let mut digit = Vec::new();
    for d in test.domains() {
        let idx = test.indices_where(|i| test.domain_labels[i] == d);
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<usize> = idx.iter().map(|&i| y_test[i]).collect();
        digit.push(DomainScore {
            domain: d,
            accuracy: accuracy(&p, &t)?,
            macro_f1: macro_f1(&p, &t, n_classes)?,
        });
    }
    let f1s: Vec<f64> = digit.iter().map(|s| s.macro_f1).collect();
    let digit_parity = adjusted_parity(&f1s)?;

    let r_seen = labels(&seen.domain_labels, "domain")?;
    let r_test = labels(&test.domain_labels, "domain")?;
    let n_domains = n_labels(&r_seen, &r_test);
    let rot_probe = forest_fit(&e_seen, &r_seen, n_domains, probe, derive_seed(seed, 11))?;
    let rot_pred = forest_predict(&rot_probe, &e_test)?;
    Ok(LodoScores {
        digit,
        digit_parity,
        rotation_f1: macro_f1(&rot_pred, &r_test, n_domains)?,
        rotation_accuracy: accuracy(&rot_pred, &r_test)?,
    })
}

/// 2-means change detection on embedding distances of `n_pairs` test pairs,
/// alternating same-class and changed-class pairs.
pub fn change_scores(
    model: &SavedModel,
    test: &DomainDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 12));
    let pairs = make_change_pairs(test, n_pairs, &mut rng)?;
    let e = model.representation(&test.images)?;
    Ok(change_detection_accuracy(
        &e.select_rows(&pairs.a),
        &e.select_rows(&pairs.b),
        &pairs.changed,
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanmScores {
    pub class_accuracy: f64,
    pub domain_accuracy: f64,
    /// Domain accuracy rescaled so chance is 0.
    pub domain_normalized: f64,
}

/// Shared-factor class and domain probes on the same embeddings, trained
/// on the training split and scored on the test split.
pub fn canm_scores(
    model: &SavedModel,
    train: &DomainDataset,
    test: &DomainDataset,
    probe: &ForestParams,
    seed: u64,
) -> Result<CanmScores, ExperimentError> {
    let e_train = model.representation(&train.images)?;
    let e_test = model.representation(&test.images)?;
    let fit_score =
        |a: &[i32], b: &[i32], what: &str, tag: u64| -> Result<(f64, usize), ExperimentError> {
            let (ya, yb) = (labels(a, what)?, labels(b, what)?);
            let n = n_labels(&ya, &yb);
            let f = forest_fit(&e_train, &ya, n, probe, derive_seed(seed, tag))?;
            Ok((accuracy(&forest_predict(&f, &e_test)?, &yb)?, n))
        };
    let (class_accuracy, _) = fit_score(&train.class_labels, &test.class_labels, "class", 13)?;
    let (domain_accuracy, n_domains) =
        fit_score(&train.domain_labels, &test.domain_labels, "domain", 14)?;
    Ok(CanmScores {
        class_accuracy,
        domain_accuracy,
        domain_normalized: normalize_score(domain_accuracy, n_domains),
    })
}

/// One trained model's contribution to a report.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub kind: ModelKind,
    pub holdout: Option<i32>,
    pub seed: u64,
    pub model: SavedModel,
    pub log: TrainLog,
    pub scores: Vec<ScoreRow>,
}

/// Resolved training settings for one run: the run seed and fold give an
/// independent derived seed.
pub fn run_train_config(cfg: &ExperimentConfig, seed: u64, holdout: Option<i32>) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = derive_seed(seed, holdout.map_or(0, |h| h as u64 + 1));
    t
}

/// The training data of one run: the held-out domain is removed entirely.
/// Also returns the full-dataset index of every kept item.
pub fn training_view(
    cfg: &ExperimentConfig,
    splits: &Splits,
    holdout: Option<i32>,
) -> Result<(DomainDataset, Vec<usize>), ExperimentError> {
    match (cfg.protocol, holdout) {
        (Protocol::LeaveOneDomainOut, Some(h)) => {
            if !splits.train.domains().contains(&h) {
                return Err(ExperimentError::Config(format!(
                    "held-out domain {h} not in dataset (domains {:?})",
                    splits.train.domains()
                )));
            }
            Ok(splits.train.without_domain(h))
        }
        (Protocol::LeaveOneDomainOut, None) => Err(ExperimentError::Config(
            "leave-one-domain-out needs a held-out domain".into(),
        )),
        _ => Ok((splits.train.clone(), (0..splits.train.len()).collect())),
    }
}

/// Scores a trained model under the configured protocol.
pub fn score_model(
    cfg: &ExperimentConfig,
    splits: &Splits,
    model: &SavedModel,
    holdout: Option<i32>,
    seed: u64,
) -> Result<Vec<ScoreRow>, ExperimentError> {
    let kind = model.kind().to_string();
    let row = |domain: Option<i32>, metric: &str, value: f64| ScoreRow {
        model: kind.clone(),
        holdout,
        seed,
        domain,
        metric: metric.to_string(),
        value,
    };
    let probe_seed = derive_seed(seed, holdout.map_or(0, |h| h as u64 + 1));
    let mut rows = Vec::new();
    match cfg.protocol {
        Protocol::LeaveOneDomainOut => {
            let (seen, _) = training_view(cfg, splits, holdout)?;
            let s = lodo_scores(model, &seen, &splits.test, &cfg.probe, probe_seed)?;
            for d in &s.digit {
                rows.push(row(Some(d.domain), "digit_f1", d.macro_f1));
                rows.push(row(Some(d.domain), "digit_accuracy", d.accuracy));
            }
            rows.push(row(None, "digit_parity", s.digit_parity));
            rows.push(row(None, "rotation_f1", s.rotation_f1));
            rows.push(row(None, "rotation_accuracy", s.rotation_accuracy));
        }
        Protocol::ChangeDetection => {
            rows.push(row(
                None,
                "change_accuracy",
                change_scores(model, &splits.test, cfg.change_pairs, probe_seed)?,
            ));
        }
        Protocol::CanmRecovery => {
            let s = canm_scores(model, &splits.train, &splits.test, &cfg.probe, probe_seed)?;
            rows.push(row(None, "class_accuracy", s.class_accuracy));
            rows.push(row(None, "domain_accuracy", s.domain_accuracy));
            rows.push(row(None, "domain_normalized", s.domain_normalized));
        }
    }
    Ok(rows)
}

/// Trains and scores one model for one seed and fold.
pub fn run_one(
    cfg: &ExperimentConfig,
    splits: &Splits,
    kind: ModelKind,
    holdout: Option<i32>,
    seed: u64,
) -> Result<RunOutput, ExperimentError> {
    let (data, _) = training_view(cfg, splits, holdout)?;
    let train_cfg = run_train_config(cfg, seed, holdout);
    log::info!(
        "training {} (holdout {holdout:?}, seed {seed}) on {} items",
        kind.name(),
        data.len()
    );
    let (model, log) = train_model(kind, &cfg.model, &train_cfg, &data)?;
    let scores = score_model(cfg, splits, &model, holdout, seed)?;
    Ok(RunOutput {
        kind,
        holdout,
        seed,
        model,
        log,
        scores,
    })
}

/// Everything an experiment produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub losses: Vec<LossRow>,
    pub projection: Vec<ProjectionRow>,
    pub runs: Vec<RunOutput>,
}

/// Runs every (seed, fold, model) combination, in parallel on the current
/// rayon pool, and aggregates serially. `holdouts` is ignored outside the
/// leave-one-domain-out protocol.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    splits: &Splits,
    holdouts: &[i32],
    kinds: &[ModelKind],
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    if kinds.is_empty() {
        return Err(ExperimentError::Config("no models requested".into()));
    }
    let folds: Vec<Option<i32>> = match cfg.protocol {
        Protocol::LeaveOneDomainOut if holdouts.is_empty() => {
            return Err(ExperimentError::Config(
                "no held-out domains requested".into(),
            ))
        }
        Protocol::LeaveOneDomainOut => holdouts.iter().map(|&h| Some(h)).collect(),
        _ => vec![None],
    };
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &fold in &folds {
            for &kind in kinds {
                jobs.push((kind, fold, seed));
            }
        }
    }
    let runs: Vec<RunOutput> = jobs
        .into_par_iter()
        .map(|(kind, fold, seed)| run_one(cfg, splits, kind, fold, seed))
        .collect::<Result<_, _>>()?;

    let scores: Vec<ScoreRow> = runs.iter().flat_map(|r| r.scores.iter().cloned()).collect();
    let report = MetricsReport::build(cfg, scores)?;
    let losses = runs
        .iter()
        .flat_map(|r| LossRow::from_log(r.kind.name(), r.holdout, r.seed, &r.log))
        .collect();
    let projection = projection_rows(&runs[0].model, &splits.test)?;
    Ok(ExperimentOutput {
        report,
        losses,
        projection,
        runs,
    })
}

/// 2-D PCA of a model's test-set representation.
pub fn projection_rows(
    model: &SavedModel,
    test: &DomainDataset,
) -> Result<Vec<ProjectionRow>, ExperimentError> {
    let e: Tensor = model.representation(&test.images)?;
    let p = pca2(&e)?;
    Ok((0..test.len())
        .map(|i| ProjectionRow {
            x: p.row(i)[0],
            y: p.row(i)[1],
            class: test.class_labels[i],
            domain: test.domain_labels[i],
        })
        .collect())
}
