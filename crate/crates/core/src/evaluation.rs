//! Production protocol: stratified k-fold cross-validation scored by ROC AUC
//! on a held-out evaluation set, summarized as the median fold-mean AUC with a
//! bootstrap 95% confidence interval.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{self, DataError, Dataset};
use crate::modelspec::CanonicalModel;
use crate::rng;
use crate::training::{self, fit, FitOptions, Progress, ProgressFn, RunContext, TrainError, TrainedModel};

pub const FOLDS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("AUC undefined: classes {0:?} have no examples")]
    MissingClasses(Vec<usize>),
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("class {class} has {count} items, fewer than {k} folds")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("evaluation items overlap training items")]
    Leakage,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Mann–Whitney AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, from average ranks.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * pos_in_group as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassAuc {
    pub macro_auc: f64,
    pub per_class: Vec<f64>,
}

/// Unweighted mean of the one-vs-rest AUCs. `probs[i]` holds the class
/// probabilities of item `i`.
pub fn roc_auc_multiclass(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<MulticlassAuc, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::Length(probs.len(), labels.len()));
    }
    let missing: Vec<usize> = (0..k).filter(|c| !labels.contains(c)).collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingClasses(missing));
    }
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        per_class.push(roc_auc_binary(&scores, &truth)?);
    }
    let macro_auc = per_class.iter().sum::<f64>() / k as f64;
    Ok(MulticlassAuc { macro_auc, per_class })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Indices outside fold `f`.
    pub fn training_indices(&self, f: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect()
    }
}

/// Per class: seeded shuffle, then deal into `k` near-equal chunks. The chunk
/// that receives the extra item rotates with the class so fold totals stay
/// balanced too.
pub fn stratified_kfold(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < k {
            return Err(EvalError::ClassTooSmall {
                class,
                count: idx.len(),
                k,
            });
        }
        let mut r = rng::seeded(rng::derive(seed, "kfold", class as u64));
        idx.shuffle(&mut r);
        let (base, extra) = (idx.len() / k, idx.len() % k);
        let mut start = 0;
        for j in 0..k {
            let f = (j + offset) % k;
            let size = base + usize::from(j < extra);
            folds[f].extend(&idx[start..start + size]);
            start += size;
        }
        offset = (offset + extra) % k;
    }
    Ok(FoldPlan { folds })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile-bootstrap 95% interval of the median fold-mean AUC.
///
/// Each resample redraws the fold AUCs of every repetition with replacement
/// and recomputes the median of the fold means. The interval is widened to
/// contain the point estimate if resampling noise left it outside.
pub fn bootstrap_ci(per_fold: &[Vec<f64>], resamples: usize, seed: u64) -> (f64, f64) {
    let point = median(&per_fold.iter().map(|f| mean(f)).collect::<Vec<_>>());
    let mut r = rng::seeded(rng::derive(seed, "bootstrap", 0));
    let mut stats = Vec::with_capacity(resamples);
    let mut means = vec![0.0; per_fold.len()];
    for _ in 0..resamples {
        for (m, folds) in means.iter_mut().zip(per_fold) {
            let mut s = 0.0;
            for _ in 0..folds.len() {
                s += folds[r.gen_range(0..folds.len())];
            }
            *m = s / folds.len() as f64;
        }
        stats.push(median(&means));
    }
    stats.sort_by(f64::total_cmp);
    let low = percentile(&stats, 0.025).min(point);
    let high = percentile(&stats, 0.975).max(point);
    (low, high)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub model: String,
    pub seed: u64,
    pub repeats: usize,
    pub folds: usize,
    /// Macro AUC of every fold, repetition-major.
    pub per_fold_auc: Vec<f64>,
    /// Mean over folds, one per repetition.
    pub fold_mean_auc: Vec<f64>,
    pub median_auc: f64,
    pub ci95: (f64, f64),
    /// One-vs-rest AUC per class, averaged over all folds.
    pub per_class_auc: BTreeMap<String, f64>,
    pub train_pool_size: usize,
    pub evaluation_size: usize,
}

struct FoldRun {
    repeat: usize,
    fold: usize,
    trained: TrainedModel,
}

/// Repeated stratified fivefold CV with early stopping on the held-out fold,
/// scored on a disjoint balanced evaluation set.
pub fn evaluate_production(
    model: &CanonicalModel,
    data: &Dataset,
    config: &RunConfig,
    seed: u64,
    progress: ProgressFn<'_>,
) -> Result<EvaluationReport, EvalError> {
    training::check_classes(model, data)?;
    let k = data.num_classes();
    let input_shape = data.image_shape().ok_or(DataError::Empty)?;
    let d = &config.dataset;
    let draws = dataset::balanced_draw_indices(
        data,
        &[d.production_train, d.production_eval],
        rng::derive(seed, "production-draw", 0),
    )?;
    let (pool_idx, eval_idx) = (&draws[0], &draws[1]);
    let pool = data.subset(pool_idx);
    let eval = data.subset(eval_idx);
    let eval_set: HashSet<usize> = eval_idx.iter().copied().collect();
    let repeats = config.training.cv_repeats;
    let opts = FitOptions::production(config);

    let mut tasks = Vec::new();
    for repeat in 0..repeats {
        let plan = stratified_kfold(&pool.labels(), k, FOLDS, rng::derive(seed, "repeat", repeat as u64))?;
        for fold in 0..FOLDS {
            let train_idx = plan.training_indices(fold);
            let val_idx = plan.folds[fold].clone();
            if train_idx
                .iter()
                .chain(&val_idx)
                .any(|&i| eval_set.contains(&pool_idx[i]))
            {
                return Err(EvalError::Leakage);
            }
            tasks.push((repeat, fold, train_idx, val_idx));
        }
    }

    let run = |(repeat, fold, train_idx, val_idx): &(usize, usize, Vec<usize>, Vec<usize>)| {
        let fold_seed = rng::derive(seed, "fold", (repeat * FOLDS + fold) as u64);
        let context = RunContext {
            repeat: Some(*repeat),
            fold: Some(*fold),
        };
        fit(
            model,
            input_shape,
            &pool.subset(train_idx),
            &pool.subset(val_idx),
            &opts,
            fold_seed,
            context,
            progress,
        )
        .map(|trained| FoldRun {
            repeat: *repeat,
            fold: *fold,
            trained,
        })
    };
    let workers = config.training.workers.max(1);
    let runs: Vec<FoldRun> = if workers == 1 {
        tasks.iter().map(run).collect::<Result<_, _>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::Invalid(e.to_string()))?
            .install(|| tasks.par_iter().map(run).collect::<Result<_, _>>())?
    };

    progress(Progress::Evaluating);
    let labels = eval.labels();
    let mut per_fold = vec![vec![0.0; FOLDS]; repeats];
    let mut class_sums = vec![0.0; k];
    for fr in &runs {
        let mut probs = Vec::with_capacity(eval.len());
        for item in eval.items() {
            probs.push(fr.trained.predict(&item.image).map_err(TrainError::from)?.into_data());
        }
        let auc = roc_auc_multiclass(&probs, &labels, k)?;
        per_fold[fr.repeat][fr.fold] = auc.macro_auc;
        for (s, a) in class_sums.iter_mut().zip(&auc.per_class) {
            *s += a;
        }
    }
    let fold_mean_auc: Vec<f64> = per_fold.iter().map(|f| mean(f)).collect();
    let median_auc = median(&fold_mean_auc);
    let ci95 = bootstrap_ci(&per_fold, config.training.bootstrap_resamples, seed);
    let per_class_auc = data
        .class_names()
        .iter()
        .zip(&class_sums)
        .map(|(n, s)| (n.clone(), s / runs.len() as f64))
        .collect();
    Ok(EvaluationReport {
        mode: "production".into(),
        model: model.describe(),
        seed,
        repeats,
        folds: FOLDS,
        per_fold_auc: per_fold.concat(),
        fold_mean_auc,
        median_auc,
        ci95,
        per_class_auc,
        train_pool_size: pool.len(),
        evaluation_size: eval.len(),
    })
}
