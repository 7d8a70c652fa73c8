//! Metrics, uncertainty, significance, and the two behavioral baselines.
//!
//! Everything here is pure: bootstrap and permutation draws come from
//! seeds derived per iteration, so results are independent of thread
//! scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Cohort, Group, Response, ScreenGeometry, Sentiment};
use crate::harness::{plan_folds, ScoreRow, ScoreTable, Subject, TaskName, TaskSpec, N_OUTER_FOLDS};
use crate::preprocess::preprocess_participant;
use crate::segment::Alignment;
use crate::seed::SeedPath;
use crate::{Error, Result};

pub const DEFAULT_BOOTSTRAP_ITERS: usize = 1000;
pub const PERMUTATION_P_FLOOR: f64 = 0.001;

/// Area under the ROC curve by the Mann-Whitney U statistic with midrank
/// tie handling: ties between a positive and a negative score credit 0.5.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Stats(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Stats(format!(
            "AUC undefined: {n_pos} positive and {n_neg} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| f64::total_cmp(&scores[a], &scores[b]));

    // Midranks over tied blocks, 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Sensitivity and specificity with positive defined as score >= threshold.
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let positive = s >= threshold;
        match (l, positive) {
            (1, true) => tp += 1,
            (1, false) => fn_ += 1,
            (0, false) => tn += 1,
            (0, true) => fp += 1,
            _ => return Err(Error::Stats(format!("label {l} is not 0 or 1"))),
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::Stats(
            "sensitivity/specificity undefined: one class absent".into(),
        ));
    }
    Ok((
        tp as f64 / (tp + fn_) as f64,
        tn as f64 / (tn + fp) as f64,
    ))
}

/// ROC curve points (fpr, tpr, threshold), one per distinct score plus
/// the two endpoints, suitable for plotting.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Stats("ROC undefined: one class absent".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| f64::total_cmp(&scores[b], &scores[a]));
    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64, t));
    }
    Ok(points)
}

/// Percentile with linear interpolation between order statistics;
/// `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95% bootstrap confidence interval: resample participants with
/// replacement, recompute the metric, take the 2.5 and 97.5 percentiles.
/// Resamples where the metric is undefined (one class drawn) are redrawn;
/// if more than half of all draws fail the CI itself fails. The interval
/// is widened if needed to contain the full-sample point estimate.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: impl Fn(&[f64], &[u8]) -> Result<f64> + Sync,
    iters: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if scores.len() < 2 {
        return Err(Error::Stats(format!(
            "bootstrap needs at least 2 observations, got {}",
            scores.len()
        )));
    }
    let point = metric(scores, labels)?;
    let n = scores.len();

    let results: Vec<(f64, usize)> = (0..iters)
        .into_par_iter()
        .map(|i| -> Result<(f64, usize)> {
            let mut rng = SeedPath::new(seed)
                .push_str("bootstrap-iter")
                .push_u64(i as u64)
                .rng();
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            let mut failures = 0usize;
            loop {
                for k in 0..n {
                    let j = rng.gen_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                match metric(&s, &l) {
                    Ok(v) => return Ok((v, failures)),
                    Err(_) => {
                        failures += 1;
                        if failures > iters {
                            return Err(Error::Stats(
                                "bootstrap resample kept drawing one-class samples".into(),
                            ));
                        }
                    }
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let total_failures: usize = results.iter().map(|(_, f)| f).sum();
    if total_failures > iters {
        return Err(Error::Stats(format!(
            "metric undefined in {total_failures} of {} bootstrap draws",
            iters + total_failures
        )));
    }
    let mut values: Vec<f64> = results.into_iter().map(|(v, _)| v).collect();
    values.sort_by(f64::total_cmp);
    let lo = percentile(&values, 0.025).min(point);
    let hi = percentile(&values, 0.975).max(point);
    Ok((lo, hi))
}

/// Permutation p-value: bootstrap score sets from the permuted-label
/// (null) runs and count how often their AUC reaches the real model's
/// lower confidence bound. Each iteration draws one null run, then
/// resamples its participants. Floored at 0.001.
pub fn permutation_p(
    real_ci_lower: f64,
    null_scores_by_run: &[Vec<f64>],
    labels: &[u8],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if null_scores_by_run.is_empty() {
        return Err(Error::Stats("no null runs for permutation test".into()));
    }
    for (r, run) in null_scores_by_run.iter().enumerate() {
        if run.len() != labels.len() {
            return Err(Error::Stats(format!(
                "null run {r} has {} scores for {} labels",
                run.len(),
                labels.len()
            )));
        }
    }
    let n = labels.len();
    let hits: usize = (0..iters)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut rng = SeedPath::new(seed)
                .push_str("permutation-iter")
                .push_u64(i as u64)
                .rng();
            let run = &null_scores_by_run[rng.gen_range(0..null_scores_by_run.len())];
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            let mut guard = 0usize;
            loop {
                for k in 0..n {
                    let j = rng.gen_range(0..n);
                    s[k] = run[j];
                    l[k] = labels[j];
                }
                match roc_auc(&s, &l) {
                    Ok(v) => return Ok(usize::from(v >= real_ci_lower)),
                    Err(_) => {
                        guard += 1;
                        if guard > iters {
                            return Err(Error::Stats(
                                "permutation resample kept drawing one-class samples".into(),
                            ));
                        }
                    }
                }
            }
        })
        .sum::<Result<usize>>()?;
    Ok((hits as f64 / iters as f64).max(PERMUTATION_P_FLOOR))
}

/// Benjamini-Hochberg step-up adjustment. Monotone and idempotent.
pub fn fdr_correct(p_values: &[f64]) -> Vec<f64> {
    let n = p_values.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| f64::total_cmp(&p_values[a], &p_values[b]));
    let mut adjusted = vec![0.0; n];
    let mut running_min = 1.0f64;
    for rank in (0..n).rev() {
        let idx = order[rank];
        let p = p_values[idx].clamp(0.0, 1.0);
        // rank + 1 == n would multiply by exactly 1; skip it so rounding
        // can never push the candidate below the raw value.
        let candidate = if rank + 1 == n {
            p
        } else {
            (p * n as f64 / (rank + 1) as f64).min(1.0)
        };
        running_min = running_min.min(candidate);
        adjusted[idx] = running_min;
    }
    adjusted
}

/// Welch's two-sample t-test (unequal variances). Returns (t, two-sided p).
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats("Welch t needs at least 2 values per side".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok((if ma == mb { 0.0 } else { f64::INFINITY * (ma - mb).signum() }, if ma == mb { 1.0 } else { 0.0 }));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Stats(format!("t distribution with df {df}: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((t, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub n: usize,
    pub mean_score: f64,
    pub ci: (f64, f64),
}

/// Subject-level evaluation of one score table: AUC, operating point at
/// 0.5, per-group means, all with bootstrap CIs, plus the permutation
/// p-value when null runs are supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskName,
    pub alignment: Alignment,
    pub n_subjects: usize,
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub sensitivity: f64,
    pub sensitivity_ci: (f64, f64),
    pub specificity: f64,
    pub specificity_ci: (f64, f64),
    pub per_group: Vec<GroupSummary>,
    pub p_perm: Option<f64>,
    pub n_bootstrap: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        for (name, point, ci) in [
            ("auc", self.auc, self.auc_ci),
            ("sensitivity", self.sensitivity, self.sensitivity_ci),
            ("specificity", self.specificity, self.specificity_ci),
        ] {
            if !(ci.0 <= point && point <= ci.1) {
                issues.push(format!("{name} {point} outside its CI [{}, {}]", ci.0, ci.1));
            }
        }
        if let Some(p) = self.p_perm {
            if p < PERMUTATION_P_FLOOR {
                issues.push(format!("p_perm {p} below the {PERMUTATION_P_FLOOR} floor"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::validation_all(issues))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Stats(format!("report to JSON: {e}")))
    }
}

/// Build an [`EvalReport`] from a score table. `null_tables` are permuted
/// -label protocol outputs used for the permutation p-value.
pub fn evaluate_table(
    table: &ScoreTable,
    iters: usize,
    seed: u64,
    null_tables: Option<&[ScoreTable]>,
) -> Result<EvalReport> {
    let (scores, labels) = table.scores_and_labels();
    let auc = roc_auc(&scores, &labels)?;
    let auc_ci = bootstrap_ci(&scores, &labels, roc_auc, iters, seed)?;
    let (sens, spec) = sens_spec(&scores, &labels, 0.5)?;
    let sens_metric = |s: &[f64], l: &[u8]| sens_spec(s, l, 0.5).map(|(v, _)| v);
    let spec_metric = |s: &[f64], l: &[u8]| sens_spec(s, l, 0.5).map(|(_, v)| v);
    let sensitivity_ci = bootstrap_ci(&scores, &labels, sens_metric, iters, seed ^ 0x5e5e)?;
    let specificity_ci = bootstrap_ci(&scores, &labels, spec_metric, iters, seed ^ 0x7a7a)?;

    let mut per_group = Vec::new();
    for group in Group::ALL {
        let gs = table.group_scores(group);
        if gs.is_empty() {
            continue;
        }
        let mean = gs.iter().sum::<f64>() / gs.len() as f64;
        let mean_metric = |s: &[f64], _: &[u8]| -> Result<f64> {
            Ok(s.iter().sum::<f64>() / s.len() as f64)
        };
        let dummy = vec![0u8; gs.len()];
        let ci = if gs.len() >= 2 {
            bootstrap_ci(&gs, &dummy, mean_metric, iters, seed ^ group.index() as u64)?
        } else {
            (mean, mean)
        };
        per_group.push(GroupSummary {
            group,
            n: gs.len(),
            mean_score: mean,
            ci,
        });
    }

    let p_perm = match null_tables {
        Some(tables) if !tables.is_empty() => {
            // Null scores aligned with the real table's labeled rows.
            let mut runs = Vec::with_capacity(tables.len());
            for t in tables {
                let by_id: std::collections::HashMap<&str, f64> = t
                    .rows
                    .iter()
                    .map(|r| (r.participant_id.as_str(), r.score))
                    .collect();
                let mut run = Vec::with_capacity(scores.len());
                for row in table.rows.iter().filter(|r| r.label.is_some()) {
                    let v = by_id.get(row.participant_id.as_str()).ok_or_else(|| {
                        Error::Stats(format!(
                            "null table missing participant {}",
                            row.participant_id
                        ))
                    })?;
                    run.push(*v);
                }
                runs.push(run);
            }
            Some(permutation_p(auc_ci.0, &runs, &labels, iters, seed ^ 0x9c9c)?)
        }
        _ => None,
    };

    let report = EvalReport {
        task: table.task,
        alignment: table.alignment,
        n_subjects: table.rows.len(),
        auc,
        auc_ci,
        sensitivity: sens,
        sensitivity_ci,
        specificity: spec,
        specificity_ci,
        per_group,
        p_perm,
        n_bootstrap: iters,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub auc: f64,
    pub ci: (f64, f64),
    pub n: usize,
}

/// 4x4 grid: rows are the task a model was trained on, columns the task
/// whose group pair it is evaluated against. Evaluation keeps only
/// participants belonging to the evaluation task's two classes; for
/// off-diagonal entries that includes participants the row's model only
/// ever saw zero-shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskMatrix {
    pub tasks: [TaskName; 4],
    pub entries: Vec<Vec<Option<MatrixEntry>>>,
    /// (train_task, eval_task) pairs that could not be filled.
    pub gaps: Vec<(TaskName, TaskName, String)>,
}

pub fn cross_task_matrix(
    tables: &[&ScoreTable],
    iters: usize,
    seed: u64,
) -> Result<CrossTaskMatrix> {
    let tasks = TaskName::ALL;
    let mut entries: Vec<Vec<Option<MatrixEntry>>> = vec![vec![None; 4]; 4];
    let mut gaps = Vec::new();
    for (ti, train_task) in tasks.iter().enumerate() {
        let Some(table) = tables.iter().find(|t| t.task == *train_task) else {
            for eval_task in tasks {
                gaps.push((*train_task, eval_task, "no score table".to_string()));
            }
            continue;
        };
        for (ei, eval_task) in tasks.iter().enumerate() {
            let spec = TaskSpec::of(*eval_task);
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for row in &table.rows {
                if let Some(l) = spec.label_of(row.group) {
                    scores.push(row.score);
                    labels.push(l);
                }
            }
            match roc_auc(&scores, &labels).and_then(|auc| {
                let ci = bootstrap_ci(
                    &scores,
                    &labels,
                    roc_auc,
                    iters,
                    seed ^ ((ti as u64) << 8 | ei as u64),
                )?;
                Ok(MatrixEntry {
                    auc,
                    ci,
                    n: scores.len(),
                })
            }) {
                Ok(entry) => entries[ti][ei] = Some(entry),
                Err(e) => gaps.push((*train_task, *eval_task, e.to_string())),
            }
        }
    }
    Ok(CrossTaskMatrix {
        tasks,
        entries,
        gaps,
    })
}

impl CrossTaskMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_task,eval_task,auc,ci_lo,ci_hi,n\n");
        for (ti, train) in self.tasks.iter().enumerate() {
            for (ei, eval) in self.tasks.iter().enumerate() {
                match &self.entries[ti][ei] {
                    Some(e) => out.push_str(&format!(
                        "{train},{eval},{},{},{},{}\n",
                        e.auc, e.ci.0, e.ci.1, e.n
                    )),
                    None => out.push_str(&format!("{train},{eval},,,,\n")),
                }
            }
        }
        out
    }
}

/// Plain logistic regression trained by full-batch gradient descent:
/// learning rate 0.1, 500 iterations, L2 penalty 1e-4 on the weights
/// (not the intercept).
fn logistic_fit(features: &[Vec<f64>], labels: &[u8]) -> Vec<f64> {
    let dim = features.first().map_or(0, |f| f.len());
    let n = features.len();
    let mut w = vec![0.0f64; dim + 1];
    let (lr, l2) = (0.1, 1e-4);
    for _ in 0..500 {
        let mut grad = vec![0.0f64; dim + 1];
        for (x, &y) in features.iter().zip(labels) {
            let z = w[0] + x.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let d = p - y as f64;
            grad[0] += d;
            for (g, &xi) in grad[1..].iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        for (wi, g) in w[1..].iter_mut().zip(&grad[1..]) {
            *wi -= lr * (g + l2 * *wi);
        }
        w[0] -= lr * grad[0];
    }
    w
}

fn logistic_predict(w: &[f64], x: &[f64]) -> f64 {
    let z = w[0] + x.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
    1.0 / (1.0 + (-z).exp())
}

/// Run a feature-based baseline under the same outer-fold protocol as the
/// model: 5 stratified folds, fit on the outer-train subjects, score the
/// held-out fold; zero-shot groups get the average of all five fold
/// models.
fn baseline_protocol(
    subjects: &[Subject],
    features: &std::collections::HashMap<String, Vec<f64>>,
    task: &TaskSpec,
    seed: u64,
) -> Result<ScoreTable> {
    let plan = plan_folds(subjects, task, seed, 1)?;
    let fold_of = plan.fold_of();
    let group_of: std::collections::HashMap<&str, Group> =
        subjects.iter().map(|s| (s.id.as_str(), s.group)).collect();

    let mut models = Vec::with_capacity(N_OUTER_FOLDS);
    for f in 0..N_OUTER_FOLDS {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (g, fold) in plan.outer_folds.iter().enumerate() {
            if g == f {
                continue;
            }
            for id in fold {
                xs.push(features[id].clone());
                ys.push(task.label_of(group_of[id.as_str()]).unwrap());
            }
        }
        models.push(logistic_fit(&xs, &ys));
    }

    let mut rows = Vec::with_capacity(subjects.len());
    for s in subjects {
        let x = &features[&s.id];
        let score = match fold_of.get(s.id.as_str()) {
            Some(&f) => logistic_predict(&models[f], x),
            None => {
                models
                    .iter()
                    .map(|m| logistic_predict(m, x))
                    .sum::<f64>()
                    / models.len() as f64
            }
        };
        rows.push(ScoreRow {
            participant_id: s.id.clone(),
            group: s.group,
            gender: s.gender,
            label: task.label_of(s.group),
            score,
            per_seed: vec![score],
        });
    }
    Ok(ScoreTable {
        task: task.name,
        alignment: Alignment::Response,
        rows,
    })
}

fn cohort_subjects(cohort: &Cohort) -> Vec<Subject> {
    cohort
        .participants
        .iter()
        .map(|p| Subject {
            id: p.participant.id.clone(),
            group: p.participant.group,
            gender: p.participant.gender,
        })
        .collect()
}

/// Baseline using only where the gaze sat just before the button press:
/// per trial, the fraction of the last `window_ms` spent inside the agree
/// AOI minus the fraction inside the disagree AOI; subject features are
/// the per-sentiment means of that difference.
pub fn baseline_fixation_ratio(
    cohort: &Cohort,
    geom: &ScreenGeometry,
    window_ms: f64,
    task: &TaskSpec,
    iters: usize,
    seed: u64,
) -> Result<EvalReport> {
    geom.validate()?;
    if window_ms <= 0.0 {
        return Err(Error::Config(format!("window_ms {window_ms} must be positive")));
    }
    let mut features = std::collections::HashMap::new();
    for p in &cohort.participants {
        let clean = preprocess_participant(&p.recording, geom)?;
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for t in &p.trials {
            if !t.is_retained() {
                continue;
            }
            let Some(rt) = t.response_time_ms else { continue };
            let i1 = ((rt - clean.t0_ms) / 4.0).round() as i64;
            let i0 = ((rt - window_ms - clean.t0_ms) / 4.0).round() as i64;
            let i0 = i0.max(0) as usize;
            let i1 = (i1.max(0) as usize).min(clean.len());
            if i0 >= i1 {
                continue;
            }
            let (mut agree, mut disagree) = (0usize, 0usize);
            for i in i0..i1 {
                if geom.agree_aoi.contains(clean.x[i], clean.y[i]) {
                    agree += 1;
                }
                if geom.disagree_aoi.contains(clean.x[i], clean.y[i]) {
                    disagree += 1;
                }
            }
            let d = (agree as f64 - disagree as f64) / (i1 - i0) as f64;
            let slot = match t.sentiment {
                Sentiment::Negative => 0,
                Sentiment::PositiveNeutral => 1,
            };
            sums[slot] += d;
            counts[slot] += 1;
        }
        let feat = vec![
            if counts[0] > 0 { sums[0] / counts[0] as f64 } else { 0.0 },
            if counts[1] > 0 { sums[1] / counts[1] as f64 } else { 0.0 },
        ];
        features.insert(p.participant.id.clone(), feat);
    }
    let table = baseline_protocol(&cohort_subjects(cohort), &features, task, seed)?;
    evaluate_table(&table, iters, seed, None)
}

/// Baseline using only the button presses: subject features are the
/// agree rates on negative and on positive/neutral sentences.
pub fn baseline_response_only(
    cohort: &Cohort,
    task: &TaskSpec,
    iters: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut features = std::collections::HashMap::new();
    for p in &cohort.participants {
        let mut agree = [0usize; 2];
        let mut total = [0usize; 2];
        for t in &p.trials {
            if !t.is_retained() || t.response == Response::Missed {
                continue;
            }
            let slot = match t.sentiment {
                Sentiment::Negative => 0,
                Sentiment::PositiveNeutral => 1,
            };
            total[slot] += 1;
            if t.response == Response::Agree {
                agree[slot] += 1;
            }
        }
        let feat = (0..2)
            .map(|i| {
                if total[i] > 0 {
                    agree[i] as f64 / total[i] as f64
                } else {
                    0.0
                }
            })
            .collect();
        features.insert(p.participant.id.clone(), feat);
    }
    let table = baseline_protocol(&cohort_subjects(cohort), &features, task, seed)?;
    evaluate_table(&table, iters, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force pair-counting AUC, the oracle for the midrank version.
    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn test_auc_trivial_cases() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.4, 0.4, 0.4, 0.4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.2, 0.3], &[1, 1]).is_err());
    }

    #[test]
    fn test_auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..200 {
            let n = rng.gen_range(4..40);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = roc_auc(&scores, &labels).unwrap();
            let want = auc_oracle(&scores, &labels);
            assert!(
                (got - want).abs() < 1e-12,
                "trial {trial}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn test_auc_complement_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..30).map(|i| (i % 2) as u8).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        assert_eq!(auc + roc_auc(&scores, &flipped).unwrap(), 1.0);
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        assert!((roc_auc(&transformed, &labels).unwrap() - auc).abs() < 1e-12);
    }

    #[test]
    fn test_sens_spec_cases() {
        assert_eq!(
            sens_spec(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 0.5).unwrap(),
            (1.0, 1.0)
        );
        assert_eq!(
            sens_spec(&[0.6, 0.6, 0.6, 0.6], &[0, 1, 0, 1], 0.5).unwrap(),
            (1.0, 0.0)
        );
        // Threshold extremes.
        let scores = [0.2, 0.7, 0.4, 0.9];
        let labels = [0, 1, 1, 0];
        assert_eq!(sens_spec(&scores, &labels, 0.0).unwrap(), (1.0, 0.0));
        assert_eq!(sens_spec(&scores, &labels, 1.5).unwrap(), (0.0, 1.0));

        // Confusion-matrix oracle on random tables.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let th = rng.gen_range(0.0..1.0);
            let (sens, spec) = sens_spec(&scores, &labels, th).unwrap();
            let tp = scores.iter().zip(&labels).filter(|(s, l)| **l == 1 && **s >= th).count();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            let tn = scores.iter().zip(&labels).filter(|(s, l)| **l == 0 && **s < th).count();
            let neg = n - pos;
            assert_eq!(sens, tp as f64 / pos as f64);
            assert_eq!(spec, tn as f64 / neg as f64);
        }
    }

    #[test]
    fn test_bootstrap_ci_perfect_separation_and_determinism() {
        let scores = [0.1, 0.1, 0.1, 0.9, 0.9, 0.9];
        let labels = [0, 0, 0, 1, 1, 1];
        let ci = bootstrap_ci(&scores, &labels, roc_auc, 200, 5).unwrap();
        assert_eq!(ci, (1.0, 1.0));
        let ci2 = bootstrap_ci(&scores, &labels, roc_auc, 200, 5).unwrap();
        assert_eq!(ci, ci2);
        let ci3 = bootstrap_ci(&scores, &labels, roc_auc, 200, 6).unwrap();
        assert_eq!(ci3, (1.0, 1.0));
    }

    /// Independently coded resampler following the documented stream
    /// definition: per iteration, an RNG from seed path
    /// (seed, "bootstrap-iter", i), n index draws via gen_range(0..n),
    /// redraw whole resample while the metric is undefined.
    fn bootstrap_dual(scores: &[f64], labels: &[u8], iters: usize, seed: u64) -> (f64, f64) {
        let n = scores.len();
        let mut values = Vec::with_capacity(iters);
        for i in 0..iters {
            let mut rng = SeedPath::new(seed)
                .push_str("bootstrap-iter")
                .push_u64(i as u64)
                .rng();
            'redraw: loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                let s: Vec<f64> = idx.iter().map(|&j| scores[j]).collect();
                let l: Vec<u8> = idx.iter().map(|&j| labels[j]).collect();
                if l.iter().all(|&x| x == 1) || l.iter().all(|&x| x == 0) {
                    continue 'redraw;
                }
                values.push(auc_oracle(&s, &l));
                break;
            }
        }
        values.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        (pct(0.025), pct(0.975))
    }

    #[test]
    fn test_bootstrap_ci_matches_dual_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..24).map(|i| u8::from(i % 3 == 0)).collect();
        let got = bootstrap_ci(&scores, &labels, roc_auc, 500, 21).unwrap();
        let want = bootstrap_dual(&scores, &labels, 500, 21);
        let point = roc_auc(&scores, &labels).unwrap();
        assert_eq!(got, (want.0.min(point), want.1.max(point)));
    }

    #[test]
    fn test_bootstrap_ci_contains_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(6..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let point = roc_auc(&scores, &labels).unwrap();
            let (lo, hi) = bootstrap_ci(&scores, &labels, roc_auc, 100, 1).unwrap();
            assert!(lo <= point && point <= hi, "{point} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn test_permutation_p_cases() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        // Null runs centered at chance: scores independent of labels.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let null_runs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..40).map(|_| rng.gen_range(0.3..0.7)).collect())
            .collect();
        let p = permutation_p(0.95, &null_runs, &labels, 1000, 9).unwrap();
        assert_eq!(p, PERMUTATION_P_FLOOR);
        let p = permutation_p(0.45, &null_runs, &labels, 1000, 9).unwrap();
        assert!(p > 0.5, "anti-case p {p}");
        assert!(permutation_p(0.5, &[], &labels, 100, 0).is_err());
    }

    #[test]
    fn test_permutation_p_proportion_by_construction() {
        // When the "real" lower bound sits at the null's median AUC, about
        // half the bootstrap draws exceed it.
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let null_run: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let auc0 = roc_auc(&null_run, &labels).unwrap();
        let p = permutation_p(auc0, &[null_run], &labels, 2000, 3).unwrap();
        assert!((p - 0.5).abs() < 0.12, "p {p} not near 0.5");
    }

    #[test]
    fn test_fdr_correct_cases() {
        assert_eq!(fdr_correct(&[0.04]), vec![0.04]);
        let adj = fdr_correct(&[0.01, 0.02, 0.03]);
        for v in &adj {
            assert!((v - 0.03).abs() < 1e-12, "{adj:?}");
        }
        assert_eq!(fdr_correct(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);

        // Constant vectors are the fixed points of the adjustment, so
        // re-adjusting them changes nothing.
        for v in [0.2, 0.5, 1.0] {
            let ps = vec![v; 5];
            assert_eq!(fdr_correct(&fdr_correct(&ps)), fdr_correct(&ps));
        }

        // Monotone in sorted order, never below the raw values, and
        // re-adjustment can only move adjusted values up, never down.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let ps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let adj = fdr_correct(&ps);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| f64::total_cmp(&ps[a], &ps[b]));
            for w in order.windows(2) {
                assert!(adj[w[0]] <= adj[w[1]] + 1e-15);
            }
            for (p, a) in ps.iter().zip(&adj) {
                assert!(a >= p);
            }
            let twice = fdr_correct(&adj);
            for (a, b) in adj.iter().zip(&twice) {
                assert!(b >= a);
            }
        }
    }

    #[test]
    fn test_welch_t() {
        let a = [0.9, 0.92, 0.88, 0.91, 0.9];
        let b = [0.7, 0.72, 0.69, 0.71, 0.68];
        let (t, p) = welch_t(&a, &b).unwrap();
        assert!(t > 10.0);
        assert!(p < 1e-4);
        let (_, p_same) = welch_t(&a, &a).unwrap();
        assert!(p_same > 0.9);
    }

    #[test]
    fn test_roc_points_monotone() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        let pts = roc_points(&scores, &labels).unwrap();
        assert_eq!(pts.first().unwrap().0, 0.0);
        assert_eq!(pts.last().unwrap(), &(1.0, 1.0, 0.1));
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn test_logistic_separates() {
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { -1.0 } else { 1.0 } + 0.01 * i as f64])
            .collect();
        let ys: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let w = logistic_fit(&xs, &ys);
        for (x, &y) in xs.iter().zip(&ys) {
            let p = logistic_predict(&w, x);
            assert_eq!(u8::from(p >= 0.5), y, "x {x:?} p {p}");
        }
    }

    fn fake_table(task: TaskName, scores: &[(Group, f64)]) -> ScoreTable {
        use crate::corpus::Gender;
        ScoreTable {
            task,
            alignment: Alignment::Response,
            rows: scores
                .iter()
                .enumerate()
                .map(|(i, (g, s))| ScoreRow {
                    participant_id: format!("p{i:03}"),
                    group: *g,
                    gender: if i % 2 == 0 { Gender::F } else { Gender::M },
                    label: TaskSpec::of(task).label_of(*g),
                    score: *s,
                    per_seed: vec![*s],
                })
                .collect(),
        }
    }

    #[test]
    fn test_evaluate_table_and_matrix_diagonal_consistency() {
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..12 {
            rows.push((Group::C, rng.gen_range(0.0..0.45) + i as f64 * 1e-4));
        }
        for _ in 0..6 {
            rows.push((Group::D, rng.gen_range(0.4..0.9)));
        }
        for _ in 0..6 {
            rows.push((Group::S, rng.gen_range(0.55..1.0)));
        }
        let table = fake_table(TaskName::CvDS, &rows);
        let report = evaluate_table(&table, 300, 17, None).unwrap();
        assert!(report.auc > 0.8);
        report.validate().unwrap();
        assert_eq!(report.per_group.len(), 3);
        assert!(report.p_perm.is_none());

        let matrix = cross_task_matrix(&[&table], 300, 17).unwrap();
        let diag = matrix.entries[0][0].as_ref().unwrap();
        assert_eq!(diag.auc, report.auc);
        assert_eq!(diag.ci, report.auc_ci);
        // Missing tables leave gaps, present ones fill all four columns.
        assert!(matrix.entries[1].iter().all(Option::is_none));
        assert_eq!(matrix.gaps.len(), 12);
        let csv = matrix.to_csv();
        assert!(csv.lines().count() == 17);
    }

    #[test]
    fn test_evaluate_table_with_null_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut rows = Vec::new();
        for _ in 0..10 {
            rows.push((Group::C, rng.gen_range(0.0..0.3)));
        }
        for _ in 0..10 {
            rows.push((Group::S, rng.gen_range(0.7..1.0)));
        }
        let table = fake_table(TaskName::CvS, &rows);
        let null_tables: Vec<ScoreTable> = (0..3)
            .map(|_| {
                let rows: Vec<(Group, f64)> = (0..20)
                    .map(|i| {
                        (
                            if i < 10 { Group::C } else { Group::S },
                            rng.gen_range(0.35..0.65),
                        )
                    })
                    .collect();
                fake_table(TaskName::CvS, &rows)
            })
            .collect();
        let report = evaluate_table(&table, 500, 8, Some(&null_tables)).unwrap();
        assert_eq!(report.p_perm, Some(PERMUTATION_P_FLOOR));
        report.validate().unwrap();
        let json = report.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
