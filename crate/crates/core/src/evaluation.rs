//! Zero-shot classification, tagging metrics, template ablation and the
//! few-shot sweep.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::DatasetRecord;
use crate::encoders::{encode_audio, encode_text, Embedding, ModelParams};
use crate::error::{MuserError, Result};
use crate::numerics::matrix::dot;
use crate::numerics::Matrix;
use crate::text::{class_prompts, tokenize, Rendering, TemplateSpec, Vocab};
use crate::training::Checkpoint;

/// Scores every prompt row against `e` and returns the best class; ties go
/// to the lowest index.
pub fn zero_shot_classify(e: &Embedding, prompt_embs: &Matrix) -> Result<(usize, Vec<f64>)> {
    if prompt_embs.rows() == 0 {
        return Err(MuserError::invalid("zero-shot classification needs at least one class"));
    }
    if prompt_embs.cols() != e.0.len() {
        return Err(MuserError::Shape {
            op: "zero_shot_classify",
            left: format!("embedding of {}", e.0.len()),
            right: prompt_embs.shape_str(),
        });
    }
    let scores: Vec<f64> = (0..prompt_embs.rows()).map(|c| dot(prompt_embs.row(c), &e.0)).collect();
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    Ok((best, scores))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(MuserError::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(MuserError::invalid("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// A macro-averaged metric with its per-column values. Columns lacking
/// either a positive or a negative are `None` and listed in `excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMetric {
    pub value: f64,
    pub per_column: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn check_tagging(scores: &Matrix, labels: &Matrix) -> Result<()> {
    if scores.shape() != labels.shape() {
        return Err(MuserError::Shape {
            op: "tagging metric",
            left: scores.shape_str(),
            right: labels.shape_str(),
        });
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(MuserError::invalid("labels must be 0 or 1"));
    }
    scores.check_finite("tagging scores")
}

fn per_column(
    scores: &Matrix,
    labels: &Matrix,
    metric: impl Fn(&[(f64, bool)], usize, usize) -> f64,
) -> Result<MacroMetric> {
    check_tagging(scores, labels)?;
    let mut per = Vec::with_capacity(scores.cols());
    let mut excluded = Vec::new();
    for c in 0..scores.cols() {
        let col: Vec<(f64, bool)> = (0..scores.rows())
            .map(|r| (scores.get(r, c), labels.get(r, c) == 1.0))
            .collect();
        let pos = col.iter().filter(|(_, y)| *y).count();
        let neg = col.len() - pos;
        if pos == 0 || neg == 0 {
            excluded.push(c);
            per.push(None);
        } else {
            per.push(Some(metric(&col, pos, neg)));
        }
    }
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(MuserError::data(
            "no column has both a positive and a negative example",
        ));
    }
    Ok(MacroMetric {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        per_column: per,
        excluded,
    })
}

/// Mann–Whitney AUC per column (ties count one half), macro-averaged.
pub fn roc_auc_macro(scores: &Matrix, labels: &Matrix) -> Result<MacroMetric> {
    per_column(scores, labels, |col, pos, neg| {
        let mut sorted = col.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Twice the pair credit, kept integral.
        let mut credit2: u64 = 0;
        let mut neg_below: u64 = 0;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j].0 == sorted[i].0 {
                j += 1;
            }
            let p = sorted[i..j].iter().filter(|(_, y)| *y).count() as u64;
            let n = (j - i) as u64 - p;
            credit2 += p * (2 * neg_below + n);
            neg_below += n;
            i = j;
        }
        (credit2 as f64 / 2.0) / (pos as f64 * neg as f64)
    })
}

/// Step-sum average precision per column over a stable descending ranking,
/// macro-averaged.
pub fn average_precision_macro(scores: &Matrix, labels: &Matrix) -> Result<MacroMetric> {
    per_column(scores, labels, |col, pos, _| {
        let mut order: Vec<usize> = (0..col.len()).collect();
        order.sort_by(|&a, &b| col[b].0.total_cmp(&col[a].0));
        let mut tp = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if col[i].1 {
                tp += 1;
                ap += (tp as f64 / (rank + 1) as f64) / pos as f64;
            }
        }
        ap
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Genre,
    Tagging,
}

impl std::str::FromStr for TaskKind {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genre" => Ok(TaskKind::Genre),
            "tagging" => Ok(TaskKind::Tagging),
            other => Err(MuserError::invalid(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Genre => "genre",
            TaskKind::Tagging => "tagging",
        })
    }
}

/// Genre: one class per distinct value of the metadata field `field`.
/// Tagging: one tag per distinct string across the records' labels; `field`
/// is unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub field: String,
}

impl TaskSpec {
    pub fn genre() -> Self {
        TaskSpec {
            kind: TaskKind::Genre,
            field: "genre".into(),
        }
    }

    pub fn tagging() -> Self {
        TaskSpec {
            kind: TaskKind::Tagging,
            field: String::new(),
        }
    }

    pub fn new(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Genre => Self::genre(),
            TaskKind::Tagging => Self::tagging(),
        }
    }
}

/// Class names with the member records of each class (indices into the
/// dataset), sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLabels {
    pub classes: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl TaskLabels {
    pub fn from_records(records: &[DatasetRecord], task: &TaskSpec) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            match task.kind {
                TaskKind::Genre => {
                    let v = r.metadata.get(&task.field).ok_or_else(|| {
                        MuserError::data(format!("record `{}` lacks field `{}`", r.id, task.field))
                    })?;
                    map.entry(v.clone()).or_default().push(i);
                }
                TaskKind::Tagging => {
                    for l in &r.labels {
                        let m = map.entry(l.clone()).or_default();
                        if m.last() != Some(&i) {
                            m.push(i);
                        }
                    }
                }
            }
        }
        let (classes, members) = map.into_iter().unzip();
        Ok(TaskLabels { classes, members })
    }

    /// Class index of every record (genre task).
    pub fn class_indices(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for (c, m) in self.members.iter().enumerate() {
            m.iter().for_each(|&i| out[i] = c);
        }
        out
    }

    /// `n×C` binary membership (tagging task).
    pub fn binary(&self, n: usize) -> Matrix {
        let mut out = Matrix::zeros(n, self.classes.len());
        for (c, m) in self.members.iter().enumerate() {
            m.iter().for_each(|&i| out.set(i, c, 1.0));
        }
        out
    }

    /// Template fields for each class: per field, the most common value among
    /// the class's records (ties go to the smallest value).
    pub fn class_fields(&self, records: &[DatasetRecord], fields: &[String]) -> Vec<BTreeMap<String, String>> {
        self.members
            .iter()
            .map(|members| {
                fields
                    .iter()
                    .filter_map(|f| {
                        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                        for &i in members {
                            if let Some(v) = records[i].metadata.get(f) {
                                *counts.entry(v).or_default() += 1;
                            }
                        }
                        let best = counts
                            .into_iter()
                            .fold(None, |best: Option<(&str, usize)>, (v, c)| match best {
                                Some((_, bc)) if bc >= c => best,
                                _ => Some((v, c)),
                            })?;
                        Some((f.clone(), best.0.to_string()))
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    /// Recall of this class (genre task).
    pub accuracy: Option<f64>,
    pub roc_auc: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub n_examples: usize,
    pub accuracy: Option<f64>,
    pub roc_auc_macro: Option<f64>,
    pub ap_macro: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Tags left out of the macro averages for lacking positives or negatives.
    pub excluded: Vec<String>,
}

impl MetricsReport {
    /// `key=value` lines; floats use round-trip formatting.
    pub fn to_kv(&self) -> String {
        let mut out = format!("task={}\nn_examples={}\n", self.task, self.n_examples);
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{k}={v}\n"));
            }
        };
        put("accuracy", self.accuracy);
        put("roc_auc_macro", self.roc_auc_macro);
        put("ap_macro", self.ap_macro);
        for c in &self.per_class {
            put(&format!("class.{}.accuracy", c.name), c.accuracy);
            put(&format!("class.{}.roc_auc", c.name), c.roc_auc);
            put(&format!("class.{}.ap", c.name), c.ap);
        }
        if !self.excluded.is_empty() {
            out.push_str(&format!("excluded={}\n", self.excluded.join(",")));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MuserError::format(e.to_string()))
    }
}

/// Unit-norm prompt embeddings, one row per prompt.
pub fn embed_prompts(prompts: &[String], params: &ModelParams, vocab: &Vocab, max_len: usize) -> Result<Matrix> {
    let rows = prompts
        .iter()
        .map(|p| Ok(encode_text(&tokenize(p, vocab, max_len)?, params)?.0))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Audio embeddings of every record, one row each.
pub fn embed_audio(records: &[DatasetRecord], params: &ModelParams) -> Result<Matrix> {
    let rows = records
        .iter()
        .map(|r| Ok(encode_audio(&r.load_audio()?, params)?.0))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Scores the dataset against one class-filled prompt per class. Class
/// prompt fields come from [`TaskLabels::class_fields`].
pub fn eval_zero_shot(
    records: &[DatasetRecord],
    ckpt: &Checkpoint,
    template: &TemplateSpec,
    task: &TaskSpec,
) -> Result<MetricsReport> {
    let audio = embed_audio(records, &ckpt.params)?;
    eval_with_audio(records, &audio, ckpt, template, task)
}

fn eval_with_audio(
    records: &[DatasetRecord],
    audio: &Matrix,
    ckpt: &Checkpoint,
    template: &TemplateSpec,
    task: &TaskSpec,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(MuserError::data("evaluation dataset is empty"));
    }
    let labels = TaskLabels::from_records(records, task)?;
    let fields = labels.class_fields(records, template.required_fields());
    let prompts = class_prompts(template, &fields, Rendering::DropMissingClauses)?;
    let prompt_embs = embed_prompts(&prompts, &ckpt.params, &ckpt.vocab, ckpt.config.max_len)?;
    let n = records.len();
    match task.kind {
        TaskKind::Genre => {
            let truth = labels.class_indices(n);
            let mut preds = Vec::with_capacity(n);
            for i in 0..n {
                let (c, _) = zero_shot_classify(&Embedding(audio.row(i).to_vec()), &prompt_embs)?;
                preds.push(c);
            }
            let per_class = labels
                .classes
                .iter()
                .zip(&labels.members)
                .map(|(name, m)| ClassMetrics {
                    name: name.clone(),
                    accuracy: Some(m.iter().filter(|&&i| preds[i] == truth[i]).count() as f64 / m.len() as f64),
                    roc_auc: None,
                    ap: None,
                })
                .collect();
            Ok(MetricsReport {
                task: TaskKind::Genre,
                n_examples: n,
                accuracy: Some(accuracy(&preds, &truth)?),
                roc_auc_macro: None,
                ap_macro: None,
                per_class,
                excluded: Vec::new(),
            })
        }
        TaskKind::Tagging => {
            let scores = crate::numerics::matrix::matmul_bt_unchecked(audio, &prompt_embs);
            let y = labels.binary(n);
            let auc = roc_auc_macro(&scores, &y)?;
            let ap = average_precision_macro(&scores, &y)?;
            let per_class = labels
                .classes
                .iter()
                .enumerate()
                .map(|(c, name)| ClassMetrics {
                    name: name.clone(),
                    accuracy: None,
                    roc_auc: auc.per_column[c],
                    ap: ap.per_column[c],
                })
                .collect();
            Ok(MetricsReport {
                task: TaskKind::Tagging,
                n_examples: n,
                accuracy: None,
                roc_auc_macro: Some(auc.value),
                ap_macro: Some(ap.value),
                per_class,
                excluded: auc.excluded.iter().map(|&c| labels.classes[c].clone()).collect(),
            })
        }
    }
}

/// One report per template, in input order, over the same data and params.
pub fn template_ablation(
    records: &[DatasetRecord],
    ckpt: &Checkpoint,
    templates: &[TemplateSpec],
    task: &TaskSpec,
) -> Result<Vec<(TemplateSpec, MetricsReport)>> {
    if templates.is_empty() {
        return Err(MuserError::invalid("template ablation needs at least one template"));
    }
    let audio = embed_audio(records, &ckpt.params)?;
    templates
        .iter()
        .map(|t| Ok((t.clone(), eval_with_audio(records, &audio, ckpt, t, task)?)))
        .collect()
}

/// Stratified sampling order: each class's records are shuffled, then the
/// classes (sorted by key) are interleaved round-robin. Prefixes of this
/// order are the nested few-shot subsets.
pub fn stratified_order(keys: &[String], seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<Vec<usize>> = groups
        .into_values()
        .map(|mut g| {
            for i in (1..g.len()).rev() {
                g.swap(i, rng.random_range(0..=i));
            }
            g
        })
        .collect();
    let longest = shuffled.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(keys.len());
    for round in 0..longest {
        for g in &mut shuffled {
            if let Some(&i) = g.get(round) {
                order.push(i);
            }
        }
    }
    order
}

/// Subset size for `ratio` of `n` records.
pub fn subset_size(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).floor() as usize
}

/// The first `size` entries of `order`, sorted back into dataset order.
pub fn few_shot_subset(order: &[usize], size: usize) -> Vec<usize> {
    let mut s = order[..size.min(order.len())].to_vec();
    s.sort_unstable();
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotPoint {
    pub ratio: f64,
    pub n_train: usize,
    pub report: Option<MetricsReport>,
    /// Why the point was skipped, if it was.
    pub skipped: Option<String>,
}

/// Runs `fit_and_eval` on nested stratified subsets of `train_set`, one per
/// ratio. Subsets smaller than `min_size` are skipped and flagged.
pub fn few_shot_sweep(
    train_set: &[DatasetRecord],
    strat_field: &str,
    ratios: &[f64],
    seed: u64,
    min_size: usize,
    mut fit_and_eval: impl FnMut(&[DatasetRecord]) -> Result<MetricsReport>,
) -> Result<Vec<FewShotPoint>> {
    if ratios.is_empty() {
        return Err(MuserError::invalid("few-shot sweep needs at least one ratio"));
    }
    if ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(MuserError::invalid("few-shot ratios must lie in (0, 1]"));
    }
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(MuserError::invalid("few-shot ratios must be sorted ascending"));
    }
    let keys: Vec<String> = train_set
        .iter()
        .map(|r| r.metadata.get(strat_field).cloned().unwrap_or_default())
        .collect();
    let order = stratified_order(&keys, seed);
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let size = subset_size(ratio, train_set.len());
        if size < min_size {
            points.push(FewShotPoint {
                ratio,
                n_train: size,
                report: None,
                skipped: Some(format!("{size} examples is below the minimum of {min_size}")),
            });
            continue;
        }
        let subset: Vec<DatasetRecord> = few_shot_subset(&order, size)
            .into_iter()
            .map(|i| train_set[i].clone())
            .collect();
        points.push(FewShotPoint {
            ratio,
            n_train: size,
            report: Some(fit_and_eval(&subset)?),
            skipped: None,
        });
    }
    Ok(points)
}
