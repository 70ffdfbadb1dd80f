//! Query composition, cosine ranking and Recall@K reporting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoders, Template};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::pcm::{map_forward, MappingParams};
use crate::store::{normalize_slice, read_jsonl, write_jsonl, Embedding, Store};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DomainConversion,
    ObjectComposition,
    SentenceManipulation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::DomainConversion,
        TaskKind::ObjectComposition,
        TaskKind::SentenceManipulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DomainConversion => "domain_conversion",
            TaskKind::ObjectComposition => "object_composition",
            TaskKind::SentenceManipulation => "sentence_manipulation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task kind `{s}`")))
    }

    /// Whether `template` has the shape this kind of task uses.
    pub fn accepts(self, template: &Template) -> bool {
        matches!(
            (self, template),
            (TaskKind::DomainConversion, Template::Domain { .. })
                | (TaskKind::ObjectComposition, Template::ObjectComposition { .. })
                | (TaskKind::SentenceManipulation, Template::Sentence { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub reference_id: String,
    pub reference: Embedding,
    pub template: Template,
    /// Gallery indices of the ground-truth targets.
    pub truth: Vec<usize>,
}

/// Queries of one kind against a shared gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub kind: TaskKind,
    pub queries: Vec<EvalQuery>,
    pub gallery_ids: Vec<String>,
    pub gallery: Vec<Embedding>,
}

impl TaskSet {
    pub fn validate(&self) -> Result<()> {
        if self.gallery.is_empty() {
            return Err(Error::Empty("gallery"));
        }
        if self.gallery.len() != self.gallery_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: self.gallery.len(),
                got: self.gallery_ids.len(),
                context: "gallery ids",
            });
        }
        for q in &self.queries {
            if !self.kind.accepts(&q.template) {
                return Err(Error::InvalidTemplate(format!(
                    "{} task carries a {} template",
                    self.kind.name(),
                    q.template.kind_name()
                )));
            }
            if q.truth.is_empty() {
                return Err(Error::Empty("query ground truth"));
            }
            if let Some(&t) = q.truth.iter().find(|&&t| t >= self.gallery.len()) {
                return Err(Error::InvalidConfig(format!("truth index {t} outside gallery")));
            }
        }
        Ok(())
    }
}

/// One query per line of a task file; truth is given as store ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLine {
    pub kind: TaskKind,
    pub reference_id: String,
    pub reference: Embedding,
    pub template: Template,
    pub truth: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryLine {
    pub id: String,
}

/// Writes `tasks` as a JSON-lines task file plus a gallery manifest. All task
/// sets must share one gallery.
pub fn write_tasks(tasks_path: impl AsRef<Path>, gallery_path: impl AsRef<Path>, tasks: &[TaskSet]) -> Result<()> {
    let Some(first) = tasks.first() else {
        return Err(Error::Empty("evaluation task set"));
    };
    if tasks.iter().any(|t| t.gallery_ids != first.gallery_ids) {
        return Err(Error::InvalidConfig("task sets do not share a gallery".into()));
    }
    let lines: Vec<TaskLine> = tasks
        .iter()
        .flat_map(|t| {
            t.queries.iter().map(|q| TaskLine {
                kind: t.kind,
                reference_id: q.reference_id.clone(),
                reference: q.reference.clone(),
                template: q.template.clone(),
                truth: q.truth.iter().map(|&i| t.gallery_ids[i].clone()).collect(),
            })
        })
        .collect();
    write_jsonl(tasks_path, &lines)?;
    let gallery: Vec<GalleryLine> = first
        .gallery_ids
        .iter()
        .map(|id| GalleryLine { id: id.clone() })
        .collect();
    write_jsonl(gallery_path, &gallery)
}

/// Reads a task file and gallery manifest, resolving ids against `store`.
/// Task sets come back in [`TaskKind::ALL`] order.
pub fn read_tasks(tasks_path: impl AsRef<Path>, gallery_path: impl AsRef<Path>, store: &Store) -> Result<Vec<TaskSet>> {
    let lines: Vec<TaskLine> = read_jsonl(tasks_path)?;
    let gallery_lines: Vec<GalleryLine> = read_jsonl(gallery_path)?;
    let mut gallery_ids = Vec::with_capacity(gallery_lines.len());
    let mut gallery = Vec::with_capacity(gallery_lines.len());
    for g in gallery_lines {
        let i = store.index_of(&g.id).ok_or_else(|| Error::UnknownImage(g.id.clone()))?;
        gallery.push(store.records()[i].image.embedding.clone());
        gallery_ids.push(g.id);
    }
    let position: HashMap<&str, usize> = gallery_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut sets = Vec::new();
    for kind in TaskKind::ALL {
        let queries = lines
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| {
                let truth = l
                    .truth
                    .iter()
                    .map(|id| {
                        position
                            .get(id.as_str())
                            .copied()
                            .ok_or_else(|| Error::UnknownImage(id.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EvalQuery {
                    reference_id: l.reference_id.clone(),
                    reference: l.reference.clone(),
                    template: l.template.clone(),
                    truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if !queries.is_empty() {
            let set = TaskSet {
                kind,
                queries,
                gallery_ids: gallery_ids.clone(),
                gallery: gallery.clone(),
            };
            set.validate()?;
            sets.push(set);
        }
    }
    if sets.is_empty() {
        return Err(Error::Empty("evaluation task set"));
    }
    Ok(sets)
}

/// `S_* = f(v_r)`, placed in `template`, encoded and L2-normalized.
pub fn compose_query(
    params: &MappingParams,
    v_r: &[f64],
    template: &Template,
    encoders: &Encoders,
) -> Result<Embedding> {
    let (token, _) = map_forward(params, v_r)?;
    let prompt = encoders.prompt(template, Some(&token))?;
    let out = encoders.text.forward(&prompt)?;
    Embedding::new(normalize_slice(out.values()).map_err(|_| Error::ZeroNorm("composed query"))?)
}

/// Row-normalized gallery for repeated ranking.
#[derive(Clone, Debug)]
pub struct Gallery {
    unit: Matrix,
}

impl Gallery {
    pub fn new(embeddings: &[Embedding]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("gallery"));
        }
        let rows = embeddings
            .iter()
            .map(|e| normalize_slice(e.values()).map_err(|_| Error::ZeroNorm("gallery entry")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            unit: Matrix::from_rows(&rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.unit.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.rows() == 0
    }

    /// Indices by descending cosine similarity, ties to the lowest index.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        if query.len() != self.unit.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.unit.cols(),
                got: query.len(),
                context: "query vs gallery",
            });
        }
        let q = normalize_slice(query).map_err(|_| Error::ZeroNorm("query"))?;
        let scores: Vec<f64> = self.unit.iter_rows().map(|r| dot(r, &q)).collect();
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(idx)
    }
}

pub fn rank_candidates(query: &[f64], gallery: &[Embedding]) -> Result<Vec<usize>> {
    Gallery::new(gallery)?.rank(query)
}

/// Fraction of queries with at least one ground-truth index in the top `k`.
/// `k` beyond a ranking's length is clamped to it with a warning.
pub fn recall_at_k(rankings: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if rankings.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: rankings.len(),
            got: truth.len(),
            context: "rankings vs truth sets",
        });
    }
    if rankings.is_empty() {
        return Err(Error::Empty("queries"));
    }
    let mut warned = false;
    let mut hits = 0usize;
    for (ranked, targets) in rankings.iter().zip(truth) {
        if targets.is_empty() {
            return Err(Error::Empty("query ground truth"));
        }
        if k > ranked.len() && !warned {
            log::warn!("K={k} exceeds gallery size {}; clamping", ranked.len());
            warned = true;
        }
        let top = &ranked[..k.min(ranked.len())];
        if top.iter().any(|i| targets.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rows: Vec<ReportRow>,
    pub queries: Vec<(String, usize)>,
    pub seed: u64,
    pub config_hash: String,
}

pub const AVERAGE_ROW: &str = "average";

impl RetrievalReport {
    pub fn recall(&self, task: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.task == task && r.k == k).map(|r| r.recall)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,K,recall\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.task, r.k, r.recall);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table with one column per K.
    pub fn to_text(&self) -> String {
        let mut ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        let width = tasks.iter().map(|t| t.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}", "task");
        for k in &ks {
            let _ = write!(s, " {:>8}", format!("R@{k}"));
        }
        s.push('\n');
        for t in tasks {
            let _ = write!(s, "{t:<width$}");
            for &k in &ks {
                match self.recall(t, k) {
                    Some(v) => {
                        let _ = write!(s, " {:>8.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "seed {} config {}", self.seed, self.config_hash);
        s
    }
}

/// Rankings of every query in `task` under `params`.
pub fn rank_task(params: &MappingParams, task: &TaskSet, encoders: &Encoders) -> Result<Vec<Vec<usize>>> {
    task.validate()?;
    let gallery = Gallery::new(&task.gallery)?;
    task.queries
        .iter()
        .map(|q| {
            let query = compose_query(params, q.reference.values(), &q.template, encoders)?;
            gallery.rank(query.values())
        })
        .collect()
}

/// Recall@K per task plus an arithmetic-mean row across tasks.
pub fn evaluate(
    params: &MappingParams,
    tasks: &[TaskSet],
    encoders: &Encoders,
    ks: &[usize],
    seed: u64,
    config_hash: &str,
) -> Result<RetrievalReport> {
    if tasks.is_empty() || tasks.iter().all(|t| t.queries.is_empty()) {
        return Err(Error::Empty("evaluation task set"));
    }
    if ks.is_empty() {
        return Err(Error::InvalidConfig("at least one K is required".into()));
    }
    let mut rows = Vec::new();
    let mut queries = Vec::new();
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
    for task in tasks.iter().filter(|t| !t.queries.is_empty()) {
        let rankings = rank_task(params, task, encoders)?;
        let truth: Vec<Vec<usize>> = task.queries.iter().map(|q| q.truth.clone()).collect();
        for (j, &k) in ks.iter().enumerate() {
            let recall = recall_at_k(&rankings, &truth, k)?;
            per_k[j].push(recall);
            rows.push(ReportRow {
                task: task.kind.name().to_string(),
                k,
                recall,
            });
        }
        queries.push((task.kind.name().to_string(), task.queries.len()));
    }
    for (j, &k) in ks.iter().enumerate() {
        let v = &per_k[j];
        rows.push(ReportRow {
            task: AVERAGE_ROW.to_string(),
            k,
            recall: v.iter().sum::<f64>() / v.len() as f64,
        });
    }
    Ok(RetrievalReport {
        rows,
        queries,
        seed,
        config_hash: config_hash.to_string(),
    })
}
