use std::fmt::Write as _;

use crate::error::{invalid, Result};

/// Unit-norm feature vectors keyed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex {
    ids: Vec<String>,
    features: Vec<Vec<f32>>,
    labels: Option<Vec<usize>>,
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(invalid!("feature vector has norm {norm}"));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

impl FeatureIndex {
    /// Normalizes every vector; zero vectors are rejected.
    pub fn new(ids: Vec<String>, raw: Vec<Vec<f32>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if ids.len() != raw.len() || labels.as_ref().is_some_and(|l| l.len() != ids.len()) {
            return Err(invalid!("ids, features and labels differ in length"));
        }
        if let Some(v) = raw.first() {
            if raw.iter().any(|r| r.len() != v.len()) {
                return Err(invalid!("feature vectors differ in dimension"));
            }
        }
        let features = raw.iter().map(|v| unit(v)).collect::<Result<_>>()?;
        Ok(Self { ids, features, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i]
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        let i = self.ids.iter().position(|x| x == id)?;
        self.labels.as_ref().map(|l| l[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub similarity: f64,
}

/// The `k` items closest to `query` by inner product of normalized features.
pub fn retrieve(query: &[f32], index: &FeatureIndex, k: usize) -> Result<Vec<Ranked>> {
    if k > index.len() {
        return Err(invalid!("k = {k} exceeds index size {}", index.len()));
    }
    if !index.is_empty() && query.len() != index.dim() {
        return Err(invalid!("query dimension {} vs index dimension {}", query.len(), index.dim()));
    }
    let q = unit(query)?;
    let mut ranked: Vec<Ranked> = index
        .ids
        .iter()
        .zip(&index.features)
        .map(|(id, f)| {
            let s: f64 = q.iter().zip(f).map(|(&a, &b)| a as f64 * b as f64).sum();
            Ranked { id: id.clone(), similarity: s.clamp(-1.0, 1.0) }
        })
        .collect();
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// One point at each rank holding a relevant item.
pub fn precision_recall(ranked_labels: &[usize], query_label: usize) -> Result<Vec<PrPoint>> {
    let total = ranked_labels.iter().filter(|&&l| l == query_label).count();
    if total == 0 {
        return Err(invalid!("no relevant items for label {query_label}"));
    }
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(total);
    for (r, &l) in ranked_labels.iter().enumerate() {
        if l == query_label {
            hits += 1;
            points.push(PrPoint { recall: hits as f64 / total as f64, precision: hits as f64 / (r + 1) as f64 });
        }
    }
    Ok(points)
}

pub fn pr_to_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("recall,precision\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6}", p.recall, p.precision);
    }
    s
}

/// `id similarity` per line.
pub fn ranking_to_text(ranked: &[Ranked]) -> String {
    let mut s = String::new();
    for r in ranked {
        let _ = writeln!(s, "{} {:.6}", r.id, r.similarity);
    }
    s
}
