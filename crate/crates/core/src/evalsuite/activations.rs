use std::collections::HashSet;

use crate::error::{invalid, Result};
use crate::tensornet::{Sequential, Tensor};

/// An input patch and the image it was cut from.
#[derive(Clone, Debug)]
pub struct Patch {
    pub id: String,
    pub source: String,
    pub tensor: Tensor<f32>,
}

/// The `k` patches with the largest mean absolute response of `channel`
/// after the first `layers` layers of `net`, at most one per source image.
pub fn top_activations(
    net: &Sequential<f32>,
    layers: usize,
    channel: usize,
    patches: &[Patch],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let sources: HashSet<&str> = patches.iter().map(|p| p.source.as_str()).collect();
    if k > sources.len() {
        return Err(invalid!("k = {k} exceeds the {} distinct source images", sources.len()));
    }
    let mut scored = Vec::with_capacity(patches.len());
    for p in patches {
        let out = net.forward_to(&p.tensor, layers)?;
        let channels = out.shape().first().copied().unwrap_or(0);
        if channel >= channels {
            return Err(invalid!("channel {channel} out of range for {channels} channels"));
        }
        let plane = out.len() / channels;
        let resp = &out.data()[channel * plane..(channel + 1) * plane];
        let score = resp.iter().map(|v| v.abs() as f64).sum::<f64>() / plane as f64;
        scored.push((p, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let mut used = HashSet::new();
    Ok(scored
        .into_iter()
        .filter(|(p, _)| used.insert(p.source.as_str()))
        .take(k)
        .map(|(p, s)| (p.id.clone(), s))
        .collect())
}
