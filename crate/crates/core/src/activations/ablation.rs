use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::profile::ActivationProfile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    #[default]
    MeanActivation,
}

/// Neurons whose gate activation is forced to zero, as `(layer, neuron)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<RankKey>,
    neurons: Vec<(usize, usize)>,
}

impl AblationSet {
    /// Rejects duplicate indices.
    pub fn new(neurons: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for n in neurons {
            if !seen.insert(n) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate neuron (layer {}, neuron {})",
                    n.0, n.1
                )));
            }
        }
        Ok(Self {
            fraction: None,
            key: None,
            neurons: seen.into_iter().collect(),
        })
    }

    pub fn all(n_layers: usize, d_ff: usize) -> Self {
        Self {
            fraction: Some(1.0),
            key: None,
            neurons: (0..n_layers).flat_map(|l| (0..d_ff).map(move |j| (l, j))).collect(),
        }
    }

    pub fn neurons(&self) -> &[(usize, usize)] {
        &self.neurons
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn contains(&self, layer: usize, neuron: usize) -> bool {
        self.neurons.binary_search(&(layer, neuron)).is_ok()
    }

    /// `[layer][neuron]` flags, checking every index is in range.
    pub fn masks(&self, n_layers: usize, d_ff: usize) -> Result<Vec<Vec<bool>>> {
        let mut masks = vec![vec![false; d_ff]; n_layers];
        for &(l, j) in &self.neurons {
            if l >= n_layers || j >= d_ff {
                return Err(Error::InvalidArgument(format!(
                    "ablation index (layer {l}, neuron {j}) outside {n_layers} x {d_ff}"
                )));
            }
            masks[l][j] = true;
        }
        Ok(masks)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(json)?;
        let mut set = Self::new(raw.neurons)?;
        set.fraction = raw.fraction;
        set.key = raw.key;
        Ok(set)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Number of neurons selected per layer: `⌈p · d_m⌉`, at least one. A small
/// slack keeps representable products such as `0.05 · 100` from rounding up.
pub fn top_count(p: f64, d_ff: usize) -> usize {
    let k = (p * d_ff as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(d_ff)
}

/// Per layer, the `⌈p · d_m⌉` neurons with the largest key; ties go to the
/// lower index.
pub fn select_top(profile: &ActivationProfile, p: f64, key: RankKey) -> Result<AblationSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {p} outside (0, 1]")));
    }
    let k = top_count(p, profile.d_ff);
    let mut neurons = Vec::with_capacity(k * profile.n_layers);
    for (l, row) in profile.mean_activation.iter().enumerate() {
        let values = match key {
            RankKey::MeanActivation => row,
        };
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("profile layer {l}")));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        neurons.extend(chosen.into_iter().map(|j| (l, j)));
    }
    Ok(AblationSet {
        fraction: Some(p),
        key: Some(key),
        neurons,
    })
}

/// `ΔP = (P_orig − P_abl) / P_orig · 100`; `None` when `P_orig ≤ 0`.
pub fn perf_drop(p_original: f64, p_ablated: f64) -> Option<f64> {
    (p_original > 0.0).then(|| (p_original - p_ablated) / p_original * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(means: Vec<f64>) -> ActivationProfile {
        ActivationProfile {
            n_layers: 1,
            d_ff: means.len(),
            token_count: 1,
            window: 512,
            active_fraction: vec![vec![0.0; means.len()]],
            mean_activation: vec![means],
        }
    }

    #[test]
    fn select_top_rules() {
        let p = profile(vec![5.0, 5.0, 1.0, 0.0]);
        let s = select_top(&p, 0.5, RankKey::MeanActivation).unwrap();
        assert_eq!(s.neurons(), &[(0, 0), (0, 1)]);
        let s = select_top(&p, 0.01, RankKey::MeanActivation).unwrap();
        assert_eq!(s.len(), 1);
        let s = select_top(&p, 1.0, RankKey::MeanActivation).unwrap();
        assert_eq!(s.len(), 4);
        assert!(select_top(&p, 0.0, RankKey::MeanActivation).is_err());
        assert!(select_top(&p, 1.1, RankKey::MeanActivation).is_err());
        let p = profile(vec![0.0, 1.0, 3.0, 2.0]);
        let s = select_top(&p, 0.5, RankKey::MeanActivation).unwrap();
        assert_eq!(s.neurons(), &[(0, 2), (0, 3)]);
    }

    #[test]
    fn counts() {
        assert_eq!(top_count(0.05, 100), 5);
        assert_eq!(top_count(0.01, 4), 1);
        assert_eq!(top_count(0.3, 10), 3);
        assert_eq!(top_count(0.31, 10), 4);
    }

    #[test]
    fn perf_drop_cases() {
        assert_eq!(perf_drop(80.0, 60.0), Some(25.0));
        assert_eq!(perf_drop(42.0, 42.0), Some(0.0));
        assert_eq!(perf_drop(50.0, 0.0), Some(100.0));
        assert_eq!(perf_drop(0.0, 10.0), None);
        assert!(perf_drop(50.0, 60.0).unwrap() < 0.0);
    }

    #[test]
    fn set_validation() {
        assert!(AblationSet::new([(0, 1), (0, 1)]).is_err());
        let s = AblationSet::new([(1, 0), (0, 2)]).unwrap();
        assert_eq!(s.neurons(), &[(0, 2), (1, 0)]);
        assert!(s.masks(2, 3).is_ok());
        assert!(s.masks(1, 3).is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(AblationSet::from_json(&json).unwrap(), s);
        assert!(AblationSet::from_json(r#"{"neurons":[[0,0],[0,0]]}"#).is_err());
    }
}
