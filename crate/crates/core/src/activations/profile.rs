use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::activations::model::{ForwardOptions, ToyModel};
use crate::error::{Error, Result};
use crate::scalar::{KahanSum, Real};

pub const DEFAULT_WINDOW: usize = 512;

/// Per-neuron corpus statistics of the gate activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub n_layers: usize,
    pub d_ff: usize,
    pub token_count: u64,
    pub window: usize,
    /// `[layer][neuron]` mean of `a_j` over all tokens.
    pub mean_activation: Vec<Vec<f64>>,
    /// `[layer][neuron]` fraction of tokens with `a_j > 0`.
    pub active_fraction: Vec<Vec<f64>>,
}

struct WindowStats {
    sums: Vec<Vec<KahanSum<f64>>>,
    active: Vec<Vec<u64>>,
    tokens: u64,
}

/// Stream `corpus` through the model in non-overlapping windows. Windows run
/// in parallel; their accumulators are merged in window order, so the result
/// does not depend on the worker count.
pub fn profile<T: Real>(model: &ToyModel<T>, corpus: &[u32], window: usize) -> Result<ActivationProfile> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let spec = model.spec();
    let (n_layers, d_ff) = (spec.n_layers, spec.d_ff);

    let per_window: Vec<WindowStats> = corpus
        .par_chunks(window)
        .map(|chunk| {
            let out = model.forward(chunk, ForwardOptions::default())?;
            let mut sums = vec![vec![KahanSum::new(); d_ff]; n_layers];
            let mut active = vec![vec![0u64; d_ff]; n_layers];
            for (l, layer) in out.trace.layers.iter().enumerate() {
                for token in layer {
                    for (j, &a) in token.iter().enumerate() {
                        let a = a.as_f64();
                        if !a.is_finite() {
                            return Err(Error::NonFinite(format!("activation layer {l} neuron {j}")));
                        }
                        sums[l][j].add(a);
                        if a > 0.0 {
                            active[l][j] += 1;
                        }
                    }
                }
            }
            Ok(WindowStats {
                sums,
                active,
                tokens: chunk.len() as u64,
            })
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![vec![KahanSum::new(); d_ff]; n_layers];
    let mut active = vec![vec![0u64; d_ff]; n_layers];
    let mut tokens = 0u64;
    for w in &per_window {
        for l in 0..n_layers {
            for j in 0..d_ff {
                sums[l][j].merge(&w.sums[l][j]);
                active[l][j] += w.active[l][j];
            }
        }
        tokens += w.tokens;
    }
    let n = tokens as f64;
    Ok(ActivationProfile {
        n_layers,
        d_ff,
        token_count: tokens,
        window,
        mean_activation: sums
            .iter()
            .map(|row| row.iter().map(|s| s.value() / n).collect())
            .collect(),
        active_fraction: active
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / n).collect())
            .collect(),
    })
}

impl ActivationProfile {
    /// Percent of each layer's neurons set in the binarized pattern.
    pub fn percent_active(&self, policy: BinarizePolicy) -> Result<Vec<f64>> {
        Ok(binarize(self, policy)?.percent_active())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BinarizePolicy {
    /// `z_j = 1` iff the corpus mean of `a_j` is positive.
    #[default]
    MeanPositive,
    /// `z_j = 1` iff the active fraction exceeds `tau`.
    FractionThreshold { tau: f64 },
}

impl FromStr for BinarizePolicy {
    type Err = Error;

    /// `mean_positive` or `fraction_threshold:<tau>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "mean_positive" => Ok(BinarizePolicy::MeanPositive),
            Some(("fraction_threshold", tau)) => {
                let tau: f64 = tau
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad threshold {tau:?}")))?;
                Ok(BinarizePolicy::FractionThreshold { tau })
            }
            _ => Err(Error::InvalidArgument(format!(
                "unknown binarize policy {s:?} (mean_positive | fraction_threshold:<tau>)"
            ))),
        }
    }
}

/// Per-layer bit vectors, serialized as strings of `0`/`1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryPattern {
    pub layers: Vec<Vec<bool>>,
}

impl BinaryPattern {
    pub fn percent_active(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|z| {
                if z.is_empty() {
                    0.0
                } else {
                    100.0 * z.iter().filter(|&&b| b).count() as f64 / z.len() as f64
                }
            })
            .collect()
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|z| z.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_strings<S: AsRef<str>>(layers: &[S]) -> Result<Self> {
        let layers = layers
            .iter()
            .map(|s| {
                s.as_ref()
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::InvalidArgument(format!("bad pattern character {other:?}"))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl Serialize for BinaryPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BinaryPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        Self::from_strings(&raw).map_err(serde::de::Error::custom)
    }
}

pub fn binarize(profile: &ActivationProfile, policy: BinarizePolicy) -> Result<BinaryPattern> {
    let layers = match policy {
        BinarizePolicy::MeanPositive => profile
            .mean_activation
            .iter()
            .map(|row| row.iter().map(|&m| m > 0.0).collect())
            .collect(),
        BinarizePolicy::FractionThreshold { tau } => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1]")));
            }
            profile
                .active_fraction
                .iter()
                .map(|row| row.iter().map(|&f| f > tau).collect())
                .collect()
        }
    };
    Ok(BinaryPattern { layers })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// UTF-8 text, one token per byte.
    #[default]
    Text,
    /// Raw little-endian u32 token ids.
    U32,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(CorpusFormat::Text),
            "u32" => Ok(CorpusFormat::U32),
            _ => Err(Error::InvalidArgument(format!(
                "unknown corpus format {s:?} (text | u32)"
            ))),
        }
    }
}

pub fn decode_corpus(bytes: &[u8], format: CorpusFormat) -> Result<Vec<u32>> {
    match format {
        CorpusFormat::Text => {
            std::str::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("corpus is not UTF-8: {e}")))?;
            Ok(bytes.iter().map(|&b| b as u32).collect())
        }
        CorpusFormat::U32 => {
            if !bytes.len().is_multiple_of(4) {
                return Err(Error::InvalidArgument(format!(
                    "u32 corpus length {} is not a multiple of 4",
                    bytes.len()
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes, format)
}
