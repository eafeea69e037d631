//! Per-component subspace statistics for a tuning vector against its
//! pretrained checkpoint.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::diffcore::TuningVector;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::registry::{ComponentKind, ComponentMap};
use crate::scalar::Real;
use crate::subspace::projection::Projection;
use crate::subspace::rank::select_rank;
use crate::subspace::svd::{dense_svd, randomized_svd, SvdFactors, SvdMethod};
use crate::tensorstore::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SvdChoice {
    Dense,
    Randomized,
    /// Dense up to `auto_dense_limit` on the short side, randomized above.
    Auto,
}

impl FromStr for SvdChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(SvdChoice::Dense),
            "randomized" => Ok(SvdChoice::Randomized),
            "auto" => Ok(SvdChoice::Auto),
            other => Err(Error::InvalidArgument(format!("unknown svd method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubspaceConfig {
    pub eps: f64,
    pub seed: u64,
    pub svd: SvdChoice,
    pub oversample: usize,
    pub power_iters: usize,
    /// First target rank tried by the randomized path; doubled on demand.
    pub initial_rank: usize,
    pub auto_dense_limit: usize,
    /// How energies and norms combine across layers. SSA and k are always
    /// averaged.
    pub aggregation: Aggregation,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            seed: 0,
            svd: SvdChoice::Auto,
            oversample: 8,
            power_iters: 2,
            initial_rank: 16,
            auto_dense_limit: 256,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerEntry {
    pub name: String,
    pub layer: Option<usize>,
    pub kind: ComponentKind,
    pub shape: [usize; 2],
    pub k: usize,
    /// `None` (serialized as `"undefined"`) for a zero update.
    #[serde(serialize_with = "ser_undefined")]
    pub ssa: Option<f64>,
    pub e_par: f64,
    pub e_perp: f64,
    pub t_norm: f64,
    pub captured_energy: f64,
    pub method: SvdMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindSummary {
    pub count: usize,
    /// Mean SSA over entries where it is defined.
    #[serde(serialize_with = "ser_undefined")]
    pub ssa: Option<f64>,
    pub e_par: f64,
    pub e_perp: f64,
    pub t_norm: f64,
    pub k_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorFailure {
    pub name: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubspaceReport {
    pub eps: f64,
    pub aggregation: Aggregation,
    pub per_layer: Vec<LayerEntry>,
    pub per_kind: BTreeMap<ComponentKind, KindSummary>,
    pub failures: Vec<TensorFailure>,
}

fn ser_undefined<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

/// Stable per-tensor seed so randomized factors do not depend on scheduling.
fn tensor_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Factorize `w` and truncate to the rank selected by `eps`.
///
/// The randomized path starts at `initial_rank` and doubles the target rank
/// until the selection rule is satisfiable, capped at `min(m, n)`.
pub fn factorize_selected<T: Real>(w: &Matrix<T>, cfg: &SubspaceConfig, seed: u64) -> Result<(SvdFactors<T>, usize)> {
    let r = w.rows().min(w.cols());
    let use_dense = match cfg.svd {
        SvdChoice::Dense => true,
        SvdChoice::Randomized => false,
        SvdChoice::Auto => r <= cfg.auto_dense_limit,
    };
    if use_dense || r == 0 {
        let f = dense_svd(w)?;
        let k = select_rank(&f.sigma, f.frob_sq, cfg.eps)?;
        return Ok((f.truncate(k), k));
    }
    let mut target = cfg.initial_rank.clamp(1, r);
    loop {
        let f = randomized_svd(w, target, seed, cfg.oversample, cfg.power_iters)?;
        match select_rank(&f.sigma, f.frob_sq, cfg.eps) {
            Ok(k) => return Ok((f.truncate(k), k)),
            Err(Error::NeedMoreFactors { .. }) if target < r => {
                target = (target * 2).min(r);
            }
            Err(e) => return Err(e),
        }
    }
}

fn analyze_one<T: Real>(
    name: &str,
    kind: ComponentKind,
    layer: Option<usize>,
    pre: &Checkpoint,
    delta: &Matrix<T>,
    cfg: &SubspaceConfig,
) -> Result<LayerEntry> {
    let w: Matrix<T> = pre.require(name)?.to_matrix()?;
    if w.shape() != delta.shape() {
        return Err(Error::tensor(
            name,
            format!("pretrained shape {:?} vs update {:?}", w.shape(), delta.shape()),
        ));
    }
    let (factors, k) = factorize_selected(&w, cfg, tensor_seed(cfg.seed, name))?;
    let p = Projection::compute(&factors.u, delta)?;
    Ok(LayerEntry {
        name: name.to_owned(),
        layer,
        kind,
        shape: [w.rows(), w.cols()],
        k,
        ssa: p.ssa(),
        e_par: p.e_par,
        e_perp: p.e_perp,
        t_norm: p.t_norm,
        captured_energy: factors.captured_energy().as_f64(),
        method: factors.method,
    })
}

/// SSA and energy split for every rank-2 Q/K/V/O/Gate/Up/Down tensor of
/// `tv`, against the left singular subspace of the matching tensor in `pre`.
pub fn component_report<T: Real>(
    pre: &Checkpoint,
    tv: &TuningVector<T>,
    map: &ComponentMap,
    cfg: &SubspaceConfig,
) -> Result<SubspaceReport> {
    let mut eligible = Vec::new();
    for (name, delta) in tv.deltas() {
        let (kind, layer) = map.classify(name);
        if kind.is_projection() && delta.rank() == 2 {
            eligible.push((name.as_str(), kind, layer, delta));
        }
    }
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "no rank-2 Q/K/V/O/Gate/Up/Down tensors to analyze".into(),
        ));
    }
    let results: Vec<Result<LayerEntry>> = eligible
        .par_iter()
        .map(|&(name, kind, layer, delta)| {
            let t = delta.to_matrix(name)?;
            analyze_one(name, kind, layer, pre, &t, cfg)
        })
        .collect();

    let mut per_layer = Vec::new();
    let mut failures = Vec::new();
    for ((name, ..), res) in eligible.iter().zip(results) {
        match res {
            Ok(e) => per_layer.push(e),
            Err(e) => failures.push(TensorFailure {
                name: (*name).to_owned(),
                error: e.to_string(),
            }),
        }
    }
    per_layer.sort_by(|a, b| (a.layer, a.kind, &a.name).cmp(&(b.layer, b.kind, &b.name)));
    let per_kind = summarize(&per_layer, cfg.aggregation);
    Ok(SubspaceReport {
        eps: cfg.eps,
        aggregation: cfg.aggregation,
        per_layer,
        per_kind,
        failures,
    })
}

fn summarize(entries: &[LayerEntry], agg: Aggregation) -> BTreeMap<ComponentKind, KindSummary> {
    let mut out = BTreeMap::new();
    for kind in ComponentKind::PROJECTIONS {
        let rows: Vec<&LayerEntry> = entries.iter().filter(|e| e.kind == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let defined: Vec<f64> = rows.iter().filter_map(|e| e.ssa).collect();
        let ssa = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let combine = |f: fn(&LayerEntry) -> f64| {
            let s: f64 = rows.iter().map(|e| f(e)).sum();
            match agg {
                Aggregation::Mean => s / n,
                Aggregation::Sum => s,
            }
        };
        out.insert(
            kind,
            KindSummary {
                count: rows.len(),
                ssa,
                e_par: combine(|e| e.e_par),
                e_perp: combine(|e| e.e_perp),
                t_norm: combine(|e| e.t_norm),
                k_mean: rows.iter().map(|e| e.k as f64).sum::<f64>() / n,
            },
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::extract;
    use crate::registry::AlignMode;
    use crate::tensorstore::{DType, TensorRecord};

    fn single_layer() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            TensorRecord::from_values("layers.0.attn.wq", DType::F32, vec![2, 2], &[2.0f64, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        c.insert(TensorRecord::from_values("norm.weight", DType::F32, vec![2], &[1.0f64, 1.0]).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn zero_update_is_undefined() {
        let pre = single_layer();
        let tv = extract::<f64>(&pre, &pre, AlignMode::Strict).unwrap();
        let r = component_report(&pre, &tv, &ComponentMap::default(), &SubspaceConfig::default()).unwrap();
        assert_eq!(r.per_layer.len(), 1);
        assert_eq!(r.per_layer[0].ssa, None);
        assert_eq!((r.per_layer[0].e_par, r.per_layer[0].e_perp), (0.0, 0.0));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_kind"]["Q"]["ssa"], "undefined");
    }

    #[test]
    fn single_layer_mean_equals_value() {
        let pre = single_layer();
        let mut ft = Checkpoint::new();
        ft.insert(
            TensorRecord::from_values("layers.0.attn.wq", DType::F32, vec![2, 2], &[2.0f64, 0.0, 0.0, 6.0]).unwrap(),
        )
        .unwrap();
        ft.insert(pre.get("norm.weight").unwrap().clone()).unwrap();
        let tv = extract::<f64>(&pre, &ft, AlignMode::Strict).unwrap();
        let cfg = SubspaceConfig {
            eps: 0.5,
            ..SubspaceConfig::default()
        };
        let r = component_report(&pre, &tv, &ComponentMap::default(), &cfg).unwrap();
        let e = &r.per_layer[0];
        assert_eq!(e.k, 1);
        assert_eq!(e.ssa, Some(0.0));
        let q = &r.per_kind[&ComponentKind::Q];
        assert_eq!(q.ssa, e.ssa);
        assert_eq!(q.e_perp, e.e_perp);
        assert_eq!(q.k_mean, 1.0);
    }

    #[test]
    fn no_eligible_tensors() {
        let mut c = Checkpoint::new();
        c.insert(TensorRecord::from_values("norm.weight", DType::F32, vec![2], &[1.0f64, 1.0]).unwrap())
            .unwrap();
        let tv = extract::<f64>(&c, &c, AlignMode::Strict).unwrap();
        assert!(component_report(&c, &tv, &ComponentMap::default(), &SubspaceConfig::default()).is_err());
    }

    #[test]
    fn per_tensor_failure_does_not_abort() {
        let mut pre = single_layer();
        pre.insert(TensorRecord::from_values("layers.0.attn.wk", DType::F32, vec![1, 1], &[f64::NAN]).unwrap())
            .unwrap();
        let tv = extract::<f64>(&pre, &pre, AlignMode::Strict).unwrap();
        let r = component_report(&pre, &tv, &ComponentMap::default(), &SubspaceConfig::default()).unwrap();
        assert_eq!(r.per_layer.len(), 1);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].name, "layers.0.attn.wk");
    }
}
