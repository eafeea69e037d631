//! Tuning vectors: extraction, arithmetic and cosine similarity.
//!
//! A tuning vector is the per-tensor difference `ft - pre` held in analysis
//! precision. Applying it to a base checkpoint with a scale gives negation
//! (`ft - T`), re-application (`pre + T`) and multi-domain addition
//! (`pre + Σ T_d`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::registry::{align, AlignMode, ComponentKind, ComponentMap};
use crate::scalar::{KahanSum, Real};
use crate::tensor::Tensor;
use crate::tensorstore::{Checkpoint, DType, TensorRecord};

pub const KIND_KEY: &str = "kind";
pub const TUNING_VECTOR_KIND: &str = "tuning_vector";
const PRE_ID_KEY: &str = "pre_id";
const FT_ID_KEY: &str = "ft_id";
const SKIPPED_KEY: &str = "skipped";

/// Output dtype for emitted tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitDType {
    /// Keep the dtype of the corresponding input tensor.
    #[default]
    Source,
    F32,
}

impl EmitDType {
    fn resolve(self, source: DType) -> DType {
        match self {
            EmitDType::Source => source,
            EmitDType::F32 => DType::F32,
        }
    }
}

impl FromStr for EmitDType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(EmitDType::Source),
            "f32" => Ok(EmitDType::F32),
            other => Err(Error::InvalidArgument(format!("unknown dtype-out {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub pre_id: String,
    pub ft_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningVector<T> {
    deltas: BTreeMap<String, Tensor<T>>,
    dtypes: BTreeMap<String, DType>,
    provenance: Provenance,
    /// Names dropped by an intersect-mode alignment.
    skipped: Vec<String>,
}

impl<T: Real> TuningVector<T> {
    pub fn from_parts(
        deltas: BTreeMap<String, Tensor<T>>,
        dtypes: BTreeMap<String, DType>,
        provenance: Provenance,
    ) -> Result<Self> {
        if let Some(name) = deltas.keys().find(|n| !dtypes.contains_key(*n)) {
            return Err(Error::tensor(name, "no dtype recorded"));
        }
        Ok(Self {
            deltas,
            dtypes,
            provenance,
            skipped: Vec::new(),
        })
    }

    pub fn with_provenance(mut self, pre_id: impl Into<String>, ft_id: impl Into<String>) -> Self {
        self.provenance = Provenance {
            pre_id: pre_id.into(),
            ft_id: ft_id.into(),
        };
        self
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.deltas.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.deltas.get(name)
    }

    pub fn deltas(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            deltas: self.deltas.iter().map(|(k, t)| (k.clone(), t.scaled(s))).collect(),
            dtypes: self.dtypes.clone(),
            provenance: self.provenance.clone(),
            skipped: self.skipped.clone(),
        }
    }

    pub fn negate(&self) -> Self {
        self.scaled(-T::one())
    }

    /// Persist as a checkpoint tagged `kind = tuning_vector`.
    pub fn to_checkpoint(&self, emit: EmitDType) -> Result<Checkpoint> {
        let mut out = Checkpoint::new();
        for (name, t) in &self.deltas {
            out.insert(t.to_record(name, emit.resolve(self.dtypes[name]))?)?;
        }
        out.set_metadata(KIND_KEY, TUNING_VECTOR_KIND);
        out.set_metadata(PRE_ID_KEY, &self.provenance.pre_id);
        out.set_metadata(FT_ID_KEY, &self.provenance.ft_id);
        if !self.skipped.is_empty() {
            out.set_metadata(SKIPPED_KEY, serde_json::to_string(&self.skipped)?);
        }
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let md = ckpt.metadata();
        if md.get(KIND_KEY).map(String::as_str) != Some(TUNING_VECTOR_KIND) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is not a tuning vector (metadata {KIND_KEY:?} = {:?})",
                md.get(KIND_KEY)
            )));
        }
        let skipped = match md.get(SKIPPED_KEY) {
            Some(s) => serde_json::from_str(s)?,
            None => Vec::new(),
        };
        Ok(Self {
            deltas: ckpt
                .tensors()
                .map(|r| (r.name().to_owned(), Tensor::from_record(r)))
                .collect(),
            dtypes: ckpt.tensors().map(|r| (r.name().to_owned(), r.dtype())).collect(),
            provenance: Provenance {
                pre_id: md.get(PRE_ID_KEY).cloned().unwrap_or_default(),
                ft_id: md.get(FT_ID_KEY).cloned().unwrap_or_default(),
            },
            skipped,
        })
    }
}

/// `ft - pre` for every aligned tensor, computed in `T`.
pub fn extract<T: Real>(pre: &Checkpoint, ft: &Checkpoint, mode: AlignMode) -> Result<TuningVector<T>> {
    extract_with(pre, ft, mode, &ComponentMap::default())
}

/// [`extract`] with an explicit naming map (used to classify skipped tensors).
pub fn extract_with<T: Real>(
    pre: &Checkpoint,
    ft: &Checkpoint,
    mode: AlignMode,
    map: &ComponentMap,
) -> Result<TuningVector<T>> {
    let alignment = align(pre, ft, mode, map)?;
    let names: Vec<&str> = alignment.names().collect();
    let deltas: Vec<(String, Tensor<T>)> = names
        .par_iter()
        .map(|&name| {
            let a = pre.require(name)?;
            let b = ft.require(name)?;
            let data = a
                .values::<T>()
                .into_iter()
                .zip(b.values::<T>())
                .map(|(x, y)| y - x)
                .collect();
            Ok((name.to_owned(), Tensor::new(a.shape().to_vec(), data)))
        })
        .collect::<Result<_>>()?;
    let dtypes = names
        .iter()
        .map(|&n| (n.to_owned(), ft.require(n).map(TensorRecord::dtype)))
        .map(|(n, d)| d.map(|d| (n, d)))
        .collect::<Result<_>>()?;
    Ok(TuningVector {
        deltas: deltas.into_iter().collect(),
        dtypes,
        provenance: Provenance {
            pre_id: "pre".into(),
            ft_id: "ft".into(),
        },
        skipped: alignment.skipped.into_iter().map(|s| s.name).collect(),
    })
}

fn check_applicable<T: Real>(base: &Checkpoint, tv: &TuningVector<T>) -> Result<()> {
    for (name, t) in &tv.deltas {
        let rec = base
            .get(name)
            .ok_or_else(|| Error::tensor(name, "present in tuning vector but absent from base"))?;
        if rec.shape() != t.shape.as_slice() {
            return Err(Error::tensor(
                name,
                format!("shape mismatch: base {:?} vs tuning vector {:?}", rec.shape(), t.shape),
            ));
        }
    }
    Ok(())
}

/// `base + scale * tv` in analysis precision, for the tensors `tv` touches.
pub fn apply_values<T: Real>(base: &Checkpoint, tv: &TuningVector<T>, scale: T) -> Result<BTreeMap<String, Tensor<T>>> {
    check_applicable(base, tv)?;
    let entries: Vec<(&String, &Tensor<T>)> = tv.deltas.iter().collect();
    Ok(entries
        .par_iter()
        .map(|&(name, delta)| {
            let rec = base.get(name).expect("checked");
            let data = rec
                .values::<T>()
                .into_iter()
                .zip(&delta.data)
                .map(|(b, &d)| b + scale * d)
                .collect();
            (name.clone(), Tensor::new(delta.shape.clone(), data))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect())
}

/// `base + scale * tv`, emitted as a checkpoint. Tensors of `base` that `tv`
/// does not cover are copied unchanged; `scale == 0` copies everything.
pub fn apply<T: Real>(base: &Checkpoint, tv: &TuningVector<T>, scale: T, emit: EmitDType) -> Result<Checkpoint> {
    check_applicable(base, tv)?;
    let updated = if scale == T::zero() {
        BTreeMap::new()
    } else {
        apply_values(base, tv, scale)?
    };
    let mut out = Checkpoint::new();
    *out.metadata_mut() = base.metadata().clone();
    out.metadata_mut().remove(KIND_KEY);
    for rec in base.tensors() {
        let dtype = emit.resolve(rec.dtype());
        let emitted = match updated.get(rec.name()) {
            Some(t) => t.to_record(rec.name(), dtype)?,
            None if dtype == rec.dtype() => rec.clone(),
            None => TensorRecord::from_values(rec.name(), dtype, rec.shape().to_vec(), &rec.values::<f64>())?,
        };
        out.insert(emitted)?;
    }
    out.set_metadata("op", "apply");
    out.set_metadata("op.scale", format!("{}", scale.as_f64()));
    out.set_metadata("op.tv_pre_id", &tv.provenance.pre_id);
    out.set_metadata("op.tv_ft_id", &tv.provenance.ft_id);
    Ok(out)
}

/// Elementwise sum of tuning vectors, accumulated per element in list order
/// with compensated summation.
pub fn combine<T: Real>(tvs: &[TuningVector<T>]) -> Result<TuningVector<T>> {
    let (first, rest) = tvs
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("combine needs at least one tuning vector".into()))?;
    for (i, tv) in rest.iter().enumerate() {
        if tv.deltas.len() != first.deltas.len() {
            return Err(Error::InvalidArgument(format!(
                "tuning vector {} has {} tensors, expected {}",
                i + 1,
                tv.deltas.len(),
                first.deltas.len()
            )));
        }
        for (name, t) in &first.deltas {
            match tv.deltas.get(name) {
                Some(o) if o.shape == t.shape => {}
                Some(o) => {
                    return Err(Error::tensor(
                        name,
                        format!("shape mismatch in combine: {:?} vs {:?}", t.shape, o.shape),
                    ))
                }
                None => return Err(Error::tensor(name, format!("missing from tuning vector {}", i + 1))),
            }
        }
    }
    let names: Vec<&String> = first.deltas.keys().collect();
    let deltas: Vec<(String, Tensor<T>)> = names
        .par_iter()
        .map(|&name| {
            let shape = first.deltas[name].shape.clone();
            let n = first.deltas[name].data.len();
            let mut acc = vec![KahanSum::<T>::new(); n];
            for tv in tvs {
                for (a, &x) in acc.iter_mut().zip(&tv.deltas[name].data) {
                    a.add(x);
                }
            }
            (
                name.clone(),
                Tensor::new(shape, acc.iter().map(KahanSum::value).collect()),
            )
        })
        .collect();

    let pre_ids: Vec<&str> = tvs.iter().map(|t| t.provenance.pre_id.as_str()).collect();
    let pre_id = if pre_ids.iter().all(|&p| p == pre_ids[0]) {
        pre_ids[0].to_owned()
    } else {
        pre_ids.join("+")
    };
    let ft_id = tvs
        .iter()
        .map(|t| t.provenance.ft_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let mut skipped: Vec<String> = tvs.iter().flat_map(|t| t.skipped.iter().cloned()).collect();
    skipped.sort();
    skipped.dedup();
    Ok(TuningVector {
        deltas: deltas.into_iter().collect(),
        dtypes: first.dtypes.clone(),
        provenance: Provenance { pre_id, ft_id },
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Global,
    PerComponent,
    PerTensor,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Granularity::Global),
            "per_component" | "per-component" => Ok(Granularity::PerComponent),
            "per_tensor" | "per-tensor" => Ok(Granularity::PerTensor),
            other => Err(Error::InvalidArgument(format!("unknown granularity {other:?}"))),
        }
    }
}

/// A cosine value, or `Undefined` when one side has zero norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cosine {
    Value(f64),
    Undefined,
}

impl Cosine {
    pub fn value(self) -> Option<f64> {
        match self {
            Cosine::Value(v) => Some(v),
            Cosine::Undefined => None,
        }
    }
}

impl fmt::Display for Cosine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cosine::Value(v) => write!(f, "{v}"),
            Cosine::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Cosine {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cosine::Value(v) => s.serialize_f64(*v),
            Cosine::Undefined => s.serialize_str("undefined"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub granularity: Granularity,
    pub entries: BTreeMap<String, Cosine>,
    /// Global cosine × 100, filled for weight similarity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_x100: Option<Cosine>,
    /// Tensors left out of the reductions.
    pub excluded: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct CosineOptions {
    pub map: ComponentMap,
    /// Only rank-2 tensors participate.
    pub matrices_only: bool,
    /// Drop Embed-kind tensors from every reduction.
    pub exclude_embed: bool,
}

#[derive(Clone, Copy, Default)]
struct Partial<T> {
    dot: KahanSum<T>,
    aa: KahanSum<T>,
    bb: KahanSum<T>,
}

impl<T: Real> Partial<T> {
    fn of(a: &[T], b: &[T]) -> Self {
        let mut p = Partial {
            dot: KahanSum::new(),
            aa: KahanSum::new(),
            bb: KahanSum::new(),
        };
        for (&x, &y) in a.iter().zip(b) {
            p.dot.add(x * y);
            p.aa.add(x * x);
            p.bb.add(y * y);
        }
        p
    }

    fn merge(&mut self, o: &Self) {
        self.dot.merge(&o.dot);
        self.aa.merge(&o.aa);
        self.bb.merge(&o.bb);
    }

    fn cosine(&self) -> Cosine {
        let (aa, bb) = (self.aa.value(), self.bb.value());
        if aa == T::zero() || bb == T::zero() {
            return Cosine::Undefined;
        }
        Cosine::Value((self.dot.value() / (aa.sqrt() * bb.sqrt())).as_f64())
    }
}

/// Cosine similarity between two same-named tensor collections, reduced in
/// canonical name order.
pub fn tensor_cosine<T: Real>(
    a: &BTreeMap<String, Tensor<T>>,
    b: &BTreeMap<String, Tensor<T>>,
    granularity: Granularity,
    opts: &CosineOptions,
) -> Result<SimilarityReport> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let only: Vec<String> = a
            .keys()
            .filter(|k| !b.contains_key(*k))
            .chain(b.keys().filter(|k| !a.contains_key(*k)))
            .map(|k| format!("{k:?} not in both operands"))
            .collect();
        return Err(Error::Alignment(only));
    }
    let mut excluded = Vec::new();
    let mut included = Vec::new();
    for (name, ta) in a {
        let tb = &b[name];
        if ta.shape != tb.shape {
            return Err(Error::tensor(
                name,
                format!("shape mismatch {:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let (kind, _) = opts.map.classify(name);
        if (opts.matrices_only && ta.rank() != 2) || (opts.exclude_embed && kind == ComponentKind::Embed) {
            excluded.push(name.clone());
        } else {
            included.push((name.as_str(), kind, ta, tb));
        }
    }
    let partials: Vec<Partial<T>> = included
        .par_iter()
        .map(|(_, _, ta, tb)| Partial::of(&ta.data, &tb.data))
        .collect();

    let mut entries = BTreeMap::new();
    match granularity {
        Granularity::Global => {
            let mut total = Partial::of(&[], &[]);
            for p in &partials {
                total.merge(p);
            }
            entries.insert("global".to_owned(), total.cosine());
        }
        Granularity::PerComponent => {
            let mut per: BTreeMap<ComponentKind, Partial<T>> = BTreeMap::new();
            for ((_, kind, _, _), p) in included.iter().zip(&partials) {
                per.entry(*kind).or_insert_with(|| Partial::of(&[], &[])).merge(p);
            }
            for (kind, p) in per {
                entries.insert(kind.as_str().to_owned(), p.cosine());
            }
        }
        Granularity::PerTensor => {
            for ((name, _, _, _), p) in included.iter().zip(&partials) {
                entries.insert((*name).to_owned(), p.cosine());
            }
        }
    }
    let mut notes = Vec::new();
    if opts.exclude_embed {
        notes.push("embedding tensors excluded".to_owned());
    }
    if opts.matrices_only {
        notes.push("only rank-2 tensors included".to_owned());
    }
    Ok(SimilarityReport {
        granularity,
        entries,
        global_x100: None,
        excluded,
        notes,
    })
}

/// Cosine similarity between two tuning vectors.
///
/// If either vector was extracted in intersect mode and lost an embedding
/// tensor (a tokenizer change), embeddings are excluded from every reduction
/// and the report says so.
pub fn cosine<T: Real>(
    tv1: &TuningVector<T>,
    tv2: &TuningVector<T>,
    granularity: Granularity,
    opts: &CosineOptions,
) -> Result<SimilarityReport> {
    let lost_embed: Vec<&String> = tv1
        .skipped
        .iter()
        .chain(&tv2.skipped)
        .filter(|n| opts.map.classify(n).0 == ComponentKind::Embed)
        .collect();
    let mut effective = opts.clone();
    if !lost_embed.is_empty() {
        effective.exclude_embed = true;
    }
    let mut report = tensor_cosine(&tv1.deltas, &tv2.deltas, granularity, &effective)?;
    if !lost_embed.is_empty() && !opts.exclude_embed {
        report.notes.push(format!(
            "embeddings excluded because {} differed in shape between checkpoints",
            lost_embed
                .iter()
                .map(|s| format!("{s:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    Ok(report)
}

/// Cosine similarity between raw weights of two checkpoints.
pub fn weight_similarity<T: Real>(
    a: &Checkpoint,
    b: &Checkpoint,
    mode: AlignMode,
    granularity: Granularity,
    opts: &CosineOptions,
) -> Result<SimilarityReport> {
    let alignment = align(a, b, mode, &opts.map)?;
    let decode = |c: &Checkpoint| -> BTreeMap<String, Tensor<T>> {
        alignment
            .pairs
            .par_iter()
            .map(|p| (p.name.clone(), Tensor::from_record(c.get(&p.name).expect("aligned"))))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    };
    let (wa, wb) = (decode(a), decode(b));
    let mut effective = opts.clone();
    let lost_embed = alignment.skipped.iter().any(|s| s.kind == ComponentKind::Embed);
    if lost_embed {
        effective.exclude_embed = true;
    }
    let mut report = tensor_cosine(&wa, &wb, granularity, &effective)?;
    let global = if granularity == Granularity::Global {
        report.entries["global"]
    } else {
        tensor_cosine(&wa, &wb, Granularity::Global, &effective)?.entries["global"]
    };
    report.global_x100 = Some(match global {
        Cosine::Value(v) => Cosine::Value(v * 100.0),
        Cosine::Undefined => Cosine::Undefined,
    });
    report.notes.extend(alignment.warnings());
    Ok(report)
}
