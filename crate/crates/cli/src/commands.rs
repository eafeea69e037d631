use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tunevec_core::activations::{
    binarize, decode_corpus, edit_distance, perf_drop, profile, select_top, AblationSet, ActivationProfile,
    BinarizePolicy, BinaryPattern, RankKey, ToyModel, ToyModelSpec,
};
use tunevec_core::diffcore::{
    apply, combine, cosine, extract_with, weight_similarity, Cosine, CosineOptions, Granularity, TuningVector,
};
use tunevec_core::evalharness::{parse_dataset, run_task, EvalConfig, EvalRecord};
use tunevec_core::subspace::{component_report, SubspaceConfig};
use tunevec_core::{Checkpoint, ComponentMap, Error, Real, Result};

use crate::cli::*;
use crate::manifest::{self, RunManifest};
use crate::plotdata;

pub const MANIFEST_KEY: &str = "tunevec.manifest";

pub struct Ctx {
    pub global: GlobalOpts,
    pub started: Instant,
}

/// Run a generic body at the precision chosen on the command line.
macro_rules! at_precision {
    ($ctx:expr, $f:ident($($arg:expr),*)) => {
        match $ctx.global.precision {
            Precision::F64 => $f::<f64>($($arg),*),
            Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}

fn schema_id(name: &str) -> String {
    format!("tunevec.{name}/1")
}

fn to_object(value: impl Serialize) -> Result<Map<String, Value>> {
    match serde_json::to_value(value)? {
        Value::Object(m) => Ok(m),
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            Ok(m)
        }
    }
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

impl Ctx {
    fn manifest(&self, sub: &str, args: &impl Serialize) -> RunManifest {
        RunManifest::new(sub, self.global.seed, &self.global, args)
    }

    fn component_map(&self, m: &mut RunManifest) -> Result<ComponentMap> {
        match &self.global.component_map {
            Some(path) => {
                let bytes = m.read_input("component_map", path)?;
                ComponentMap::from_json(&String::from_utf8_lossy(&bytes))
            }
            None => ComponentMap::preset(&self.global.naming_preset),
        }
    }

    fn cosine_options(&self, m: &mut RunManifest, exclude_embed: bool) -> Result<CosineOptions> {
        Ok(CosineOptions {
            map: self.component_map(m)?,
            matrices_only: self.global.matrices_only,
            exclude_embed,
        })
    }

    /// Write `{schema, manifest, ...body}` to `out` (plus the timing
    /// sidecar) or to stdout.
    fn emit(&self, out: Option<&Path>, schema: &str, manifest: &RunManifest, body: impl Serialize) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("schema".into(), Value::String(schema_id(schema)));
        obj.insert("manifest".into(), serde_json::to_value(manifest)?);
        for (k, v) in to_object(body)? {
            obj.insert(k, v);
        }
        let text = pretty(&Value::Object(obj))?;
        match out {
            Some(path) => {
                manifest::write_file(path, text.as_bytes())?;
                manifest::write_sidecar(path, manifest, self.started)
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn write_checkpoint(&self, ckpt: &mut Checkpoint, out: &Path, manifest: &RunManifest) -> Result<()> {
        ckpt.set_metadata(MANIFEST_KEY, manifest.to_json_string());
        manifest::write_file(out, &ckpt.to_bytes()?)?;
        manifest::write_sidecar(out, manifest, self.started)
    }
}

fn load_checkpoint(m: &mut RunManifest, role: &str, path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = m.read_input(role, path)?;
    let digest = m.inputs.last().expect("just recorded").sha256.clone();
    Ok((Checkpoint::from_bytes(&bytes)?, digest))
}

fn load_tv<T: Real>(m: &mut RunManifest, role: &str, path: &Path) -> Result<TuningVector<T>> {
    let (ckpt, _) = load_checkpoint(m, role, path)?;
    TuningVector::from_checkpoint(&ckpt)
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", what.display())))
}

pub fn default_spec_path(model: &Path) -> PathBuf {
    model.with_extension("spec.json")
}

fn load_model<T: Real>(m: &mut RunManifest, args: &ModelArgs) -> Result<ToyModel<T>> {
    let (ckpt, _) = load_checkpoint(m, "model", &args.model)?;
    let spec_path = args.spec.clone().unwrap_or_else(|| default_spec_path(&args.model));
    let bytes = m.read_input("spec", &spec_path)?;
    let spec = ToyModelSpec::from_json(&String::from_utf8_lossy(&bytes))?;
    ToyModel::from_checkpoint(&ckpt, &spec)
}

fn resolve_spec(args: &mut ModelArgs) {
    if args.spec.is_none() {
        args.spec = Some(default_spec_path(&args.model));
    }
}

// diff / apply / merge

#[derive(Serialize)]
struct CheckpointSummary {
    tensors: usize,
    parameters: usize,
    skipped: Vec<String>,
    warnings: Vec<String>,
}

pub fn diff(ctx: &Ctx, args: DiffArgs) -> Result<()> {
    at_precision!(ctx, diff_at(ctx, &args))
}

fn diff_at<T: Real>(ctx: &Ctx, args: &DiffArgs) -> Result<()> {
    let mut m = ctx.manifest("diff", args);
    let map = ctx.component_map(&mut m)?;
    let (pre, pre_id) = load_checkpoint(&mut m, "pre", &args.pre)?;
    let (ft, ft_id) = load_checkpoint(&mut m, "ft", &args.ft)?;
    let tv = extract_with::<T>(&pre, &ft, ctx.global.mode, &map)?.with_provenance(pre_id, ft_id);
    let warnings = tunevec_core::registry::align(&pre, &ft, ctx.global.mode, &map)?.warnings();
    let mut out = tv.to_checkpoint(ctx.global.dtype_out)?;
    ctx.write_checkpoint(&mut out, &args.out, &m)?;
    if let Some(r) = &args.report {
        let body = CheckpointSummary {
            tensors: out.len(),
            parameters: out.param_count(),
            skipped: tv.skipped().to_vec(),
            warnings,
        };
        ctx.emit(Some(r), "diff", &m, body)?;
    }
    Ok(())
}

pub fn apply_cmd(ctx: &Ctx, args: ApplyArgs) -> Result<()> {
    at_precision!(ctx, apply_at(ctx, &args))
}

fn apply_at<T: Real>(ctx: &Ctx, args: &ApplyArgs) -> Result<()> {
    let mut m = ctx.manifest("apply", args);
    let (base, _) = load_checkpoint(&mut m, "base", &args.base)?;
    let tv = load_tv::<T>(&mut m, "tv", &args.tv)?;
    let mut out = apply(&base, &tv, T::of(args.scale), ctx.global.dtype_out)?;
    ctx.write_checkpoint(&mut out, &args.out, &m)?;
    if let Some(r) = &args.report {
        let body = CheckpointSummary {
            tensors: out.len(),
            parameters: out.param_count(),
            skipped: Vec::new(),
            warnings: Vec::new(),
        };
        ctx.emit(Some(r), "apply", &m, body)?;
    }
    Ok(())
}

pub fn merge(ctx: &Ctx, args: MergeArgs) -> Result<()> {
    at_precision!(ctx, merge_at(ctx, &args))
}

fn merge_at<T: Real>(ctx: &Ctx, args: &MergeArgs) -> Result<()> {
    if args.tvs.len() < 2 {
        return Err(Error::InvalidArgument("merge needs at least two --tv".into()));
    }
    let weights = match &args.weights {
        Some(w) if w.len() != args.tvs.len() => {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} tuning vectors",
                w.len(),
                args.tvs.len()
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0; args.tvs.len()],
    };
    let mut m = ctx.manifest("merge", args);
    let mut tvs = Vec::with_capacity(args.tvs.len());
    for (i, (path, w)) in args.tvs.iter().zip(&weights).enumerate() {
        let tv = load_tv::<T>(&mut m, &format!("tv{i}"), path)?;
        tvs.push(if *w == 1.0 { tv } else { tv.scaled(T::of(*w)) });
    }
    let merged = combine(&tvs)?;
    let mut out = merged.to_checkpoint(ctx.global.dtype_out)?;
    ctx.write_checkpoint(&mut out, &args.out, &m)?;
    if let Some(r) = &args.report {
        let body = CheckpointSummary {
            tensors: out.len(),
            parameters: out.param_count(),
            skipped: merged.skipped().to_vec(),
            warnings: Vec::new(),
        };
        ctx.emit(Some(r), "merge", &m, body)?;
    }
    Ok(())
}

// cosine / wsim

#[derive(Serialize)]
struct PairEntry {
    a: usize,
    b: usize,
    entries: BTreeMap<String, Cosine>,
    excluded: Vec<String>,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct CosineBody {
    labels: Vec<String>,
    granularity: Granularity,
    pairs: Vec<PairEntry>,
    /// Per reduction key, the symmetric similarity matrix.
    matrices: BTreeMap<String, Vec<Vec<Cosine>>>,
}

pub fn cosine_cmd(ctx: &Ctx, args: CosineArgs) -> Result<()> {
    at_precision!(ctx, cosine_at(ctx, &args))
}

fn cosine_at<T: Real>(ctx: &Ctx, args: &CosineArgs) -> Result<()> {
    let n = args.tvs.len();
    if n < 2 {
        return Err(Error::InvalidArgument("cosine needs at least two --tv".into()));
    }
    if !args.labels.is_empty() && args.labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} tuning vectors",
            args.labels.len()
        )));
    }
    let labels = if args.labels.is_empty() {
        args.tvs.iter().map(|p| p.display().to_string()).collect()
    } else {
        args.labels.clone()
    };
    let mut m = ctx.manifest("cosine", args);
    let opts = ctx.cosine_options(&mut m, args.exclude_embed)?;
    let tvs = args
        .tvs
        .iter()
        .enumerate()
        .map(|(i, p)| load_tv::<T>(&mut m, &format!("tv{i}"), p))
        .collect::<Result<Vec<_>>>()?;

    let mut pairs = Vec::new();
    let mut matrices: BTreeMap<String, Vec<Vec<Cosine>>> = BTreeMap::new();
    let mut cell = |key: &str, i: usize, j: usize, v: Cosine| {
        let mat = matrices
            .entry(key.to_owned())
            .or_insert_with(|| vec![vec![Cosine::Undefined; n]; n]);
        mat[i][j] = v;
        mat[j][i] = v;
    };
    for i in 0..n {
        // Self-similarity is exactly 1 wherever the vector is nonzero.
        let own = cosine(&tvs[i], &tvs[i], args.granularity, &opts)?;
        for (k, v) in &own.entries {
            cell(
                k,
                i,
                i,
                if v.value().is_some() {
                    Cosine::Value(1.0)
                } else {
                    Cosine::Undefined
                },
            );
        }
        for j in i + 1..n {
            let r = cosine(&tvs[i], &tvs[j], args.granularity, &opts)?;
            for (k, v) in &r.entries {
                cell(k, i, j, *v);
            }
            pairs.push(PairEntry {
                a: i,
                b: j,
                entries: r.entries,
                excluded: r.excluded,
                notes: r.notes,
            });
        }
    }
    let body = CosineBody {
        labels,
        granularity: args.granularity,
        pairs,
        matrices,
    };
    ctx.emit(args.out.as_deref(), "cosine", &m, body)
}

pub fn wsim(ctx: &Ctx, args: WsimArgs) -> Result<()> {
    at_precision!(ctx, wsim_at(ctx, &args))
}

fn wsim_at<T: Real>(ctx: &Ctx, args: &WsimArgs) -> Result<()> {
    let mut m = ctx.manifest("wsim", args);
    let opts = ctx.cosine_options(&mut m, args.exclude_embed)?;
    let (a, _) = load_checkpoint(&mut m, "a", &args.a)?;
    let (b, _) = load_checkpoint(&mut m, "b", &args.b)?;
    let r = weight_similarity::<T>(&a, &b, ctx.global.mode, args.granularity, &opts)?;
    ctx.emit(args.out.as_deref(), "wsim", &m, r)
}

// ssa

pub fn ssa(ctx: &Ctx, args: SsaArgs) -> Result<()> {
    at_precision!(ctx, ssa_at(ctx, &args))
}

fn ssa_at<T: Real>(ctx: &Ctx, args: &SsaArgs) -> Result<()> {
    let mut m = ctx.manifest("ssa", args);
    let map = ctx.component_map(&mut m)?;
    let (pre, _) = load_checkpoint(&mut m, "pre", &args.pre)?;
    let tv = load_tv::<T>(&mut m, "tv", &args.tv)?;
    let cfg = SubspaceConfig {
        eps: args.eps,
        seed: ctx.global.seed,
        svd: args.svd,
        oversample: args.oversample,
        power_iters: args.power_iters,
        initial_rank: args.initial_rank,
        auto_dense_limit: args.auto_dense_limit,
        aggregation: args.agg,
    };
    let report = component_report(&pre, &tv, &map, &cfg)?;
    ctx.emit(args.out.as_deref(), "ssa", &m, report)
}

// profile / editdist

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileLayer {
    pub layer: usize,
    pub pct_active: f64,
    pub active_neurons: usize,
    pub mean_activation: Vec<f64>,
    pub active_fraction: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileBody {
    pub policy: BinarizePolicy,
    pub token_count: u64,
    pub window: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub layers: Vec<ProfileLayer>,
    pub pattern: BinaryPattern,
}

impl ProfileBody {
    fn build(p: &ActivationProfile, policy: BinarizePolicy) -> Result<Self> {
        let z = binarize(p, policy)?;
        let pct = z.percent_active();
        let layers = (0..p.n_layers)
            .map(|l| ProfileLayer {
                layer: l,
                pct_active: pct[l],
                active_neurons: z.layers[l].iter().filter(|&&b| b).count(),
                mean_activation: p.mean_activation[l].clone(),
                active_fraction: p.active_fraction[l].clone(),
            })
            .collect();
        Ok(Self {
            policy,
            token_count: p.token_count,
            window: p.window,
            n_layers: p.n_layers,
            d_ff: p.d_ff,
            layers,
            pattern: z,
        })
    }

    fn profile(&self) -> ActivationProfile {
        ActivationProfile {
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            token_count: self.token_count,
            window: self.window,
            mean_activation: self.layers.iter().map(|l| l.mean_activation.clone()).collect(),
            active_fraction: self.layers.iter().map(|l| l.active_fraction.clone()).collect(),
        }
    }
}

fn read_corpus(m: &mut RunManifest, args: &CorpusArgs) -> Result<Vec<u32>> {
    let path = args
        .corpus
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--corpus is required".into()))?;
    let bytes = m.read_input("corpus", path)?;
    decode_corpus(&bytes, args.corpus_format)
}

pub fn profile_cmd(ctx: &Ctx, mut args: ProfileArgs) -> Result<()> {
    resolve_spec(&mut args.model);
    at_precision!(ctx, profile_at(ctx, &args))
}

fn profile_at<T: Real>(ctx: &Ctx, args: &ProfileArgs) -> Result<()> {
    let mut m = ctx.manifest("profile", args);
    let model = load_model::<T>(&mut m, &args.model)?;
    let corpus = read_corpus(&mut m, &args.corpus)?;
    let p = profile(&model, &corpus, args.corpus.window)?;
    ctx.emit(
        args.out.as_deref(),
        "profile",
        &m,
        ProfileBody::build(&p, args.binarize)?,
    )
}

fn read_profile_report(m: &mut RunManifest, role: &str, path: &Path) -> Result<ProfileBody> {
    let bytes = m.read_input(role, path)?;
    let v: Value = parse_json(&bytes, path)?;
    if v.get("schema").and_then(Value::as_str) != Some(schema_id("profile").as_str()) {
        return Err(Error::InvalidArgument(format!(
            "{} is not a profile report",
            path.display()
        )));
    }
    parse_json(&bytes, path)
}

#[derive(Serialize)]
struct DistanceLayer {
    layer: usize,
    distance: usize,
    delta: f64,
}

#[derive(Serialize)]
struct EditdistBody {
    policy_a: BinarizePolicy,
    policy_b: BinarizePolicy,
    d_ff: usize,
    layers: Vec<DistanceLayer>,
    mean_delta: f64,
}

pub fn editdist(ctx: &Ctx, args: EditdistArgs) -> Result<()> {
    let mut m = ctx.manifest("editdist", &args);
    let a = read_profile_report(&mut m, "a", &args.a)?;
    let b = read_profile_report(&mut m, "b", &args.b)?;
    let (za, pa, zb, pb) = match args.binarize {
        Some(policy) => (
            binarize(&a.profile(), policy)?,
            policy,
            binarize(&b.profile(), policy)?,
            policy,
        ),
        None => (a.pattern, a.policy, b.pattern, b.policy),
    };
    let deltas = edit_distance(&za, &zb)?;
    let d_ff = a.d_ff;
    let layers: Vec<DistanceLayer> = deltas
        .iter()
        .enumerate()
        .map(|(l, &delta)| DistanceLayer {
            layer: l,
            distance: (delta * d_ff as f64).round() as usize,
            delta,
        })
        .collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    let body = EditdistBody {
        policy_a: pa,
        policy_b: pb,
        d_ff,
        layers,
        mean_delta,
    };
    ctx.emit(args.out.as_deref(), "editdist", &m, body)
}

// ablate / eval

fn number_or_undefined<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

#[derive(Serialize)]
struct AblationEval {
    task: String,
    original_accuracy: Option<f64>,
    ablated_accuracy: Option<f64>,
    /// Relative drop in percent; "undefined" when the original scores 0.
    #[serde(serialize_with = "number_or_undefined")]
    perf_drop: Option<f64>,
    original_failed: usize,
    ablated_failed: usize,
}

#[derive(Serialize)]
struct AblateBody {
    top_pct: f64,
    neurons_per_layer: usize,
    ablation: AblationSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<AblationEval>,
}

fn eval_config(opts: &EvalOpts) -> EvalConfig {
    EvalConfig {
        max_tokens: opts.max_tokens,
        mc_mode: opts.mc_mode,
        ..Default::default()
    }
}

pub fn ablate(ctx: &Ctx, mut args: AblateArgs) -> Result<()> {
    resolve_spec(&mut args.model);
    at_precision!(ctx, ablate_at(ctx, &args))
}

fn ablate_at<T: Real>(ctx: &Ctx, args: &AblateArgs) -> Result<()> {
    if !(args.top_pct > 0.0 && args.top_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "--top-pct {} outside (0, 100]",
            args.top_pct
        )));
    }
    let mut m = ctx.manifest("ablate", args);
    let model = load_model::<T>(&mut m, &args.model)?;
    let prof = match &args.profile {
        Some(path) => read_profile_report(&mut m, "profile", path)?.profile(),
        None => {
            let corpus = read_corpus(&mut m, &args.corpus)?;
            profile(&model, &corpus, args.corpus.window)?
        }
    };
    let spec = model.spec();
    if (prof.n_layers, prof.d_ff) != (spec.n_layers, spec.d_ff) {
        return Err(Error::InvalidArgument(format!(
            "profile is {} x {} but the model has {} layers of {} neurons",
            prof.n_layers, prof.d_ff, spec.n_layers, spec.d_ff
        )));
    }
    let set = select_top(&prof, args.top_pct / 100.0, RankKey::MeanActivation)?;
    let eval = match &args.task {
        Some(task) => {
            let bytes = m.read_input("task", task)?;
            let ds = parse_dataset(&String::from_utf8_lossy(&bytes))?;
            let cfg = eval_config(&args.eval);
            let name = task.display().to_string();
            let orig = run_task(&model, &name, &ds, &cfg, None)?;
            let abl = run_task(&model, &name, &ds, &cfg, Some(&set))?;
            let drop = match (orig.aggregate.accuracy, abl.aggregate.accuracy) {
                (Some(po), Some(pa)) => perf_drop(po, pa),
                _ => None,
            };
            Some(AblationEval {
                task: name,
                original_accuracy: orig.aggregate.accuracy,
                ablated_accuracy: abl.aggregate.accuracy,
                perf_drop: drop,
                original_failed: orig.aggregate.failed,
                ablated_failed: abl.aggregate.failed,
            })
        }
        None => None,
    };
    if let Some(path) = &args.set_out {
        manifest::write_file(path, pretty(&set)?.as_bytes())?;
    }
    let body = AblateBody {
        top_pct: args.top_pct,
        neurons_per_layer: tunevec_core::activations::top_count(args.top_pct / 100.0, spec.d_ff),
        ablation: set,
        eval,
    };
    ctx.emit(args.out.as_deref(), "ablate", &m, body)
}

/// A bare ablation set, or the `ablation` member of an ablate report.
fn read_ablation(m: &mut RunManifest, path: &Path) -> Result<AblationSet> {
    let bytes = m.read_input("ablation", path)?;
    let v: Value = parse_json(&bytes, path)?;
    let inner = match v.get("ablation") {
        Some(a) => a.clone(),
        None => v,
    };
    AblationSet::from_json(&inner.to_string())
}

#[derive(Serialize)]
struct EvalBody<'a> {
    #[serde(flatten)]
    record: &'a EvalRecord,
    ablated_neurons: usize,
}

pub fn eval(ctx: &Ctx, mut args: EvalArgs) -> Result<()> {
    resolve_spec(&mut args.model);
    at_precision!(ctx, eval_at(ctx, &args))
}

fn eval_at<T: Real>(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let mut m = ctx.manifest("eval", args);
    let model = load_model::<T>(&mut m, &args.model)?;
    let bytes = m.read_input("task", &args.task)?;
    let ds = parse_dataset(&String::from_utf8_lossy(&bytes))?;
    let set = match &args.ablate {
        Some(p) => Some(read_ablation(&mut m, p)?),
        None => None,
    };
    let record = run_task(
        &model,
        &args.task.display().to_string(),
        &ds,
        &eval_config(&args.eval),
        set.as_ref(),
    )?;
    let body = EvalBody {
        record: &record,
        ablated_neurons: set.as_ref().map_or(0, AblationSet::len),
    };
    ctx.emit(args.out.as_deref(), "eval", &m, body)
}

// report

pub fn report(_ctx: &Ctx, args: ReportArgs) -> Result<()> {
    let bytes = manifest::read_file(&args.input)?;
    let v: Value = parse_json(&bytes, &args.input)?;
    let csv = plotdata::export(&v, args.key.as_deref())?;
    match &args.out {
        Some(path) => manifest::write_file(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
