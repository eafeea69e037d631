//! CSV series for plotting, keyed on a report's `schema` field.
//!
//! | report   | columns                                              |
//! |----------|------------------------------------------------------|
//! | profile  | `layer,pct_active`                                   |
//! | editdist | `layer,delta`                                        |
//! | cosine   | `label,<label_1>,…,<label_n>` (square matrix)        |
//! | wsim     | `key,cosine`                                         |
//! | ssa      | `layer,kind,name,k,ssa,e_par,e_perp,t_norm`          |
//! | ablate   | `condition,accuracy,normalized_accuracy`             |
//! | eval     | `task,accuracy,thought_rate,format_rate,stop_rate`   |
//!
//! Numbers are written in shortest round-trip form; `undefined` and missing
//! values are written as `undefined` and the empty string.

use serde_json::Value;
use tunevec_core::{Error, Result};

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => format!("{x}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| bad(format!("report has no {key:?} field")))
}

fn array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    field(v, key)?
        .as_array()
        .ok_or_else(|| bad(format!("{key:?} is not an array")))
}

fn write(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| bad(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| bad(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

fn per_layer(report: &Value, key: &str, value: &str) -> Result<String> {
    let rows = array(report, key)?
        .iter()
        .map(|l| Ok(vec![cell(field(l, "layer")?), cell(field(l, value)?)]))
        .collect::<Result<_>>()?;
    write(&["layer", value], rows)
}

fn cosine_matrix(report: &Value, key: Option<&str>) -> Result<String> {
    let matrices = field(report, "matrices")?
        .as_object()
        .ok_or_else(|| bad("\"matrices\" is not an object"))?;
    let key = match key {
        Some(k) => k.to_owned(),
        None if matrices.len() == 1 => matrices.keys().next().expect("one key").clone(),
        None => {
            let keys: Vec<&str> = matrices.keys().map(String::as_str).collect();
            return Err(bad(format!(
                "report has several matrices; pick one with --key ({})",
                keys.join(", ")
            )));
        }
    };
    let mat = matrices
        .get(&key)
        .and_then(Value::as_array)
        .ok_or_else(|| bad(format!("no matrix {key:?}")))?;
    let labels: Vec<String> = array(report, "labels")?.iter().map(cell).collect();
    let mut header = vec!["label"];
    header.extend(labels.iter().map(String::as_str));
    let rows = mat
        .iter()
        .zip(&labels)
        .map(|(row, label)| {
            let mut r = vec![label.clone()];
            r.extend(row.as_array().into_iter().flatten().map(cell));
            r
        })
        .collect();
    write(&header, rows)
}

fn wsim_rows(report: &Value) -> Result<String> {
    let entries = field(report, "entries")?
        .as_object()
        .ok_or_else(|| bad("\"entries\" is not an object"))?;
    let mut rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.clone(), cell(v)]).collect();
    if let Some(g) = report.get("global_x100") {
        rows.push(vec!["global_x100".into(), cell(g)]);
    }
    write(&["key", "cosine"], rows)
}

fn ssa_rows(report: &Value) -> Result<String> {
    let cols = ["layer", "kind", "name", "k", "ssa", "e_par", "e_perp", "t_norm"];
    let rows = array(report, "per_layer")?
        .iter()
        .map(|e| cols.iter().map(|c| e.get(*c).map(cell).unwrap_or_default()).collect())
        .collect();
    write(&cols, rows)
}

fn ablate_rows(report: &Value) -> Result<String> {
    let eval = field(report, "eval").map_err(|_| bad("ablate report has no evaluation (run with --task)"))?;
    let orig = field(eval, "original_accuracy")?.as_f64();
    let abl = field(eval, "ablated_accuracy")?.as_f64();
    let norm = |x: Option<f64>| match (x, orig) {
        (Some(x), Some(o)) if o > 0.0 => format!("{}", x / o),
        _ => "undefined".to_owned(),
    };
    let num = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
    write(
        &["condition", "accuracy", "normalized_accuracy"],
        vec![
            vec!["original".into(), num(orig), norm(orig)],
            vec!["ablated".into(), num(abl), norm(abl)],
        ],
    )
}

fn eval_rows(report: &Value) -> Result<String> {
    let agg = field(report, "aggregate")?;
    let get = |k: &str| agg.get(k).map(cell).unwrap_or_default();
    write(
        &["task", "accuracy", "thought_rate", "format_rate", "stop_rate"],
        vec![vec![
            cell(field(report, "task")?),
            get("accuracy"),
            get("thought_rate"),
            get("format_rate"),
            get("stop_rate"),
        ]],
    )
}

pub fn export(report: &Value, key: Option<&str>) -> Result<String> {
    let schema = report
        .get("schema")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("input has no \"schema\" field"))?;
    match schema {
        "tunevec.profile/1" => per_layer(report, "layers", "pct_active"),
        "tunevec.editdist/1" => per_layer(report, "layers", "delta"),
        "tunevec.cosine/1" => cosine_matrix(report, key),
        "tunevec.wsim/1" => wsim_rows(report),
        "tunevec.ssa/1" => ssa_rows(report),
        "tunevec.ablate/1" => ablate_rows(report),
        "tunevec.eval/1" => eval_rows(report),
        other => Err(bad(format!("no plot data for report schema {other:?}"))),
    }
}
