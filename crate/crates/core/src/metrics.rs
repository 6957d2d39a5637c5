//! Run reports: per-request and per-batch rows plus aggregates derived
//! from them, with byte-stable JSON and CSV output.

use std::io::Write;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: u64,
    pub arrival: f64,
    pub ttft: f64,
    pub e2e: f64,
    pub context_len: u32,
    pub query_len: u32,
    pub output_len: u32,
    pub device_hit_tokens: u64,
    pub host_loaded_tokens: u64,
    pub disk_staged_tokens: u64,
    pub recomputed_tokens: u64,
    pub deferrals: u32,
}

impl RequestRow {
    /// Context tokens served from any cache tier.
    pub fn hit_tokens(&self) -> u64 {
        self.device_hit_tokens + self.host_loaded_tokens + self.disk_staged_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: u64,
    pub start: f64,
    pub requests: u64,
    pub compute_tokens: u64,
    pub host_load_tokens: u64,
    pub ratio: f64,
    pub load_time: f64,
    pub compute_time: f64,
    pub wall: f64,
    pub stall: f64,
    pub bubble_steps: u64,
    pub bundle_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: u64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    pub e2e_mean: f64,
    pub output_tokens: u64,
    pub makespan: f64,
    pub output_throughput: f64,
    pub prefill_time: f64,
    pub stall_time: f64,
    pub stall_fraction: f64,
    pub hit_rate: f64,
    pub compute_tokens: u64,
    pub deferrals: u64,
    pub bundle_hits: u64,
    pub decode_steps: u64,
    pub bubble_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub aggregate: Aggregate,
    pub per_request: Vec<RequestRow>,
    pub per_batch: Vec<BatchRow>,
}

/// Nearest-rank quantile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Run-level counters that are not recoverable from the rows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counters {
    pub decode_steps: u64,
}

/// Builds the aggregate from rows. Deterministic and idempotent.
pub fn aggregate(per_request: Vec<RequestRow>, per_batch: Vec<BatchRow>, counters: Counters) -> Result<SimReport> {
    if per_request.is_empty() {
        return Err(Error::EmptyReport);
    }
    let n = per_request.len();
    let mut ttfts: Vec<f64> = per_request.iter().map(|r| r.ttft).collect();
    ttfts.sort_by(f64::total_cmp);
    let first_arrival = per_request.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let last_finish = per_request.iter().map(|r| r.arrival + r.e2e).fold(f64::NEG_INFINITY, f64::max);
    let makespan = last_finish - first_arrival;
    let output_tokens: u64 = per_request.iter().map(|r| r.output_len as u64).sum();
    let context: u64 = per_request.iter().map(|r| r.context_len as u64).sum();
    let hits: u64 = per_request.iter().map(RequestRow::hit_tokens).sum();
    let prefill_time: f64 = per_batch.iter().map(|b| b.wall).sum();
    let stall_time: f64 = per_batch.iter().map(|b| b.stall).sum();
    let aggregate = Aggregate {
        requests: n as u64,
        ttft_mean: ttfts.iter().sum::<f64>() / n as f64,
        ttft_p50: nearest_rank(&ttfts, 0.5),
        ttft_p90: nearest_rank(&ttfts, 0.9),
        e2e_mean: per_request.iter().map(|r| r.e2e).sum::<f64>() / n as f64,
        output_tokens,
        makespan,
        output_throughput: if makespan > 0.0 { output_tokens as f64 / makespan } else { 0.0 },
        prefill_time,
        stall_time,
        stall_fraction: if prefill_time > 0.0 { (stall_time / prefill_time).clamp(0.0, 1.0) } else { 0.0 },
        hit_rate: if context > 0 { hits as f64 / context as f64 } else { 0.0 },
        compute_tokens: per_batch.iter().map(|b| b.compute_tokens).sum(),
        deferrals: per_request.iter().map(|r| r.deferrals as u64).sum(),
        bundle_hits: per_batch.iter().map(|b| b.bundle_hits).sum(),
        decode_steps: counters.decode_steps,
        bubble_steps: per_batch.iter().map(|b| b.bubble_steps).sum(),
    };
    Ok(SimReport {
        aggregate,
        per_request,
        per_batch,
    })
}

/// Formats a float with 9 significant digits, the fixed precision used in
/// every artifact.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let mant = mant.trim_end_matches('0').trim_end_matches('.');
    if (-5..15).contains(&exp) {
        // re-render positionally from the rounded mantissa
        let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
        let neg = mant.starts_with('-');
        let point = exp + 1;
        let body = if point <= 0 {
            format!("0.{}{}", "0".repeat((-point) as usize), digits)
        } else if point as usize >= digits.len() {
            format!("{}{}", digits, "0".repeat(point as usize - digits.len()))
        } else {
            format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
        };
        if neg {
            format!("-{body}")
        } else {
            body
        }
    } else {
        format!("{mant}e{exp}")
    }
}

/// Rounds through [`fmt_f64`] so the value serializes as a JSON number
/// with the fixed precision.
fn rounded(v: f64) -> serde_json::Value {
    match fmt_f64(v).parse::<serde_json::Number>() {
        Ok(n) => serde_json::Value::Number(n),
        Err(_) => serde_json::Value::Null,
    }
}

fn canonical(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => rounded(n.as_f64().expect("f64")),
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, canonical(v))).collect()),
        other => other,
    }
}

struct Sorted<'a>(&'a serde_json::Value);

impl Serialize for Sorted<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde_json::Value;
        match self.0 {
            Value::Object(o) => {
                let mut keys: Vec<&String> = o.keys().collect();
                keys.sort();
                let mut m = s.serialize_map(Some(keys.len()))?;
                for k in keys {
                    m.serialize_entry(k, &Sorted(&o[k]))?;
                }
                m.end()
            }
            Value::Array(a) => {
                let mut q = s.serialize_seq(Some(a.len()))?;
                for v in a {
                    q.serialize_element(&Sorted(v))?;
                }
                q.end()
            }
            other => other.serialize(s),
        }
    }
}

/// JSON with sorted keys and 9-significant-digit floats.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Io(e.to_string()))?;
    let v = canonical(v);
    let mut out = serde_json::to_string_pretty(&Sorted(&v)).map_err(|e| Error::Io(e.to_string()))?;
    out.push('\n');
    Ok(out)
}

/// One compact stable JSON object per line.
pub fn to_stable_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        let v = canonical(serde_json::to_value(r).map_err(|e| Error::Io(e.to_string()))?);
        out.push_str(&serde_json::to_string(&Sorted(&v)).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// CSV with a header row taken from the struct's field order.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], mut w: W) -> Result<()> {
    let mut header_done = false;
    for r in rows {
        let v = serde_json::to_value(r).map_err(|e| Error::Io(e.to_string()))?;
        let serde_json::Value::Object(o) = v else {
            return Err(Error::Io("csv rows must be structs".into()));
        };
        if !header_done {
            let keys: Vec<&str> = o.keys().map(String::as_str).collect();
            writeln!(w, "{}", keys.join(","))?;
            header_done = true;
        }
        let cells: Vec<String> = o.values().map(csv_cell).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

fn csv_cell(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Null => String::new(),
        Value::Number(n) if n.is_f64() => fmt_f64(n.as_f64().expect("f64")),
        Value::Number(n) => n.to_string(),
        Value::String(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
        Value::String(s) => s.clone(),
        other => {
            let s = other.to_string();
            format!("\"{}\"", s.replace('"', "\"\""))
        }
    }
}
