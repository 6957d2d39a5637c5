//! Workload traces: synthetic generation, cache-distance reordering, and
//! the JSON-lines trace format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::TokenId;

pub const VOCAB_SIZE: u32 = 32_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: u64,
    pub arrival_s: f64,
    pub context_id: u64,
    pub context_len: u32,
    pub query_len: u32,
    pub output_len: u32,
    pub round: u32,
    pub depends_on: Option<u64>,
}

/// Uniform around `mean` by `±spread` (a fraction of the mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dist {
    pub mean: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.2
}

impl Dist {
    pub const fn new(mean: f64) -> Self {
        Self { mean, spread: 0.2 }
    }

    pub const fn fixed(mean: f64) -> Self {
        Self { mean, spread: 0.0 }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, min: u32) -> u32 {
        let v = if self.spread > 0.0 {
            rng.gen_range(self.mean * (1.0 - self.spread)..=self.mean * (1.0 + self.spread))
        } else {
            self.mean
        };
        (v.round() as u32).max(min)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean >= 0.0) || !(0.0..=1.0).contains(&self.spread) {
            return Err(Error::Config(format!("{what}: mean must be ≥ 0 and spread within [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Requests for the same context are adjacent.
    #[serde(alias = "min")]
    MinDistance,
    #[default]
    Shuffle,
    /// Requests cycle through the contexts.
    #[serde(alias = "max")]
    MaxDistance,
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" | "min_distance" => Ok(Pattern::MinDistance),
            "shuffle" => Ok(Pattern::Shuffle),
            "max" | "max_distance" => Ok(Pattern::MaxDistance),
            _ => Err(Error::Config(format!("unknown pattern {s:?}; expected min, shuffle or max"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_contexts: u32,
    /// Queries per context, or rounds per conversation when multi-turn.
    pub queries_per_context: Dist,
    pub context_len: Dist,
    pub query_len: Dist,
    pub output_len: Dist,
    /// Poisson arrival rate in requests per second.
    pub rate: f64,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default)]
    pub multi_turn: bool,
    #[serde(default)]
    pub thinking_time_s: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_inflight() -> usize {
    128
}

impl WorkloadSpec {
    /// Built-in profile approximating a public dataset's size statistics.
    pub fn profile(name: &str) -> Result<Self> {
        let base = |contexts, qpc, ctx, query, out| WorkloadSpec {
            num_contexts: contexts,
            queries_per_context: Dist::new(qpc),
            context_len: Dist::new(ctx),
            query_len: Dist::new(query),
            output_len: Dist::new(out),
            rate: 1.0,
            pattern: Pattern::Shuffle,
            multi_turn: false,
            thinking_time_s: 0.0,
            max_inflight: 128,
            seed: 0,
        };
        Ok(match name {
            "loogle" => base(105, 2410.0 / 105.0, 21_613.0, 32.0, 15.6),
            "narrativeqa" => base(50, 1461.0 / 50.0, 54_797.0, 32.0, 13.0),
            "reviewmt" => WorkloadSpec {
                multi_turn: true,
                ..base(100, 1092.0 / 100.0, 14_000.0, 500.0, 208.3)
            },
            "sharegpt-like" | "sharegpt" => WorkloadSpec {
                multi_turn: true,
                thinking_time_s: 60.0,
                ..base(1000, 4.0, 120.0, 80.0, 260.9)
            },
            other => return Err(Error::Config(format!("unknown workload profile {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::Config("workload rate must be positive".into()));
        }
        if self.num_contexts == 0 || self.max_inflight == 0 {
            return Err(Error::Config("num_contexts and max_inflight must be positive".into()));
        }
        if !(self.thinking_time_s >= 0.0) {
            return Err(Error::Config("thinking_time_s must be ≥ 0".into()));
        }
        self.queries_per_context.validate("queries_per_context")?;
        self.context_len.validate("context_len")?;
        self.query_len.validate("query_len")?;
        self.output_len.validate("output_len")?;
        Ok(())
    }
}

/// Deterministic trace for `spec`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<TraceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = Exp::new(spec.rate).map_err(|e| Error::Config(e.to_string()))?;
    if spec.multi_turn {
        return Ok(generate_conversations(spec, &mut rng, &gaps));
    }
    let mut ctx_lens = Vec::with_capacity(spec.num_contexts as usize);
    let mut pairs = Vec::new();
    for c in 0..spec.num_contexts as u64 {
        ctx_lens.push(spec.context_len.sample(&mut rng, 0));
        let n = spec.queries_per_context.sample(&mut rng, 1);
        pairs.extend(std::iter::repeat_n(c, n as usize));
    }
    pairs.shuffle(&mut rng);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(pairs.len());
    for (i, c) in pairs.into_iter().enumerate() {
        t += gaps.sample(&mut rng);
        let ctx = ctx_lens[c as usize];
        out.push(TraceRecord {
            id: i as u64,
            arrival_s: t,
            context_id: c,
            context_len: ctx,
            query_len: spec.query_len.sample(&mut rng, if ctx == 0 { 1 } else { 0 }),
            output_len: spec.output_len.sample(&mut rng, 1),
            round: 0,
            depends_on: None,
        });
    }
    let mut out = apply_pattern(out, spec.pattern, spec.seed)?;
    for (i, r) in out.iter_mut().enumerate() {
        r.id = i as u64;
    }
    Ok(out)
}

fn generate_conversations(spec: &WorkloadSpec, rng: &mut ChaCha8Rng, gaps: &Exp<f64>) -> Vec<TraceRecord> {
    let mut recs = Vec::new();
    let mut t = 0.0;
    for c in 0..spec.num_contexts as u64 {
        t += gaps.sample(rng);
        let rounds = spec.queries_per_context.sample(rng, 1);
        let mut ctx = spec.context_len.sample(rng, 0);
        let mut arrival = t;
        let mut parent = None;
        for k in 0..rounds {
            let query = spec.query_len.sample(rng, 1);
            let output = spec.output_len.sample(rng, 1);
            let id = recs.len() as u64;
            recs.push(TraceRecord {
                id,
                arrival_s: arrival,
                context_id: c,
                context_len: ctx,
                query_len: query,
                output_len: output,
                round: k,
                depends_on: parent,
            });
            parent = Some(id);
            ctx += query + output;
            arrival += spec.thinking_time_s;
        }
    }
    sort_and_renumber(recs)
}

fn sort_and_renumber(mut recs: Vec<TraceRecord>) -> Vec<TraceRecord> {
    recs.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.id.cmp(&b.id)));
    let map: HashMap<u64, u64> = recs.iter().enumerate().map(|(i, r)| (r.id, i as u64)).collect();
    for r in &mut recs {
        r.id = map[&r.id];
        r.depends_on = r.depends_on.map(|d| map[&d]);
    }
    recs
}

/// Reorders a single-turn trace by cache distance, keeping the original
/// sequence of inter-arrival gaps.
pub fn apply_pattern(trace: Vec<TraceRecord>, pattern: Pattern, seed: u64) -> Result<Vec<TraceRecord>> {
    if trace.iter().any(|r| r.depends_on.is_some()) {
        return Err(Error::Unsupported("cache-distance patterns apply to single-turn traces only".into()));
    }
    let times: Vec<f64> = trace.iter().map(|r| r.arrival_s).collect();
    let mut groups: Vec<Vec<TraceRecord>> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut order = match pattern {
        Pattern::Shuffle => {
            let mut v = trace;
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995));
            v
        }
        Pattern::MinDistance | Pattern::MaxDistance => {
            for r in trace {
                let g = *slot.entry(r.context_id).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(r);
            }
            if pattern == Pattern::MinDistance {
                groups.into_iter().flatten().collect()
            } else {
                let mut iters: Vec<_> = groups.into_iter().map(|g| g.into_iter()).collect();
                let mut v = Vec::new();
                loop {
                    let before = v.len();
                    v.extend(iters.iter_mut().filter_map(Iterator::next));
                    if v.len() == before {
                        break v;
                    }
                }
            }
        }
    };
    for (r, t) in order.iter_mut().zip(times) {
        r.arrival_s = t;
    }
    Ok(order)
}

pub fn write_trace<W: Write>(trace: &[TraceRecord], mut w: W) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_trace(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace(trace, f)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))?;
    parse_trace(std::io::BufReader::new(f))
}

/// Parses and validates a JSON-lines trace; records come back sorted by
/// arrival, ties kept in file order.
pub fn parse_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut recs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.context_len as u64 + rec.query_len as u64 == 0 || rec.output_len == 0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "record needs a non-empty prompt and output_len ≥ 1".into(),
            });
        }
        if !rec.arrival_s.is_finite() || rec.arrival_s < 0.0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "arrival_s must be finite and ≥ 0".into(),
            });
        }
        recs.push(rec);
    }
    validate_trace(&recs)?;
    recs.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
    Ok(recs)
}

/// Checks id uniqueness and that dependencies resolve without cycles.
pub fn validate_trace(recs: &[TraceRecord]) -> Result<()> {
    let mut parent: BTreeMap<u64, Option<u64>> = BTreeMap::new();
    for r in recs {
        if parent.insert(r.id, r.depends_on).is_some() {
            return Err(Error::Trace(format!("duplicate request id {}", r.id)));
        }
    }
    for r in recs {
        if let Some(d) = r.depends_on {
            if !parent.contains_key(&d) {
                return Err(Error::Trace(format!("request {} depends on unknown request {d}", r.id)));
            }
        }
    }
    let mut done: HashSet<u64> = HashSet::new();
    for &start in parent.keys() {
        let mut seen = HashSet::new();
        let mut cur = Some(start);
        while let Some(c) = cur {
            if done.contains(&c) {
                break;
            }
            if !seen.insert(c) {
                return Err(Error::Trace(format!("dependency cycle through request {c}")));
            }
            cur = parent[&c];
        }
        done.extend(seen);
    }
    Ok(())
}

/// Deterministic pseudo-token at `pos` of a token stream.
pub fn token_at(seed: u64, stream: u64, pos: u64) -> TokenId {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(pos.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z % VOCAB_SIZE as u64) as TokenId
}

fn stream(seed: u64, id: u64, range: std::ops::Range<u64>) -> impl Iterator<Item = TokenId> {
    range.map(move |p| token_at(seed, id, p))
}

const REQUEST_STREAM: u64 = 1 << 63;

/// Prompt tokens of a record. Conversation rounds continue their context's
/// stream so each round extends the previous prompt and output.
pub fn prompt_tokens(rec: &TraceRecord, conversational: bool, seed: u64) -> Vec<TokenId> {
    let ctx = rec.context_len as u64;
    let q = rec.query_len as u64;
    let mut v: Vec<TokenId> = stream(seed, rec.context_id, 0..ctx).collect();
    if conversational {
        v.extend(stream(seed, rec.context_id, ctx..ctx + q));
    } else {
        v.extend(stream(seed, REQUEST_STREAM | rec.id, 0..q));
    }
    v
}

/// Generated output tokens of a record.
pub fn output_tokens(rec: &TraceRecord, conversational: bool, seed: u64) -> Vec<TokenId> {
    let start = rec.context_len as u64 + rec.query_len as u64;
    let o = rec.output_len as u64;
    if conversational {
        stream(seed, rec.context_id, start..start + o).collect()
    } else {
        stream(seed, REQUEST_STREAM | rec.id, rec.query_len as u64..rec.query_len as u64 + o).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            num_contexts: 4,
            queries_per_context: Dist::fixed(3.0),
            context_len: Dist::new(100.0),
            query_len: Dist::new(10.0),
            output_len: Dist::new(5.0),
            rate: 2.0,
            pattern: Pattern::Shuffle,
            multi_turn: false,
            thinking_time_s: 0.0,
            max_inflight: 128,
            seed: 7,
        }
    }

    fn rec(id: u64, ctx: u64, t: f64) -> TraceRecord {
        TraceRecord {
            id,
            arrival_s: t,
            context_id: ctx,
            context_len: 10,
            query_len: 1,
            output_len: 1,
            round: 0,
            depends_on: None,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        assert_eq!(generate(&small()).unwrap().len(), 12);
    }

    #[test]
    fn mean_interarrival() {
        let spec = WorkloadSpec {
            num_contexts: 1,
            queries_per_context: Dist::fixed(1000.0),
            ..small()
        };
        let mut total = 0.0;
        for seed in 0..10 {
            let t = generate(&WorkloadSpec { seed, ..spec.clone() }).unwrap();
            total += t.last().unwrap().arrival_s / 1000.0;
        }
        let mean = total / 10.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn same_context_same_prefix() {
        let t = generate(&small()).unwrap();
        let a = t.iter().find(|r| r.context_id == 1).unwrap();
        let b = t.iter().rfind(|r| r.context_id == 1).unwrap();
        assert_ne!(a.id, b.id);
        let (pa, pb) = (prompt_tokens(a, false, 3), prompt_tokens(b, false, 3));
        assert_eq!(pa[..a.context_len as usize], pb[..b.context_len as usize]);
        assert!(pa.iter().all(|x| *x < VOCAB_SIZE));
    }

    #[test]
    fn patterns() {
        let t = vec![rec(0, 0, 1.0), rec(1, 0, 2.0), rec(2, 1, 4.0), rec(3, 1, 8.0)];
        let ctx = |v: &[TraceRecord]| v.iter().map(|r| r.context_id).collect::<Vec<_>>();
        let min = apply_pattern(t.clone(), Pattern::MinDistance, 0).unwrap();
        assert_eq!(ctx(&min), vec![0, 0, 1, 1]);
        let max = apply_pattern(t.clone(), Pattern::MaxDistance, 0).unwrap();
        assert_eq!(ctx(&max), vec![0, 1, 0, 1]);
        assert_eq!(max.iter().map(|r| r.arrival_s).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(
            apply_pattern(t.clone(), Pattern::Shuffle, 9).unwrap(),
            apply_pattern(t.clone(), Pattern::Shuffle, 9).unwrap()
        );
        let mut chained = t;
        chained[1].depends_on = Some(0);
        assert!(matches!(apply_pattern(chained, Pattern::MinDistance, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn conversation_rounds_extend_prompts() {
        let spec = WorkloadSpec {
            multi_turn: true,
            thinking_time_s: 60.0,
            ..small()
        };
        let t = generate(&spec).unwrap();
        let child = t.iter().find(|r| r.round == 1).unwrap();
        let parent = &t[child.depends_on.unwrap() as usize];
        assert_eq!(parent.id, child.depends_on.unwrap());
        assert!(child.arrival_s >= parent.arrival_s + 60.0);
        let mut history = prompt_tokens(parent, true, 1);
        history.extend(output_tokens(parent, true, 1));
        let p = prompt_tokens(child, true, 1);
        assert_eq!(p[..history.len()], history[..]);
    }

    #[test]
    fn trace_round_trip_and_validation() {
        let t = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(parse_trace(&buf[..]).unwrap(), t);

        let unsorted = "{\"id\":1,\"arrival_s\":2.0,\"context_id\":0,\"context_len\":1,\"query_len\":1,\"output_len\":1,\"round\":0,\"depends_on\":null}\n\
                        {\"id\":0,\"arrival_s\":1.0,\"context_id\":0,\"context_len\":1,\"query_len\":1,\"output_len\":1,\"round\":0,\"depends_on\":null}\n";
        let v = parse_trace(unsorted.as_bytes()).unwrap();
        assert_eq!(v[0].id, 0);

        let bad = "{\"id\":0}\n";
        assert!(matches!(parse_trace(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));

        let dangling = vec![TraceRecord {
            depends_on: Some(9),
            ..rec(0, 0, 0.0)
        }];
        assert!(matches!(validate_trace(&dangling), Err(Error::Trace(_))));
        let cycle = vec![
            TraceRecord {
                depends_on: Some(1),
                ..rec(0, 0, 0.0)
            },
            TraceRecord {
                depends_on: Some(0),
                ..rec(1, 0, 0.0)
            },
        ];
        assert!(matches!(validate_trace(&cycle), Err(Error::Trace(_))));
    }

    #[test]
    fn loogle_profile_means() {
        let spec = WorkloadSpec::profile("loogle").unwrap();
        let t = generate(&spec).unwrap();
        let per_ctx: BTreeMap<u64, u32> = t.iter().map(|r| (r.context_id, r.context_len)).collect();
        let mean = per_ctx.values().map(|v| *v as f64).sum::<f64>() / per_ctx.len() as f64;
        assert!((mean / 21_613.0 - 1.0).abs() < 0.05, "{mean}");
    }
}
