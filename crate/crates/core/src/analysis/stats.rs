//! Aggregations over token records. Every sum runs in record order.

use std::str::FromStr;

use serde::Serialize;

use super::records::TokenRecord;
use crate::error::{Error, Result};

/// Default chunk length for position series.
pub const DEFAULT_CHUNK: usize = 32;

/// Minimum records for a correlation analysis.
pub const MIN_CORRELATION_RECORDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
    pub r_ze_mean: f64,
    pub r_ze_per_layer: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkedSeries {
    pub chunk_size: usize,
    pub chunks: Vec<Chunk>,
    /// Length of the final chunk, which may be partial.
    pub last_len: usize,
}

/// Consecutive disjoint chunks of `records`; the last chunk is averaged over
/// the tokens it actually holds.
pub fn chunk_average(records: &[TokenRecord], chunk_size: usize) -> Result<ChunkedSeries> {
    if chunk_size == 0 {
        return Err(Error::config("chunk_size must be at least 1"));
    }
    if records.is_empty() {
        return Err(Error::input("no records to chunk"));
    }
    let layers = records[0].r_ze_per_layer.len();
    let chunks: Vec<Chunk> = records
        .chunks(chunk_size)
        .enumerate()
        .map(|(c, rs)| {
            let n = rs.len() as f64;
            let mut per_layer = vec![0.0; layers];
            let mut mean = 0.0;
            for r in rs {
                mean += r.r_ze_mean;
                for (acc, v) in per_layer.iter_mut().zip(&r.r_ze_per_layer) {
                    *acc += v;
                }
            }
            Chunk {
                start: c * chunk_size,
                len: rs.len(),
                r_ze_mean: mean / n,
                r_ze_per_layer: per_layer.into_iter().map(|s| s / n).collect(),
            }
        })
        .collect();
    let last_len = chunks.last().expect("nonempty").len;
    Ok(ChunkedSeries { chunk_size, chunks, last_len })
}

/// `[layer][chunk]` mean r_ze where chunk `c` holds response positions
/// `c·size .. (c+1)·size` across all rollouts.
pub fn layer_chunk_matrix(records: &[TokenRecord], chunk_size: usize) -> Result<Vec<Vec<f64>>> {
    if chunk_size == 0 {
        return Err(Error::config("chunk_size must be at least 1"));
    }
    let first = records.first().ok_or_else(|| Error::input("no records"))?;
    let layers = first.r_ze_per_layer.len();
    let n_chunks = records.iter().map(|r| r.position / chunk_size).max().expect("nonempty") + 1;
    let mut sums = vec![vec![0.0; n_chunks]; layers];
    let mut counts = vec![0usize; n_chunks];
    for r in records {
        let c = r.position / chunk_size;
        counts[c] += 1;
        for (l, v) in r.r_ze_per_layer.iter().enumerate() {
            sums[l][c] += v;
        }
    }
    Ok(sums
        .into_iter()
        .map(|row| row.into_iter().zip(&counts).map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum XField {
    Entropy,
    DeltaLogp,
}

impl XField {
    pub fn get(self, r: &TokenRecord) -> f64 {
        match self {
            XField::Entropy => r.entropy,
            XField::DeltaLogp => r.delta_logp,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            XField::Entropy => "entropy",
            XField::DeltaLogp => "delta_logp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub count: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_mean: f64,
    pub y_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub x_field: XField,
    pub bins: Vec<Bin>,
    /// Spearman rank correlation; `None` when `x` is constant.
    pub spearman: Option<f64>,
}

/// Order of `records` by `(x, index)`, the basis of the equal-count bins.
pub fn sorted_by_x(records: &[TokenRecord], x: XField) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| x.get(&records[a]).total_cmp(&x.get(&records[b])).then(a.cmp(&b)));
    idx
}

/// Sizes of `bins` equal-count bins over `n` items; the first `n % bins`
/// bins hold one extra item.
pub fn bin_sizes(n: usize, bins: usize) -> Vec<usize> {
    (0..bins).map(|b| n / bins + usize::from(b < n % bins)).collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Tied values share the mean of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 {
        return None;
    }
    if sbb == 0.0 {
        return Some(0.0);
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman correlation of `x` against `y`: `None` for constant `x`, 0 for constant `y`.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Equal-count bins of `r_ze_mean` over `x`, plus the rank correlation.
pub fn correlate(records: &[TokenRecord], x: XField, bins: usize) -> Result<Correlation> {
    if records.len() < MIN_CORRELATION_RECORDS {
        return Err(Error::input(format!(
            "correlation needs at least {MIN_CORRELATION_RECORDS} records, got {}",
            records.len()
        )));
    }
    if bins == 0 || bins > records.len() {
        return Err(Error::config(format!("cannot split {} records into {bins} bins", records.len())));
    }
    let order = sorted_by_x(records, x);
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for size in bin_sizes(records.len(), bins) {
        let members = &order[start..start + size];
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in members {
            sx += x.get(&records[i]);
            sy += records[i].r_ze_mean;
        }
        out.push(Bin {
            count: size,
            x_min: x.get(&records[members[0]]),
            x_max: x.get(&records[*members.last().expect("nonempty bin")]),
            x_mean: sx / size as f64,
            y_mean: sy / size as f64,
        });
        start += size;
    }
    let xs: Vec<f64> = records.iter().map(|r| x.get(r)).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.r_ze_mean).collect();
    Ok(Correlation { x_field: x, bins: out, spearman: spearman(&xs, &ys) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    SpanTag,
    Layer,
    RolloutTag,
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span_tag" => Ok(GroupKey::SpanTag),
            "layer" => Ok(GroupKey::Layer),
            "rollout_tag" => Ok(GroupKey::RolloutTag),
            other => {
                Err(Error::input(format!("unknown grouping key {other:?} (expected span_tag, layer or rollout_tag)")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Group {
    pub key: String,
    pub count: usize,
    pub r_ze: f64,
    pub entropy: f64,
    pub delta_logp: f64,
}

#[derive(Default)]
struct Acc {
    n: usize,
    r: f64,
    e: f64,
    d: f64,
}

impl Acc {
    fn push(&mut self, r: f64, rec: &TokenRecord) {
        self.n += 1;
        self.r += r;
        self.e += rec.entropy;
        self.d += rec.delta_logp;
    }

    fn finish(self, key: String) -> Group {
        let n = self.n as f64;
        Group { key, count: self.n, r_ze: self.r / n, entropy: self.e / n, delta_logp: self.d / n }
    }
}

/// Per-group means with counts. Groups appear in a fixed order: tags by
/// their declaration order, layers ascending. Empty groups are omitted.
pub fn aggregate_by(records: &[TokenRecord], key: GroupKey) -> Result<Vec<Group>> {
    if records.is_empty() {
        return Err(Error::input("no records to aggregate"));
    }
    let groups = match key {
        GroupKey::SpanTag | GroupKey::RolloutTag => {
            let mut accs: Vec<Acc> = (0..2).map(|_| Acc::default()).collect();
            for r in records {
                let tag = if key == GroupKey::SpanTag { r.span_tag } else { r.rollout_tag };
                accs[tag as usize].push(r.r_ze_mean, r);
            }
            crate::distillation::SpanTag::ALL
                .iter()
                .zip(accs)
                .filter(|(_, a)| a.n > 0)
                .map(|(t, a)| a.finish(t.to_string()))
                .collect()
        }
        GroupKey::Layer => {
            let layers = records[0].r_ze_per_layer.len();
            let mut accs: Vec<Acc> = (0..layers).map(|_| Acc::default()).collect();
            for r in records {
                for (l, &v) in r.r_ze_per_layer.iter().enumerate() {
                    accs[l].push(v, r);
                }
            }
            accs.into_iter().enumerate().map(|(l, a)| a.finish(l.to_string())).collect()
        }
    };
    Ok(groups)
}

/// Columns `bin,count,x_min,x_max,x_mean,r_ze_mean`, then one trailing row
/// `spearman` whose value is empty when undefined.
pub fn write_correlation_csv<W: std::io::Write>(out: W, c: &Correlation) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin", "count", "x_min", "x_max", "x_mean", "r_ze_mean"])?;
    for (i, b) in c.bins.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.count.to_string(),
            b.x_min.to_string(),
            b.x_max.to_string(),
            b.x_mean.to_string(),
            b.y_mean.to_string(),
        ])?;
    }
    let rho = c.spearman.map(|v| v.to_string()).unwrap_or_default();
    w.write_record(["spearman", "", "", "", "", rho.as_str()])?;
    w.flush()?;
    Ok(())
}

/// Columns `key,count,r_ze,entropy,delta_logp`.
pub fn write_groups_csv<W: std::io::Write>(out: W, groups: &[Group]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["key", "count", "r_ze", "entropy", "delta_logp"])?;
    for g in groups {
        w.write_record([
            g.key.clone(),
            g.count.to_string(),
            g.r_ze.to_string(),
            g.entropy.to_string(),
            g.delta_logp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `rollout_id,chunk,start,len,r_ze_mean,r_ze_layer_0..L-1`.
pub fn write_chunks_csv<W: std::io::Write>(out: W, series: &[(usize, ChunkedSeries)]) -> Result<()> {
    let layers = series.first().and_then(|(_, s)| s.chunks.first()).map_or(0, |c| c.r_ze_per_layer.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["rollout_id", "chunk", "start", "len", "r_ze_mean"].map(String::from).to_vec();
    header.extend((0..layers).map(|l| format!("r_ze_layer_{l}")));
    w.write_record(&header)?;
    for (id, s) in series {
        for (i, c) in s.chunks.iter().enumerate() {
            let mut row =
                vec![id.to_string(), i.to_string(), c.start.to_string(), c.len.to_string(), c.r_ze_mean.to_string()];
            row.extend(c.r_ze_per_layer.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Splits records into per-rollout runs, in order of first appearance.
pub fn by_rollout(records: &[TokenRecord]) -> Vec<(usize, Vec<TokenRecord>)> {
    let mut out: Vec<(usize, Vec<TokenRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(id, _)| *id == r.rollout_id) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((r.rollout_id, vec![r.clone()])),
        }
    }
    out
}
