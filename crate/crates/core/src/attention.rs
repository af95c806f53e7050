//! Dense multi-scale, multi-head attention over a feature pyramid.
//!
//! For query `q` and head `m`, every key `k` on every level `l` receives a
//! weight `A_mlqk ∝ exp((U_m z_q)·(V_m f_k) / sqrt(C_v))`, normalized jointly
//! over all levels and keys. The output is
//! `sum_m W_m [ sum_l sum_k A_mlqk · W'_m f_k ]`.
//! Positional encodings are added to queries and keys before the weights are
//! formed; the value path sees the raw features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{dot, softmax_unchecked, Mat};

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_CHANNELS: usize = 256;
pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_QUERIES: usize = 300;
const PE_TEMPERATURE: f64 = 10_000.0;

/// `H x W x C` map stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!("empty feature map {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w}x{c} feature map from {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map entry".into()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    /// Feature vectors in raster order.
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.c)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::ShapeMismatch("pyramid has no levels".into()));
        };
        let c = first.c;
        if let Some(l) = levels.iter().position(|m| m.c != c) {
            return Err(Error::ShapeMismatch(format!(
                "level {l} has {} channels, level 0 has {c}",
                levels[l].c
            )));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].c
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { levels: self.levels.iter().map(|l| l.scaled(s)).collect() }
    }
}

/// Halves the resolution `levels - 1` times by 2x2 stride-2 average pooling.
/// Odd edges pool over the cells that exist, giving `ceil(H / 2^l)` rows.
pub fn build_pyramid(base: &FeatureMap, levels: usize) -> Result<FeaturePyramid> {
    if levels == 0 {
        return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
    }
    let need = 1usize << (levels - 1);
    if base.h < need || base.w < need {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} base is too small for {levels} levels (needs {need}x{need})",
            base.h, base.w
        )));
    }
    let mut out = vec![base.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        out.push(avg_pool2(prev));
    }
    FeaturePyramid::new(out)
}

fn avg_pool2(m: &FeatureMap) -> FeatureMap {
    let h = m.h.div_ceil(2);
    let w = m.w.div_ceil(2);
    let mut data = vec![0.0; h * w * m.c];
    for y in 0..h {
        for x in 0..w {
            let cells: Vec<(usize, usize)> = [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)]
                .into_iter()
                .filter(|&(yy, xx)| yy < m.h && xx < m.w)
                .collect();
            let o = (y * w + x) * m.c;
            for &(yy, xx) in &cells {
                for (d, s) in data[o..o + m.c].iter_mut().zip(m.at(yy, xx)) {
                    *d += s;
                }
            }
            let n = cells.len() as f64;
            for d in &mut data[o..o + m.c] {
                *d /= n;
            }
        }
    }
    FeatureMap { h, w, c: m.c, data }
}

/// Sine/cosine encoding of a (possibly fractional) position. The first
/// `C/2` channels encode `y`, the rest `x`; within each half, channel `2i`
/// is `sin(p·ω_i)` and `2i + 1` is `cos(p·ω_i)` with
/// `ω_i = 10000^(-2i / (C/2))`.
pub fn encode_position(y: f64, x: f64, c: usize) -> Result<Vec<f64>> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::ShapeMismatch(format!(
            "positional encoding needs channels divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let mut out = Vec::with_capacity(c);
    for p in [y, x] {
        for i in 0..half / 2 {
            let omega = PE_TEMPERATURE.powf(-((2 * i) as f64) / half as f64);
            out.push((p * omega).sin());
            out.push((p * omega).cos());
        }
    }
    Ok(out)
}

/// Encoding of every integer grid position of an `h x w` map.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Result<FeatureMap> {
    encode_position(0.0, 0.0, c)?;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            data.extend(encode_position(y as f64, x as f64, c)?);
        }
    }
    FeatureMap::new(h, w, c, data)
}

/// Where positional encodings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionalEncoding {
    /// Fixed sine/cosine encodings.
    Sinusoidal,
    /// Free per-position tables, one per pyramid level plus one row per query.
    Learned { levels: Vec<FeatureMap>, queries: Vec<Vec<f64>> },
}

impl PositionalEncoding {
    /// Learned tables initialized from `N(0, 0.02^2)` with the given seed.
    pub fn learned(pyramid: &FeaturePyramid, n_queries: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let c = pyramid.channels();
        let levels = pyramid
            .levels
            .iter()
            .map(|l| FeatureMap {
                h: l.h,
                w: l.w,
                c,
                data: (0..l.h * l.w * c).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect();
        let queries = (0..n_queries)
            .map(|_| (0..c).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        PositionalEncoding::Learned { levels, queries }
    }

    fn key_table(&self, level: usize, map: &FeatureMap) -> Result<FeatureMap> {
        match self {
            PositionalEncoding::Sinusoidal => positional_encoding(map.h, map.w, map.c),
            PositionalEncoding::Learned { levels, .. } => {
                let t = levels
                    .get(level)
                    .ok_or_else(|| Error::ShapeMismatch(format!("no learned table for level {level}")))?;
                if (t.h, t.w, t.c) != (map.h, map.w, map.c) {
                    return Err(Error::ShapeMismatch(format!("learned table for level {level} has wrong shape")));
                }
                Ok(t.clone())
            }
        }
    }

    fn query_vector(&self, q: usize, pos: (f64, f64), c: usize) -> Result<Vec<f64>> {
        match self {
            PositionalEncoding::Sinusoidal => encode_position(pos.0, pos.1, c),
            PositionalEncoding::Learned { queries, .. } => queries
                .get(q)
                .filter(|v| v.len() == c)
                .cloned()
                .ok_or_else(|| Error::ShapeMismatch(format!("no learned encoding for query {q}"))),
        }
    }
}

/// Per-head projections. With `C_v = C / M`: `out[m]` is `C x C_v`
/// (`W_m`), `value[m]`, `query[m]` and `key[m]` are `C_v x C`
/// (`W'_m`, `U_m`, `V_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    channels: usize,
    out: Vec<Mat>,
    value: Vec<Mat>,
    query: Vec<Mat>,
    key: Vec<Mat>,
}

impl AttentionParams {
    pub fn new(channels: usize, out: Vec<Mat>, value: Vec<Mat>, query: Vec<Mat>, key: Vec<Mat>) -> Result<Self> {
        let heads = out.len();
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::ShapeMismatch(format!("{channels} channels not divisible into {heads} heads")));
        }
        if value.len() != heads || query.len() != heads || key.len() != heads {
            return Err(Error::ShapeMismatch("per-head matrix counts differ".into()));
        }
        let cv = channels / heads;
        let shaped = |m: &Mat, r: usize, c: usize| m.rows() == r && m.cols() == c;
        for m in 0..heads {
            if !shaped(&out[m], channels, cv)
                || !shaped(&value[m], cv, channels)
                || !shaped(&query[m], cv, channels)
                || !shaped(&key[m], cv, channels)
            {
                return Err(Error::ShapeMismatch(format!("head {m} projections do not match C={channels}, C_v={cv}")));
            }
        }
        Ok(Self { channels, out, value, query, key })
    }

    /// Gaussian initialization with variance `1 / C`.
    pub fn random(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::ShapeMismatch(format!("{channels} channels not divisible into {heads} heads")));
        }
        let cv = channels / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("valid std");
        let mut draw = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let mut out = Vec::new();
        let mut value = Vec::new();
        let mut query = Vec::new();
        let mut key = Vec::new();
        for _ in 0..heads {
            out.push(draw(channels, cv));
            value.push(draw(cv, channels));
            query.push(draw(cv, channels));
            key.push(draw(cv, channels));
        }
        Self::new(channels, out, value, query, key)
    }

    /// Single head with identity value and output maps.
    pub fn identity(channels: usize) -> Self {
        let i = Mat::identity(channels);
        Self::new(channels, vec![i.clone()], vec![i.clone()], vec![i.clone()], vec![i])
            .expect("square identity projections")
    }

    pub fn heads(&self) -> usize {
        self.out.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads()
    }

    pub fn out(&self, head: usize) -> &Mat {
        &self.out[head]
    }
    pub fn value(&self, head: usize) -> &Mat {
        &self.value[head]
    }
    pub fn query(&self, head: usize) -> &Mat {
        &self.query[head]
    }
    pub fn key(&self, head: usize) -> &Mat {
        &self.key[head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    queries: Vec<Vec<f64>>,
    positions: Vec<(f64, f64)>,
}

impl QuerySet {
    /// `positions[q]` is the `(y, x)` anchor of query `q` in base-level cells.
    pub fn new(queries: Vec<Vec<f64>>, positions: Vec<(f64, f64)>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::ShapeMismatch("need at least one query".into()));
        }
        if positions.len() != queries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions for {} queries",
                positions.len(),
                queries.len()
            )));
        }
        let c = queries[0].len();
        if c == 0 || queries.iter().any(|q| q.len() != c) {
            return Err(Error::ShapeMismatch("queries must share a nonzero dimension".into()));
        }
        if queries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query entry".into()));
        }
        Ok(Self { queries, positions })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }
}

/// Keys of one pyramid level: raw features (value path) and their
/// positional encodings (added on the weight path only).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyLevel {
    pub features: Vec<Vec<f64>>,
    pub encodings: Vec<Vec<f64>>,
}

impl KeyLevel {
    pub fn from_map(map: &FeatureMap, encoding: &FeatureMap) -> Self {
        Self {
            features: map.vectors().map(<[f64]>::to_vec).collect(),
            encodings: encoding.vectors().map(<[f64]>::to_vec).collect(),
        }
    }
}

fn check_dim(v: &[f64], c: usize, what: &str) -> Result<()> {
    if v.len() != c {
        return Err(Error::ShapeMismatch(format!("{what} has dim {}, expected {c}", v.len())));
    }
    Ok(())
}

/// Weights `A_mlqk` of one head for one query over keys grouped by level.
/// `query` and `keys` should already include positional encodings.
pub fn attention_weights(query: &[f64], keys: &[Vec<Vec<f64>>], params: &AttentionParams, head: usize) -> Result<Vec<Vec<f64>>> {
    if head >= params.heads() {
        return Err(Error::ShapeMismatch(format!("head {head} of {}", params.heads())));
    }
    check_dim(query, params.channels, "query")?;
    let mut projected = Vec::with_capacity(keys.len());
    for level in keys {
        let mut row = Vec::with_capacity(level.len());
        for k in level {
            check_dim(k, params.channels, "key")?;
            row.push(params.key[head].matvec(k)?);
        }
        projected.push(row);
    }
    Ok(weights_from_projected(&params.query[head].matvec(query)?, &projected, params.head_dim()))
}

fn weights_from_projected(uq: &[f64], keys: &[Vec<Vec<f64>>], cv: usize) -> Vec<Vec<f64>> {
    let scale = (cv as f64).sqrt();
    let logits: Vec<f64> = keys.iter().flatten().map(|vk| dot(uq, vk) / scale).collect();
    if logits.is_empty() {
        return keys.iter().map(|_| Vec::new()).collect();
    }
    let flat = softmax_unchecked(&logits);
    let mut it = flat.into_iter();
    keys.iter().map(|l| it.by_ref().take(l.len()).collect()).collect()
}

/// `W_m [ sum_l sum_k A_lk · W'_m f_k ]` for fixed weights.
pub fn head_output(weights: &[Vec<f64>], values: &[Vec<Vec<f64>>], params: &AttentionParams, head: usize) -> Result<Vec<f64>> {
    if weights.len() != values.len() || weights.iter().zip(values).any(|(a, v)| a.len() != v.len()) {
        return Err(Error::ShapeMismatch("weights and values disagree in shape".into()));
    }
    let mut acc = vec![0.0; params.head_dim()];
    for (a, level) in weights.iter().zip(values) {
        for (w, f) in a.iter().zip(level) {
            check_dim(f, params.channels, "value")?;
            let proj = params.value[head].matvec(f)?;
            for (s, p) in acc.iter_mut().zip(proj) {
                *s += w * p;
            }
        }
    }
    params.out[head].matvec(&acc)
}

// Query-independent per-head projections of every key.
struct PreparedKeys {
    keys: Vec<Vec<Vec<Vec<f64>>>>,   // [head][level][key] -> C_v
    values: Vec<Vec<Vec<Vec<f64>>>>, // [head][level][key] -> C_v
}

fn prepare(levels: &[KeyLevel], params: &AttentionParams) -> Result<PreparedKeys> {
    let mut keys = Vec::with_capacity(params.heads());
    let mut values = Vec::with_capacity(params.heads());
    for m in 0..params.heads() {
        let mut kh = Vec::with_capacity(levels.len());
        let mut vh = Vec::with_capacity(levels.len());
        for level in levels {
            if level.features.len() != level.encodings.len() {
                return Err(Error::ShapeMismatch("key features and encodings differ in count".into()));
            }
            let mut kl = Vec::with_capacity(level.features.len());
            let mut vl = Vec::with_capacity(level.features.len());
            for (f, pe) in level.features.iter().zip(&level.encodings) {
                check_dim(f, params.channels, "key feature")?;
                check_dim(pe, params.channels, "key encoding")?;
                let k: Vec<f64> = f.iter().zip(pe).map(|(a, b)| a + b).collect();
                kl.push(params.key[m].matvec(&k)?);
                vl.push(params.value[m].matvec(f)?);
            }
            kh.push(kl);
            vh.push(vl);
        }
        keys.push(kh);
        values.push(vh);
    }
    Ok(PreparedKeys { keys, values })
}

fn attend_prepared(query: &[f64], prepared: &PreparedKeys, params: &AttentionParams) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.channels];
    for m in 0..params.heads() {
        let a = weights_from_projected(&params.query[m].matvec(query)?, &prepared.keys[m], params.head_dim());
        let mut acc = vec![0.0; params.head_dim()];
        for (al, vl) in a.iter().zip(&prepared.values[m]) {
            for (w, v) in al.iter().zip(vl) {
                for (s, p) in acc.iter_mut().zip(v) {
                    *s += w * p;
                }
            }
        }
        for (o, y) in out.iter_mut().zip(params.out[m].matvec(&acc)?) {
            *o += y;
        }
    }
    Ok(out)
}

/// Attention output for one query (encoding already added) over explicit keys.
pub fn attend(query: &[f64], levels: &[KeyLevel], params: &AttentionParams) -> Result<Vec<f64>> {
    check_dim(query, params.channels, "query")?;
    attend_prepared(query, &prepare(levels, params)?, params)
}

pub fn msma_forward(queries: &QuerySet, pyramid: &FeaturePyramid, params: &AttentionParams, encoding: &PositionalEncoding) -> Result<Vec<Vec<f64>>> {
    msma_forward_with(queries, pyramid, params, encoding, Execution::default())
}

/// Output features (`N x C`) for every query.
pub fn msma_forward_with(
    queries: &QuerySet,
    pyramid: &FeaturePyramid,
    params: &AttentionParams,
    encoding: &PositionalEncoding,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let c = params.channels;
    if pyramid.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "pyramid has {} channels, attention expects {c}",
            pyramid.channels()
        )));
    }
    let levels = pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(l, map)| Ok(KeyLevel::from_map(map, &encoding.key_table(l, map)?)))
        .collect::<Result<Vec<_>>>()?;
    let prepared = prepare(&levels, params)?;
    let inputs = queries
        .queries
        .iter()
        .zip(&queries.positions)
        .enumerate()
        .map(|(q, (z, &pos))| {
            check_dim(z, c, "query")?;
            let pe = encoding.query_vector(q, pos, c)?;
            Ok(z.iter().zip(pe).map(|(a, b)| a + b).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    exec.map(&inputs, |z| attend_prepared(z, &prepared, params))
        .into_iter()
        .collect()
}
