//! Attention workloads: synthetic generation, needle planting and the HIPW
//! dump format.
//!
//! Query rows form a suffix of the sequence: query row `t` sits at absolute
//! position `seq_len_kv - seq_len_q + t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

/// Q/K/V tensors for every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWorkload {
    num_heads: usize,
    num_layers: usize,
    seq_len_q: usize,
    seq_len_kv: usize,
    head_dim: usize,
    // indexed by layer * num_heads + head
    queries: Vec<DenseMatrix>,
    keys: Vec<DenseMatrix>,
    values: Vec<DenseMatrix>,
}

impl AttentionWorkload {
    /// Assembles a workload from per-(layer, head) matrices ordered layer-major.
    pub fn new(
        num_heads: usize,
        num_layers: usize,
        queries: Vec<DenseMatrix>,
        keys: Vec<DenseMatrix>,
        values: Vec<DenseMatrix>,
    ) -> Result<Self> {
        let slots = num_heads * num_layers;
        if slots == 0 {
            return Err(Error::Config("workload needs at least one layer and head".into()));
        }
        if queries.len() != slots || keys.len() != slots || values.len() != slots {
            return Err(Error::Dimension(format!(
                "expected {slots} matrices per tensor, got q={} k={} v={}",
                queries.len(),
                keys.len(),
                values.len()
            )));
        }
        let (t_q, t_kv, d) = (queries[0].rows(), keys[0].rows(), keys[0].cols());
        if d == 0 || t_kv == 0 {
            return Err(Error::Config("workload needs a positive head_dim and key length".into()));
        }
        if t_q > t_kv {
            return Err(Error::Dimension(format!(
                "query length {t_q} exceeds key length {t_kv}"
            )));
        }
        for (name, mats, rows) in [("query", &queries, t_q), ("key", &keys, t_kv), ("value", &values, t_kv)] {
            for (slot, m) in mats.iter().enumerate() {
                if m.rows() != rows || m.cols() != d {
                    return Err(Error::Dimension(format!(
                        "{name} matrix {slot} is {}x{}, expected {rows}x{d}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(Self {
            num_heads,
            num_layers,
            seq_len_q: t_q,
            seq_len_kv: t_kv,
            head_dim: d,
            queries,
            keys,
            values,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn seq_len_q(&self) -> usize {
        self.seq_len_q
    }

    pub fn seq_len_kv(&self) -> usize {
        self.seq_len_kv
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Absolute position of query row 0.
    pub fn query_offset(&self) -> usize {
        self.seq_len_kv - self.seq_len_q
    }

    fn slot(&self, layer: usize, head: usize) -> usize {
        assert!(layer < self.num_layers && head < self.num_heads, "layer/head out of range");
        layer * self.num_heads + head
    }

    pub fn queries(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.queries[self.slot(layer, head)]
    }

    pub fn keys(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.keys[self.slot(layer, head)]
    }

    pub fn values(&self, layer: usize, head: usize) -> &DenseMatrix {
        &self.values[self.slot(layer, head)]
    }

    /// Per-head key matrices of one layer.
    pub fn layer_keys(&self, layer: usize) -> &[DenseMatrix] {
        let s = self.slot(layer, 0);
        &self.keys[s..s + self.num_heads]
    }

    pub fn layer_values(&self, layer: usize) -> &[DenseMatrix] {
        let s = self.slot(layer, 0);
        &self.values[s..s + self.num_heads]
    }

    pub fn layer_queries(&self, layer: usize) -> &[DenseMatrix] {
        let s = self.slot(layer, 0);
        &self.queries[s..s + self.num_heads]
    }

    /// Copy of this workload keeping only key/value rows `..kv_len` and the
    /// query rows that fall inside that prefix, the last `q_len` of them.
    pub fn prefix(&self, kv_len: usize, q_len: usize) -> Result<Self> {
        if kv_len > self.seq_len_kv || kv_len == 0 {
            return Err(Error::Range(format!(
                "prefix length {kv_len} outside 1..={}",
                self.seq_len_kv
            )));
        }
        let offset = self.query_offset();
        if q_len > kv_len.saturating_sub(offset) {
            return Err(Error::Range(format!(
                "prefix of {kv_len} tokens does not contain {q_len} query rows (queries start at {offset})"
            )));
        }
        let q_end = kv_len - offset;
        let q_start = q_end - q_len;
        let cut = |m: &DenseMatrix, lo: usize, hi: usize| {
            let d = m.cols();
            DenseMatrix::new(hi - lo, d, m.data()[lo * d..hi * d].to_vec())
        };
        Self::new(
            self.num_heads,
            self.num_layers,
            self.queries.iter().map(|m| cut(m, q_start, q_end)).collect::<Result<_>>()?,
            self.keys.iter().map(|m| cut(m, 0, kv_len)).collect::<Result<_>>()?,
            self.values.iter().map(|m| cut(m, 0, kv_len)).collect::<Result<_>>()?,
        )
    }
}

/// Parameters of the synthetic workload generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_heads: usize,
    pub num_layers: usize,
    pub seq_len_q: usize,
    pub seq_len_kv: usize,
    pub head_dim: usize,
    /// Moving-average window (in tokens) applied to key noise.
    pub locality_scale: f64,
    /// `(token index, strength)` pairs planted in every layer.
    #[serde(default)]
    pub needles: Vec<(usize, f32)>,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0
            || self.num_layers == 0
            || self.seq_len_q == 0
            || self.seq_len_kv == 0
            || self.head_dim == 0
        {
            return Err(Error::Config(format!(
                "all dimensions must be positive (H={}, L={}, T_q={}, T_kv={}, d={})",
                self.num_heads, self.num_layers, self.seq_len_q, self.seq_len_kv, self.head_dim
            )));
        }
        if self.seq_len_q > self.seq_len_kv {
            return Err(Error::Config(format!(
                "T_q={} exceeds T_kv={}",
                self.seq_len_q, self.seq_len_kv
            )));
        }
        if !(self.locality_scale > 0.0) {
            return Err(Error::Config(format!(
                "locality_scale must be positive, got {}",
                self.locality_scale
            )));
        }
        for &(pos, strength) in &self.needles {
            if pos >= self.seq_len_kv {
                return Err(Error::Config(format!(
                    "needle at {pos} outside key length {}",
                    self.seq_len_kv
                )));
            }
            if !(strength.is_finite() && strength >= 0.0) {
                return Err(Error::Config(format!("needle strength {strength} is not valid")));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

/// Centered moving average along the row axis, window clipped at both ends.
fn smooth_rows(noise: &[f64], rows: usize, cols: usize, window: usize) -> Vec<f64> {
    let mut prefix = vec![0.0f64; (rows + 1) * cols];
    for r in 0..rows {
        for c in 0..cols {
            prefix[(r + 1) * cols + c] = prefix[r * cols + c] + noise[r * cols + c];
        }
    }
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let lo = r.saturating_sub(before);
        let hi = (r + after + 1).min(rows);
        let n = (hi - lo) as f64;
        for c in 0..cols {
            out[r * cols + c] = (prefix[hi * cols + c] - prefix[lo * cols + c]) / n;
        }
    }
    out
}

fn keys_from_noise(smoothed: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    let target = (cols as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for row in smoothed.chunks_exact(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { target / norm } else { 0.0 };
        data.extend(row.iter().map(|v| (v * scale) as f32));
    }
    DenseMatrix::new(rows, cols, data)
}

/// Generates a workload whose keys vary smoothly along the sequence.
///
/// Keys are Gaussian noise smoothed by a moving average of width
/// `locality_scale`, then renormalized to norm `sqrt(head_dim)`. Queries and
/// values are independent standard normal rows. The output is a pure function
/// of `config`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<AttentionWorkload> {
    config.validate()?;
    let SyntheticConfig {
        num_heads: h,
        num_layers: l,
        seq_len_q: t_q,
        seq_len_kv: t_kv,
        head_dim: d,
        ..
    } = *config;
    // anything wider than twice the sequence averages every row identically
    let window = config.locality_scale.round().clamp(1.0, (2 * t_kv) as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut queries = Vec::with_capacity(h * l);
    let mut keys = Vec::with_capacity(h * l);
    let mut values = Vec::with_capacity(h * l);
    for _ in 0..h * l {
        let noise = gaussian_matrix(&mut rng, t_kv, d);
        keys.push(keys_from_noise(&smooth_rows(&noise, t_kv, d, window), t_kv, d)?);
        let q = gaussian_matrix(&mut rng, t_q, d);
        queries.push(DenseMatrix::new(t_q, d, q.into_iter().map(|v| v as f32).collect())?);
        let v = gaussian_matrix(&mut rng, t_kv, d);
        values.push(DenseMatrix::new(t_kv, d, v.into_iter().map(|v| v as f32).collect())?);
    }
    let mut workload = AttentionWorkload::new(h, l, queries, keys, values)?;
    for &(pos, strength) in &config.needles {
        for layer in 0..l {
            workload = plant_needle(workload, layer, pos, strength)?;
        }
    }
    Ok(workload)
}

/// Replaces the key at `position` in every head of `layer` with
/// `strength` times the unit direction of that head's final query.
///
/// With `strength > max_j (q_last . k_j) / |q_last|` the planted key is the
/// unique argmax of the final query's logits.
pub fn plant_needle(
    mut workload: AttentionWorkload,
    layer: usize,
    position: usize,
    strength: f32,
) -> Result<AttentionWorkload> {
    if layer >= workload.num_layers {
        return Err(Error::Range(format!(
            "layer {layer} outside {} layers",
            workload.num_layers
        )));
    }
    if position >= workload.seq_len_kv {
        return Err(Error::Range(format!(
            "needle position {position} outside key length {}",
            workload.seq_len_kv
        )));
    }
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::Config(format!("needle strength {strength} is not valid")));
    }
    let last = workload.seq_len_q - 1;
    for head in 0..workload.num_heads {
        let slot = workload.slot(layer, head);
        let q = workload.queries[slot].row(last).to_vec();
        let norm = dot(&q, &q).sqrt();
        let key = workload.keys[slot].row_mut(position);
        for (k, qv) in key.iter_mut().zip(&q) {
            *k = if norm > 0.0 { strength * qv / norm } else { 0.0 };
        }
    }
    Ok(workload)
}

const MAGIC: &[u8; 4] = b"HIPW";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 8;

/// Serializes `workload` in the HIPW format.
///
/// Layout (little-endian): magic `HIPW`, version `u32`, then `H, L, T_q,
/// T_kv, d` as `u64`, then for each layer and head the Q, K and V payloads as
/// row-major `f32`, then a CRC-32 of the payload bytes.
pub fn encode_dump(workload: &AttentionWorkload) -> Vec<u8> {
    let payload_floats: usize = workload.queries.iter().map(|m| m.data().len()).sum::<usize>()
        + 2 * workload.keys.iter().map(|m| m.data().len()).sum::<usize>();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_floats * 4 + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [
        workload.num_heads,
        workload.num_layers,
        workload.seq_len_q,
        workload.seq_len_kv,
        workload.head_dim,
    ] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for slot in 0..workload.queries.len() {
        for m in [&workload.queries[slot], &workload.keys[slot], &workload.values[slot]] {
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// CRC-32 of the payload section of an encoded dump.
pub fn dump_checksum(bytes: &[u8]) -> Option<u32> {
    let tail = bytes.len().checked_sub(4)?;
    if tail < HEADER_LEN {
        return None;
    }
    Some(u32::from_le_bytes(bytes[tail..].try_into().ok()?))
}

pub fn decode_dump(bytes: &[u8]) -> Result<AttentionWorkload> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("header", "bad magic, expected HIPW"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            "header",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 8 + i * 8;
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        *d = usize::try_from(v).map_err(|_| Error::format("header", "dimension overflows usize"))?;
    }
    let [h, l, t_q, t_kv, d] = dims;
    let per_slot = t_q
        .checked_add(t_kv.checked_mul(2).ok_or_else(|| Error::format("header", "dimension overflow"))?)
        .and_then(|rows| rows.checked_mul(d))
        .ok_or_else(|| Error::format("header", "dimension overflow"))?;
    let payload_len = per_slot
        .checked_mul(h)
        .and_then(|n| n.checked_mul(l))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("header", "dimension overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload_len {
        return Err(Error::format(
            "payload",
            format!("truncated payload: {} of {payload_len} bytes", body.len()),
        ));
    }
    if body.len() < payload_len + 4 {
        return Err(Error::format("checksum", "truncated checksum"));
    }
    if body.len() > payload_len + 4 {
        return Err(Error::format(
            "checksum",
            format!("{} trailing bytes after checksum", body.len() - payload_len - 4),
        ));
    }
    let payload = &body[..payload_len];
    let stored = u32::from_le_bytes(body[payload_len..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(
            "checksum",
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut take = |rows: usize, section: &str| -> Result<DenseMatrix> {
        let data: Vec<f32> = floats.by_ref().take(rows * d).collect();
        DenseMatrix::new(rows, d, data).map_err(|e| Error::format(section, e.to_string()))
    };
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..h * l {
        qs.push(take(t_q, "payload.queries")?);
        ks.push(take(t_kv, "payload.keys")?);
        vs.push(take(t_kv, "payload.values")?);
    }
    AttentionWorkload::new(h, l, qs, ks, vs).map_err(|e| Error::format("header", e.to_string()))
}

pub fn save_dump(workload: &AttentionWorkload, path: &Path) -> Result<u32> {
    let bytes = encode_dump(workload);
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    Ok(dump_checksum(&bytes).expect("encoded dump always carries a checksum"))
}

pub fn load_dump(path: &Path) -> Result<AttentionWorkload> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    decode_dump(&bytes)
}
