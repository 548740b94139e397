//! Binary threshold store (`TPTH`).
//!
//! All integers and floats are little-endian. Thresholds are stored as
//! IEEE half floats, rounded to nearest when written; everything else keeps
//! enough precision to reload the table exactly. See `docs/threshold-store.md`
//! for the byte layout.

use std::path::Path;

use half::f16;

use crate::attention::ModelGeometry;
use crate::calibration::{HeadThresholds, KPolicy, ThresholdMode, ThresholdTable};
use crate::error::{Error, Result};
use crate::mkc::{MultiKRow, MultiKThresholds};

pub const MAGIC: [u8; 4] = *b"TPTH";
pub const VERSION: u16 = 1;

const FLAG_E_TILDE: u8 = 1;
const FLAG_MULTI_K: u8 = 1 << 1;

/// A threshold table plus, optionally, the multi-k thresholds it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdStore {
    pub table: ThresholdTable,
    pub multi_k: Option<MultiKThresholds>,
}

/// Byte length of every section of an encoded store, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreLayout {
    pub header: usize,
    pub index: usize,
    pub thetas: usize,
    pub e_tilde: usize,
    pub multi_k: usize,
}

impl StoreLayout {
    pub fn theta_offset(&self) -> usize {
        self.header + self.index
    }

    pub fn total(&self) -> usize {
        self.header + self.index + self.thetas + self.e_tilde + self.multi_k
    }
}

/// Round a threshold to the nearest half float, failing if it does not fit.
pub fn quantize_theta(theta: f64) -> Result<f64> {
    let q = f16::from_f64(theta);
    if !q.is_finite() {
        return Err(Error::Store(format!("threshold {theta} is not representable as f16")));
    }
    Ok(q.to_f64())
}

fn mode_byte(mode: ThresholdMode) -> u8 {
    match mode {
        ThresholdMode::PreSoftmax => 0,
        ThresholdMode::PostSoftmax => 1,
    }
}

fn u32_of(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Store(format!("{what} {value} does not fit in u32")))
}

fn put_f16(out: &mut Vec<u8>, theta: f64) -> Result<()> {
    let q = f16::from_f64(theta);
    if !q.is_finite() {
        return Err(Error::Store(format!("threshold {theta} is not representable as f16")));
    }
    out.extend_from_slice(&q.to_le_bytes());
    Ok(())
}

impl ThresholdStore {
    pub fn new(table: ThresholdTable) -> Self {
        Self { table, multi_k: None }
    }

    pub fn encode(&self) -> Result<(Vec<u8>, StoreLayout)> {
        let t = &self.table;
        let g = t.geometry;
        if t.heads.len() != g.num_layers * g.num_heads {
            return Err(Error::Store("head count does not match the geometry".into()));
        }
        if t.k_policy.0.len() != g.num_layers {
            return Err(Error::Store("k policy does not match the layer count".into()));
        }
        let with_e = t.has_e_tilde();
        if let Some(m) = &self.multi_k {
            if m.geometry != g || m.mode != t.mode {
                return Err(Error::Store("multi-k section disagrees with the table".into()));
            }
        }
        let mut layout = StoreLayout::default();
        let mut out = Vec::new();

        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(mode_byte(t.mode));
        let mut flags = 0;
        if with_e {
            flags |= FLAG_E_TILDE;
        }
        if self.multi_k.is_some() {
            flags |= FLAG_MULTI_K;
        }
        out.push(flags);
        for dim in [g.num_layers, g.num_heads, g.head_dim, g.hidden_dim, g.gqa_group_size] {
            out.extend_from_slice(&u32_of(dim, "geometry field")?.to_le_bytes());
        }
        out.extend_from_slice(&t.alpha.to_le_bytes());
        for &k in &t.k_policy.0 {
            out.extend_from_slice(&u32_of(k, "k")?.to_le_bytes());
        }
        layout.header = out.len();

        for h in &t.heads {
            if h.thetas.len() != h.row_ids.len() {
                return Err(Error::Store("row ids and thresholds differ in length".into()));
            }
            if !h.row_ids.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Store("row ids must be strictly increasing".into()));
            }
            out.extend_from_slice(&u32_of(h.len(), "row count")?.to_le_bytes());
        }
        for h in &t.heads {
            for &r in &h.row_ids {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
        layout.index = out.len() - layout.header;

        for h in &t.heads {
            for &theta in &h.thetas {
                put_f16(&mut out, theta)?;
            }
        }
        layout.thetas = out.len() - layout.theta_offset();

        if with_e {
            let start = out.len();
            for h in &t.heads {
                let e = match &h.e_tilde {
                    Some(e) if e.len() == h.len() => e.as_slice(),
                    None if h.is_empty() => &[],
                    _ => return Err(Error::Store("every non-empty head needs an e_tilde per row".into())),
                };
                for &v in e {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            layout.e_tilde = out.len() - start;
        }

        if let Some(m) = &self.multi_k {
            let start = out.len();
            for rows in &m.heads {
                out.extend_from_slice(&u32_of(rows.len(), "row count")?.to_le_bytes());
                for row in rows {
                    out.extend_from_slice(&row.row_id.to_le_bytes());
                    out.extend_from_slice(&row.k_first.to_le_bytes());
                    out.extend_from_slice(&u32_of(row.thetas.len(), "k count")?.to_le_bytes());
                    for &theta in &row.thetas {
                        put_f16(&mut out, theta)?;
                    }
                }
            }
            layout.multi_k = out.len() - start;
        }
        Ok((out, layout))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Store("not a threshold store (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Store(format!("unsupported store version {version}")));
        }
        let mode = match r.u8()? {
            0 => ThresholdMode::PreSoftmax,
            1 => ThresholdMode::PostSoftmax,
            other => return Err(Error::Store(format!("unknown mode byte {other}"))),
        };
        let flags = r.u8()?;
        if flags & !(FLAG_E_TILDE | FLAG_MULTI_K) != 0 {
            return Err(Error::Store(format!("unknown flags {flags:#x}")));
        }
        let geometry = ModelGeometry {
            num_layers: r.u32()? as usize,
            num_heads: r.u32()? as usize,
            head_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            gqa_group_size: r.u32()? as usize,
        };
        geometry.validate().map_err(|e| Error::Store(format!("bad geometry: {e}")))?;
        let alpha = r.f64()?;
        let k_policy = KPolicy((0..geometry.num_layers).map(|_| r.u32().map(|k| k as usize)).collect::<Result<_>>()?);

        let n_heads = geometry.num_layers * geometry.num_heads;
        let counts = (0..n_heads).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let mut table = ThresholdTable::empty(mode, geometry, alpha, k_policy);
        for (h, &c) in table.heads.iter_mut().zip(&counts) {
            h.row_ids = (0..c).map(|_| r.u32()).collect::<Result<_>>()?;
            if !h.row_ids.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Store("row ids are not strictly increasing".into()));
            }
        }
        for h in &mut table.heads {
            h.thetas = (0..h.row_ids.len()).map(|_| r.f16()).collect::<Result<_>>()?;
        }
        if flags & FLAG_E_TILDE != 0 {
            for h in &mut table.heads {
                h.e_tilde = Some((0..h.row_ids.len()).map(|_| r.f32()).collect::<Result<_>>()?);
            }
        }
        let multi_k = if flags & FLAG_MULTI_K != 0 {
            let mut heads = Vec::with_capacity(n_heads);
            for _ in 0..n_heads {
                let rows = r.u32()? as usize;
                let mut out = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let row_id = r.u32()?;
                    let k_first = r.u32()?;
                    let n = r.u32()? as usize;
                    let thetas = (0..n).map(|_| r.f16()).collect::<Result<_>>()?;
                    out.push(MultiKRow { row_id, k_first, thetas });
                }
                heads.push(out);
            }
            Some(MultiKThresholds { mode, geometry, heads })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Store(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { table, multi_k })
    }

    pub fn save(&self, path: &Path) -> Result<StoreLayout> {
        let (bytes, layout) = self.encode()?;
        std::fs::write(path, bytes)?;
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// The table with every threshold rounded as it would be stored.
    pub fn quantized(&self) -> Result<Self> {
        let mut out = self.clone();
        let with_e = out.table.has_e_tilde();
        for h in &mut out.table.heads {
            quantize_head(h)?;
            if with_e && h.e_tilde.is_none() {
                h.e_tilde = Some(Vec::new());
            }
        }
        if let Some(m) = &mut out.multi_k {
            for row in m.heads.iter_mut().flatten() {
                for t in &mut row.thetas {
                    *t = quantize_theta(*t)?;
                }
            }
        }
        Ok(out)
    }
}

fn quantize_head(h: &mut HeadThresholds) -> Result<()> {
    for t in &mut h.thetas {
        *t = quantize_theta(*t)?;
    }
    if let Some(e) = &mut h.e_tilde {
        for v in e {
            *v = *v as f32 as f64;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Store(format!("truncated store at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn f16(&mut self) -> Result<f64> {
        self.array().map(|b| f16::from_le_bytes(b).to_f64())
    }

    fn f32(&mut self) -> Result<f64> {
        self.array().map(|b| f32::from_le_bytes(b) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}
