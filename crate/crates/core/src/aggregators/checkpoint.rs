//! Aggregator checkpoint layout, all little-endian:
//!
//! ```text
//! magic "MILA1\0"
//! u8  kind tag (0 max, 1 topk, 2 attention, 3 attention-instance, 4 ds_mil, 5 transformer)
//! u32 dim, u32 attention_dim, u32 heads, u32 layers
//! f64 topk_ratio, f64 stream_weight
//! u32 block count
//! per block: u32 rows, u32 cols, rows·cols f64 row-major
//! ```

use super::{AggKind, AggregatorModel, ModelSpec};
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::numcore::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MILA1\0";

impl AggregatorModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(s.kind.tag());
        for v in [s.dim, s.attention_dim, s.heads, s.layers] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.topk_ratio.to_le_bytes());
        out.extend_from_slice(&s.stream_weight.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let kind = AggKind::from_tag(r.u8()?).ok_or_else(|| Error::Format {
            offset: at,
            msg: "unknown aggregator kind tag".into(),
        })?;
        let dim = r.u32()? as usize;
        let attention_dim = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let topk_ratio = r.f64()?;
        let stream_weight = r.f64()?;
        let spec = ModelSpec {
            kind,
            dim,
            attention_dim,
            topk_ratio,
            stream_weight,
            heads,
            layers,
        };
        spec.validate().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        let shapes = spec.shapes();
        let at = r.offset();
        let n = r.u32()? as usize;
        if n != shapes.len() {
            return Err(Error::Format {
                offset: at,
                msg: format!("expected {} blocks, found {n}", shapes.len()),
            });
        }
        let mut params = Vec::with_capacity(n);
        for &(rows, cols) in &shapes {
            let at = r.offset();
            let (br, bc) = (r.u32()? as usize, r.u32()? as usize);
            if (br, bc) != (rows, cols) {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("block {br}x{bc}, expected {rows}x{cols}"),
                });
            }
            let data = r.f64s(rows * cols)?;
            params.push(Matrix::new(rows, cols, data).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?);
        }
        r.finish()?;
        Ok(Self { spec, params })
    }
}
