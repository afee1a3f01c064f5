//! Raw predictions over a set of dump rows, stored as `SRPR` files.
//!
//! Layout after the header: `n_rows: u32`, `n_latents: u32`, the row ids and
//! latent ids as `u32`s, then `n_rows * n_latents` little-endian `f64`
//! predictions, row-major, with NaN marking a missing prediction.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Ctx, Predictor};
use crate::error::{invalid, Result};
use crate::format;

const MAGIC: &format::Magic = b"SRPR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub rows: Vec<u32>,
    pub latents: Vec<u32>,
    values: Vec<Option<f64>>,
}

impl PredictionTable {
    pub fn collect<'a>(
        pred: &dyn Predictor,
        latents: &[u32],
        rows: &[u32],
        ctx: impl Fn(usize) -> Ctx<'a>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * latents.len());
        for &r in rows {
            let c = ctx(r as usize);
            for &j in latents {
                values.push(pred.predict(j, &c)?);
            }
        }
        Ok(Self {
            rows: rows.to_vec(),
            latents: latents.to_vec(),
            values,
        })
    }

    pub fn get(&self, row_index: usize, latent_index: usize) -> Option<f64> {
        self.values[row_index * self.latents.len() + latent_index]
    }

    /// Non-missing predictions for the latent at `latent_index`, restricted
    /// to row indices in `range`.
    pub fn column(&self, latent_index: usize, range: std::ops::Range<usize>) -> Vec<f64> {
        range.filter_map(|i| self.get(i, latent_index)).collect()
    }

    pub fn missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, |w| {
            format::write_header(w, MAGIC, VERSION)?;
            w.write_u32::<LittleEndian>(self.rows.len() as u32)?;
            w.write_u32::<LittleEndian>(self.latents.len() as u32)?;
            for &r in self.rows.iter().chain(&self.latents) {
                w.write_u32::<LittleEndian>(r)?;
            }
            for v in &self.values {
                w.write_f64::<LittleEndian>(v.unwrap_or(f64::NAN))?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        format::read_file(path, MAGIC, |r, version| {
            if version != VERSION {
                return Err(format!("unsupported prediction table version {version}"));
            }
            let n_rows = format::u32_field(r, "row count")?;
            let n_lat = format::u32_field(r, "latent count")?;
            if n_rows.saturating_mul(n_lat) > 1 << 28 {
                return Err(format!("implausible table size {n_rows}x{n_lat}"));
            }
            let mut ids = vec![0u32; n_rows + n_lat];
            r.read_u32_into::<LittleEndian>(&mut ids)
                .map_err(|e| format!("reading ids: {e}"))?;
            let mut raw = vec![0f64; n_rows * n_lat];
            r.read_f64_into::<LittleEndian>(&mut raw)
                .map_err(|e| format!("reading predictions: {e}"))?;
            let latents = ids.split_off(n_rows);
            Ok(Self {
                rows: ids,
                latents,
                values: raw
                    .into_iter()
                    .map(|v| (!v.is_nan()).then_some(v))
                    .collect(),
            })
        })
    }

    pub fn from_parts(rows: Vec<u32>, latents: Vec<u32>, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != rows.len() * latents.len() {
            return Err(invalid("prediction table shape mismatch"));
        }
        Ok(Self {
            rows,
            latents,
            values,
        })
    }
}
