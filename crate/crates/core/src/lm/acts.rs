use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::model::ToyLm;
use crate::error::{invalid, Result};
use crate::format::{self, Magic};
use crate::numerics::Matrix;

const MAGIC: &Magic = b"SRAC";
const VERSION: u32 = 1;

/// Rows of one hook point's activations, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub hook: String,
    pub rows: Matrix,
}

impl ActivationDump {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn d_model(&self) -> usize {
        self.rows.cols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, |w| {
            format::write_header(w, MAGIC, VERSION)?;
            format::write_str(w, &self.hook)?;
            w.write_u64::<LittleEndian>(self.rows.rows() as u64)?;
            w.write_u32::<LittleEndian>(self.rows.cols() as u32)?;
            format::write_f32s(w, self.rows.data())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        format::read_file(path, MAGIC, |r, version| {
            if version != VERSION {
                return Err(format!("unsupported activation dump version {version}"));
            }
            let hook = format::read_str(r)?;
            let count = r.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
            let d = format::u32_field(r, "d_model")?;
            if count.saturating_mul(d) > 1 << 31 {
                return Err(format!("implausible dump size {count}x{d}"));
            }
            let data = format::read_f32s(r, count * d)?;
            let rows = Matrix::new(count, d, data).map_err(|e| e.to_string())?;
            Ok(ActivationDump { hook, rows })
        })
    }
}

/// The three hook points gathered over the same token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct HookDumps {
    pub mlp_in: ActivationDump,
    pub mlp_out: ActivationDump,
    pub resid: ActivationDump,
}

/// Runs every sequence through the model and stacks the hook-layer
/// activations of every position, sequence-major.
pub fn dump_activations(model: &ToyLm, sequences: &[&[u32]]) -> Result<HookDumps> {
    if sequences.is_empty() {
        return Err(invalid("no sequences to dump"));
    }
    let d = model.config.d_model;
    let total: usize = sequences.iter().map(|s| s.len()).sum();
    let mut mlp_in = Vec::with_capacity(total * d);
    let mut mlp_out = Vec::with_capacity(total * d);
    let mut resid = Vec::with_capacity(total * d);
    for s in sequences {
        let run = model.run_with_hooks(s)?;
        mlp_in.extend_from_slice(run.mlp_in.data());
        mlp_out.extend_from_slice(run.mlp_out.data());
        resid.extend_from_slice(run.resid.data());
    }
    let mk = |hook: &str, data| -> Result<ActivationDump> {
        Ok(ActivationDump {
            hook: hook.to_string(),
            rows: Matrix::new(total, d, data)?,
        })
    };
    Ok(HookDumps {
        mlp_in: mk("mlp_in", mlp_in)?,
        mlp_out: mk("mlp_out", mlp_out)?,
        resid: mk("resid", resid)?,
    })
}
