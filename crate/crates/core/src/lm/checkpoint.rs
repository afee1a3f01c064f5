use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::model::{LmConfig, ToyLm};
use crate::error::Result;
use crate::format::{self, Magic};

const MAGIC: &Magic = b"SRLM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LmCheckpoint {
    pub model: ToyLm,
    pub tokens_seen: u64,
    /// Mean next-token CE on the held-out eval set, nats/token.
    pub ce_on_eval: f64,
}

fn config_fields(c: &LmConfig) -> [usize; 7] {
    [
        c.vocab_size,
        c.layers,
        c.d_model,
        c.d_mlp,
        c.heads,
        c.seq_len,
        c.hook_layer,
    ]
}

fn read_config(r: &mut dyn Read) -> std::result::Result<LmConfig, String> {
    let mut f = [0usize; 7];
    for (i, slot) in f.iter_mut().enumerate() {
        *slot = format::u32_field(r, &format!("config field {i}"))?;
    }
    let c = LmConfig {
        vocab_size: f[0],
        layers: f[1],
        d_model: f[2],
        d_mlp: f[3],
        heads: f[4],
        seq_len: f[5],
        hook_layer: f[6],
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

impl LmCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let names = ToyLm::<f32>::tensor_names(&self.model.config);
        let tensors: Vec<_> = names.into_iter().zip(self.model.tensors()).collect();
        format::write_atomic(path, |w| {
            format::write_header(w, MAGIC, VERSION)?;
            for v in config_fields(&self.model.config) {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
            w.write_u64::<LittleEndian>(self.tokens_seen)?;
            w.write_f64::<LittleEndian>(self.ce_on_eval)?;
            format::write_tensors_named(w, &tensors)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        format::read_file(path, MAGIC, |r, version| {
            if version != VERSION {
                return Err(format!("unsupported checkpoint version {version}"));
            }
            let config = read_config(r)?;
            let tokens_seen = r.read_u64::<LittleEndian>().map_err(|e| e.to_string())?;
            let ce_on_eval = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
            let tensors = format::read_tensors_named(r, &ToyLm::<f32>::tensor_names(&config))?;
            let model = ToyLm::from_tensors(config, tensors).map_err(|e| e.to_string())?;
            if !model.tensors().iter().all(|t| t.is_finite()) {
                return Err("non-finite weights".into());
            }
            Ok(LmCheckpoint {
                model,
                tokens_seen,
                ce_on_eval,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn roundtrip_and_corruption() {
        let cfg = LmConfig {
            vocab_size: 9,
            layers: 2,
            d_model: 8,
            d_mlp: 12,
            heads: 2,
            seq_len: 5,
            hook_layer: 1,
        };
        let ck = LmCheckpoint {
            model: ToyLm::init(cfg, 4).unwrap(),
            tokens_seen: 1234,
            ce_on_eval: 2.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.bin");
        ck.save(&p).unwrap();
        assert_eq!(LmCheckpoint::load(&p).unwrap(), ck);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(LmCheckpoint::load(&p), Err(Error::Format { .. })));
    }
}
