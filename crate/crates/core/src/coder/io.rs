use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{CoderKind, SparseCoder};
use crate::error::Result;
use crate::format::{self, Magic};

const VERSION: u32 = 1;

fn magic(kind: CoderKind) -> &'static Magic {
    match kind {
        CoderKind::Transcoder => b"SRTC",
        CoderKind::Sae => b"SRSA",
    }
}

impl SparseCoder {
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.tensor_names().iter().map(|s| s.to_string()).collect();
        let tensors: Vec<_> = names.into_iter().zip(self.tensors()).collect();
        format::write_atomic(path, |w| {
            format::write_header(w, magic(self.kind), VERSION)?;
            w.write_u32::<LittleEndian>(self.d_model() as u32)?;
            w.write_u32::<LittleEndian>(self.n_latents() as u32)?;
            w.write_u32::<LittleEndian>(self.k as u32)?;
            w.write_u32::<LittleEndian>(self.w_skip.is_some() as u32)?;
            format::write_tensors_named(w, &tensors)
        })
    }

    pub fn load(path: &Path, kind: CoderKind) -> Result<Self> {
        format::read_file(path, magic(kind), |r, version| {
            if version != VERSION {
                return Err(format!("unsupported coder version {version}"));
            }
            let d = format::u32_field(r, "d_model")?;
            let n = format::u32_field(r, "n_latents")?;
            let k = format::u32_field(r, "k")?;
            let skip = format::u32_field(r, "skip flag")? != 0;
            if k > n {
                return Err(format!("k = {k} exceeds n_latents = {n}"));
            }
            let mut names = vec!["w1", "b1", "w2"];
            if skip {
                names.push("w_skip");
            }
            names.push("b2");
            let names: Vec<String> = names.into_iter().map(String::from).collect();
            let mut t = format::read_tensors_named(r, &names)?.into_iter();
            let w1 = t.next().unwrap();
            let b1 = t.next().unwrap();
            let w2 = t.next().unwrap();
            let w_skip = if skip { t.next() } else { None };
            let b2 = t.next().unwrap();
            let shapes_ok = w1.shape() == (n, d)
                && b1.shape() == (1, n)
                && w2.shape() == (d, n)
                && w_skip.as_ref().is_none_or(|m| m.shape() == (d, d))
                && b2.shape() == (1, d);
            if !shapes_ok {
                return Err("tensor shapes disagree with header dims".into());
            }
            Ok(SparseCoder {
                kind,
                k,
                w1,
                b1,
                w2,
                w_skip,
                b2,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn roundtrip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let s = Matrix::from_fn(3, 4, |r, c| (r + c) as f32);
        for kind in [CoderKind::Transcoder, CoderKind::Sae] {
            let c = SparseCoder::init(kind, 8, 2, &s, 1).unwrap();
            let p = dir.path().join("c.bin");
            c.save(&p).unwrap();
            assert_eq!(SparseCoder::load(&p, kind).unwrap(), c);
        }
        let p = dir.path().join("c.bin");
        assert!(SparseCoder::load(&p, CoderKind::Transcoder).is_err());
    }
}
