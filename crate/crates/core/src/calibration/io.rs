//! `SRQM` calibration files.
//!
//! Layout after the header: `n_latents: u32`, `resolution: u32` (0 for
//! lossless), `count: u32`, then per map `latent: u32`, `estimator: u32`,
//! `zero_fraction: f64` and two grids (predicted, true), each stored as
//! `n: u64, steps: u32` followed by `steps` pairs of `value: f64, count: u64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CalibrationSet, Estimator, QuantileMap};
use crate::error::Result;
use crate::format;
use crate::numerics::Ecdf;

const MAGIC: &format::Magic = b"SRQM";
const VERSION: u32 = 1;

fn write_grid(w: &mut dyn Write, e: &Ecdf) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(e.len())?;
    w.write_u32::<LittleEndian>(e.distinct().len() as u32)?;
    let mut prev = 0;
    for (v, &c) in e.distinct().iter().zip(e.cum_counts()) {
        w.write_f64::<LittleEndian>(*v)?;
        w.write_u64::<LittleEndian>(c - prev)?;
        prev = c;
    }
    Ok(())
}

fn read_grid(r: &mut dyn Read) -> std::result::Result<Ecdf, String> {
    let err = |e: std::io::Error| format!("reading grid: {e}");
    let n = r.read_u64::<LittleEndian>().map_err(err)?;
    let steps = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    if steps == 0 || steps > 1 << 26 {
        return Err(format!("implausible grid size {steps}"));
    }
    let mut pairs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let v = r.read_f64::<LittleEndian>().map_err(err)?;
        let c = r.read_u64::<LittleEndian>().map_err(err)?;
        pairs.push((v, c));
    }
    let e = Ecdf::from_counts(&pairs).map_err(|e| e.to_string())?;
    if e.len() != n {
        return Err(format!("grid counts sum to {}, header says {n}", e.len()));
    }
    Ok(e)
}

/// Writes `set`, coarsening every grid to `resolution` steps when given.
pub fn save_calibration(
    path: &Path,
    set: &CalibrationSet,
    resolution: Option<usize>,
) -> Result<()> {
    let set = match resolution {
        Some(r) => set.compressed(r),
        None => set.clone(),
    };
    format::write_atomic(path, |w| {
        format::write_header(w, MAGIC, VERSION)?;
        w.write_u32::<LittleEndian>(set.n_latents as u32)?;
        w.write_u32::<LittleEndian>(resolution.unwrap_or(0) as u32)?;
        w.write_u32::<LittleEndian>(set.maps.len() as u32)?;
        for (&latent, m) in &set.maps {
            w.write_u32::<LittleEndian>(latent)?;
            w.write_u32::<LittleEndian>(m.estimator.code())?;
            w.write_f64::<LittleEndian>(m.zero_fraction)?;
            write_grid(w, &m.pred)?;
            write_grid(w, &m.truth)?;
        }
        Ok(())
    })
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    format::read_file(path, MAGIC, |r, version| {
        if version != VERSION {
            return Err(format!("unsupported calibration version {version}"));
        }
        let n_latents = format::u32_field(r, "latent count")?;
        let _resolution = format::u32_field(r, "resolution")?;
        let count = format::u32_field(r, "map count")?;
        let mut maps = BTreeMap::new();
        for _ in 0..count {
            let latent = format::u32_field(r, "latent id")? as u32;
            if latent as usize >= n_latents {
                return Err(format!("latent {latent} out of range"));
            }
            let code = format::u32_field(r, "estimator")? as u32;
            let estimator =
                Estimator::from_code(code).ok_or_else(|| format!("unknown estimator {code}"))?;
            let zero_fraction = r
                .read_f64::<LittleEndian>()
                .map_err(|e| format!("reading zero fraction: {e}"))?;
            if !(0.0..=1.0).contains(&zero_fraction) {
                return Err(format!("zero fraction {zero_fraction} outside [0, 1]"));
            }
            let pred = read_grid(r)?;
            let truth = read_grid(r)?;
            maps.insert(
                latent,
                QuantileMap {
                    pred,
                    truth,
                    zero_fraction,
                    estimator,
                },
            );
        }
        Ok(CalibrationSet { n_latents, maps })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitMix64;

    fn sample_set() -> CalibrationSet {
        let mut rng = SplitMix64::new(3);
        let mut maps = BTreeMap::new();
        for latent in [1u32, 4, 7] {
            let p: Vec<f64> = (0..300).map(|_| rng.uniform(0.0, 9.0)).collect();
            let t: Vec<f64> = (0..900)
                .map(|_| {
                    if rng.bernoulli(0.8) {
                        0.0
                    } else {
                        rng.uniform(0.0, 2.0)
                    }
                })
                .collect();
            maps.insert(latent, QuantileMap::fit(&p, &t, Estimator::Linear).unwrap());
        }
        maps.insert(2, QuantileMap::constant_zero());
        CalibrationSet { n_latents: 8, maps }
    }

    #[test]
    fn lossless_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.srqm");
        let set = sample_set();
        save_calibration(&p, &set, None).unwrap();
        assert_eq!(load_calibration(&p).unwrap(), set);
    }

    #[test]
    fn compressed_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.srqm");
        let set = sample_set();
        save_calibration(&p, &set, Some(16)).unwrap();
        let back = load_calibration(&p).unwrap();
        assert_eq!(back, set.compressed(16));
        for (k, m) in &back.maps {
            assert_eq!(m.n_true(), set.maps[k].n_true());
            assert!(m.truth().distinct().len() <= 18);
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.srqm");
        save_calibration(&p, &sample_set(), None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let e = load_calibration(&p).unwrap_err().to_string();
        assert!(e.contains("cal.srqm"), "{e}");
    }
}
