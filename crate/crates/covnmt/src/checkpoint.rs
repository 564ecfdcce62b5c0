//! Deterministic binary checkpoints.
//!
//! Layout: the magic `CVNMT1`, then one record per parameter in lexicographic
//! name order: name length (u32 LE), name bytes, rank (u32 LE), extents
//! (u64 LE each), then the values as little-endian IEEE-754 32-bit floats.
//! Save/load/save round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 6] = b"CVNMT1";

pub fn save<F: Real>(path: &Path, params: &ModelParams<F>) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;

    let mut records: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    params.for_each(|name, t| {
        records.insert(name.to_string(), t.clone());
    });
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in &tensor.data {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "truncated checkpoint record",
            ));
        }
        filled += n;
    }
    Ok(true)
}

/// Raw records of a checkpoint file, name -> tensor.
pub fn read_records<F: Real>(path: &Path) -> Result<BTreeMap<String, Tensor<F>>> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match read_exact_or_eof(&mut r, &mut len4).map_err(io)? {
            false => break,
            true => {}
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::data("checkpoint parameter name is not UTF-8".to_string()))?;
        let mut rank4 = [0u8; 4];
        r.read_exact(&mut rank4).map_err(io)?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8).map_err(io)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v4 = [0u8; 4];
            r.read_exact(&mut v4).map_err(io)?;
            data.push(F::from_f64(f32::from_le_bytes(v4) as f64));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::data(format!(
                "checkpoint has duplicate parameter {name}"
            )));
        }
    }
    Ok(out)
}

/// Load a checkpoint into the structure `dims` demands. A parameter set that
/// does not match the mode (missing or extra coverage blocks) or whose shapes
/// disagree with the dims is a load error.
pub fn load<F: Real>(path: &Path, dims: &ModelDims) -> Result<ModelParams<F>> {
    let mut records = read_records::<F>(path)?;
    // Template with the right shapes for this mode, then fill from records.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(dims.clone(), &mut rng);
    let mut missing = Vec::new();
    params.for_each_mut(|name, tensor| {
        match records.remove(name) {
            Some(loaded) => {
                if loaded.shape == tensor.shape {
                    *tensor = loaded;
                } else {
                    missing.push(format!(
                        "{name}: shape {:?} in file, {:?} expected",
                        loaded.shape, tensor.shape
                    ));
                }
            }
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "checkpoint {} does not match the configured mode/widths: {}",
            path.display(),
            missing.join("; ")
        )));
    }
    if !records.is_empty() {
        let extra: Vec<&str> = records.keys().map(|s| s.as_str()).collect();
        return Err(Error::config(format!(
            "checkpoint {} carries parameters the configured mode does not use: {}",
            path.display(),
            extra.join(", ")
        )));
    }
    Ok(params)
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::CoverageMode;
    use rand_chacha::ChaCha8Rng;

    fn dims(mode: CoverageMode) -> ModelDims {
        ModelDims {
            src_vocab: 5,
            tgt_vocab: 6,
            d_emb: 3,
            d_h: 2,
            d_c: 2,
            mode,
        }
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cvnmt");
        let p2 = dir.path().join("b.cvnmt");
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let params: ModelParams<f32> = ModelParams::init(dims(CoverageMode::Both), &mut rng);
        save(&p1, &params).unwrap();
        let loaded = load::<f32>(&p1, &params.dims).unwrap();
        assert_eq!(loaded, params);
        save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.cvnmt");
        std::fs::write(&path, b"NOTRIGHT").unwrap();
        assert!(read_records::<f32>(&path).is_err());
    }

    #[test]
    fn mode_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gru.cvnmt");
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let params: ModelParams<f32> = ModelParams::init(dims(CoverageMode::Gru), &mut rng);
        save(&path, &params).unwrap();
        // Loading a GRU checkpoint as base fails on the extra block, as both.
        assert!(load::<f32>(&path, &dims(CoverageMode::Base)).is_err());
        assert!(load::<f32>(&path, &dims(CoverageMode::Both)).is_err());
        assert!(load::<f32>(&path, &dims(CoverageMode::Gru)).is_ok());
    }

    #[test]
    fn width_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cvnmt");
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let params: ModelParams<f32> = ModelParams::init(dims(CoverageMode::Base), &mut rng);
        save(&path, &params).unwrap();
        let mut wrong = dims(CoverageMode::Base);
        wrong.d_h = 4;
        assert!(load::<f32>(&path, &wrong).is_err());
    }
}
