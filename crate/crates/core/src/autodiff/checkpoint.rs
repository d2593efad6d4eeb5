//! Parameter archive: name -> shape -> little-endian `f64` data, preceded by
//! an opaque UTF-8 header (the model stores its config fingerprint there).
//!
//! Layout:
//! ```text
//! b"MTGNCKPT" | u32 version | u64 header_len | header bytes | u64 n_params
//! repeated: u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! ```

use std::io::{Read, Write};

use super::tensor::{ParamStore, Tensor};
use super::AutodiffError;

const MAGIC: &[u8; 8] = b"MTGNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub params: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &str, params: &ParamStore) -> Result<(), AutodiffError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, p) in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(p.value.len() * 8);
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, AutodiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, AutodiffError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| AutodiffError::Checkpoint(format!("invalid utf-8: {e}")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, AutodiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = read_u64(&mut r)? as usize;
    let header = read_string(&mut r, header_len)?;
    let n = read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { header, params })
}

impl Checkpoint {
    /// Copy stored values into `store`; names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if self.params.len() != store.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("unknown parameter {name:?}")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_weight("a.w", 3, 4, &mut rng).unwrap();
        s.add_zeros("a.b", vec![4]).unwrap();
        s.add("odd", Tensor::row(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();

        let mut first = Vec::new();
        write_checkpoint(&mut first, "{\"d\":3}", &s).unwrap();
        let ck = read_checkpoint(first.as_slice()).unwrap();
        assert_eq!(ck.header, "{\"d\":3}");

        let mut restored = s.clone();
        restored.map_values(|_, t| t.data_mut().iter_mut().for_each(|x| *x = 7.0));
        ck.apply_to(&mut restored).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&mut second, &ck.header, &restored).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = ParamStore::new();
        s.add_zeros("w", vec![2, 2]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", &s).unwrap();
        let mut other = ParamStore::new();
        other.add_zeros("w", vec![3, 2]).unwrap();
        let err = read_checkpoint(buf.as_slice()).unwrap().apply_to(&mut other).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut s = ParamStore::new();
        s.add_zeros("w", vec![8]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", &s).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
