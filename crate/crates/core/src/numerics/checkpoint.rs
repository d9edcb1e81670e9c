//! Named-tensor checkpoint container.
//!
//! Layout:
//!
//! ```text
//! ccycle-ckpt v1 <count>\n
//! <name> <d0>x<d1>...\n      (one line per tensor, name order)
//! end\n
//! <payload: every tensor's values as little-endian f64, header order>
//! ```

use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "ccycle-ckpt v1";

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut header = format!("{MAGIC} {}\n", params.len());
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))?;
        *pos += nl + 1;
        Ok(line.to_string())
    };

    let first = next_line(&mut pos)?;
    let count: usize = first
        .strip_prefix(MAGIC)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("bad magic line"))?;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let (name, dims) = line.rsplit_once(' ').ok_or_else(|| bad("bad entry line"))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        entries.push((name.to_string(), shape));
    }
    if next_line(&mut pos)? != "end" {
        return Err(bad("missing end marker"));
    }

    let mut params = ParamSet::new();
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        pos += 8 * n;
        params.insert(name, Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_roundtrip_bit_exact(
            vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            split in 1usize..5,
        ) {
            let mut p = ParamSet::new();
            let cut = split.min(vals.len());
            p.insert("layer.w", Tensor::new(vec![cut], vals[..cut].to_vec()).unwrap());
            p.insert("b", Tensor::new(vec![1, vals.len() - cut], vals[cut..].to_vec()).unwrap());
            let back = from_bytes(&to_bytes(&p)).unwrap();
            prop_assert_eq!(to_bytes(&back), to_bytes(&p));
            for (a, b) in back.iter().zip(p.iter()) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a.1), bits(b.1));
            }
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let bytes = to_bytes(&p);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"garbage\n").is_err());
    }
}
