//! Binary Hamiltonian artifact: `HUHAMILT`, u32 version, u64 n, then the
//! dense matrix as row-major little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hamiltonian_updates::symlin::SymMatrix;

pub const MAGIC: &[u8; 8] = b"HUHAMILT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

pub fn encode(h: &SymMatrix) -> Vec<u8> {
    let n = h.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            out.extend_from_slice(&h.get(i, j).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<SymMatrix> {
    ensure!(bytes.len() >= HEADER_LEN, "artifact truncated: {} bytes", bytes.len());
    ensure!(&bytes[..8] == MAGIC, "not a Hamiltonian artifact (bad magic)");
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        bail!("unsupported artifact version {version}");
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = n.checked_mul(n).and_then(|m| m.checked_mul(8)).context("dimension overflow")?;
    ensure!(bytes.len() - HEADER_LEN == expected, "artifact body has {} bytes, expected {expected}", bytes.len() - HEADER_LEN);
    let mut rows = vec![vec![0.0; n]; n];
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        rows[k / n][k % n] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(SymMatrix::from_rows(&rows)?)
}

pub fn store(h: &SymMatrix, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&encode(h))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SymMatrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let h = SymMatrix::from_upper_fn(5, |i, j| (i as f64 + 0.1) * (j as f64 - 2.3).exp());
        let back = decode(&encode(&h)).unwrap();
        assert_eq!(back.to_rows(), h.to_rows());
    }

    #[test]
    fn header_checked() {
        let mut b = encode(&SymMatrix::identity(2));
        assert_eq!(b.len(), 20 + 32);
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut b = encode(&SymMatrix::identity(2));
        b[8] = 9;
        assert!(decode(&b).is_err());
        let b = encode(&SymMatrix::identity(2));
        assert!(decode(&b[..b.len() - 1]).is_err());
    }
}
