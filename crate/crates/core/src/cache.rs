//! Binary eigenbasis cache.
//!
//! Layout, all little-endian: magic `NSSTAB1`, `u32` version, `u64` nx,
//! `u64` ny, `f64` Lx, `f64` Ly, `u64` M, then `M` eigenvalues and `M`
//! stream functions of `nx·ny` values each (row-major, x fastest), then the
//! SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{build_grid, DomainSpec, ScalarField};
use crate::spectral::{assemble_operators, solve_eigenbasis, StokesBasis};

pub const CACHE_MAGIC: &[u8; 7] = b"NSSTAB1";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 7 + 4 + 8 * 5;
const DIGEST_LEN: usize = 32;

/// What a cache lookup did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// The file existed but was rejected and has been rewritten.
    Rebuilt(String),
}

pub fn encode_basis(basis: &StokesBasis) -> Vec<u8> {
    let g = &basis.grid;
    let m = basis.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m * (1 + g.node_count()) + DIGEST_LEN);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.nx() as u64).to_le_bytes());
    out.extend_from_slice(&(g.ny() as u64).to_le_bytes());
    out.extend_from_slice(&g.spec.lx.to_le_bytes());
    out.extend_from_slice(&g.spec.ly.to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for t in &basis.tau {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for p in &basis.psi {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        a
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Decodes a cache for `spec` with exactly `m` modes. Any mismatch in the
/// checksum, the header or the requested `(nx, ny, Lx, Ly, M)` is an error.
pub fn decode_basis(bytes: &[u8], spec: &DomainSpec, m: usize, path: &Path) -> Result<StokesBasis> {
    let reject = |reason: String| Error::Cache { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(reject(format!("truncated: {} bytes", bytes.len())));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(reject("checksum mismatch".into()));
    }
    if &payload[..7] != CACHE_MAGIC {
        return Err(reject("bad magic".into()));
    }
    let mut r = Reader { bytes: payload, pos: 7 };
    let version = u32::from_le_bytes(r.take());
    if version != CACHE_VERSION {
        return Err(reject(format!("version {version}, expected {CACHE_VERSION}")));
    }
    let (nx, ny) = (r.u64() as usize, r.u64() as usize);
    let (lx, ly) = (r.f64(), r.f64());
    let stored_m = r.u64() as usize;
    if nx != spec.nx || ny != spec.ny || lx.to_bits() != spec.lx.to_bits() || ly.to_bits() != spec.ly.to_bits() || stored_m != m {
        return Err(reject(format!(
            "stored (nx, ny, Lx, Ly, M) = ({nx}, {ny}, {lx}, {ly}, {stored_m}), requested ({}, {}, {}, {}, {m})",
            spec.nx, spec.ny, spec.lx, spec.ly
        )));
    }
    let nodes = nx * ny;
    let expected = HEADER_LEN + 8 * m * (1 + nodes);
    if payload.len() != expected {
        return Err(reject(format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let grid = build_grid(spec)?;
    let tau: Vec<f64> = (0..m).map(|_| r.f64()).collect();
    let psi = (0..m)
        .map(|_| ScalarField::from_values(&grid, (0..nodes).map(|_| r.f64()).collect()))
        .collect::<Result<Vec<_>>>()?;
    StokesBasis::from_stored(grid, tau, psi)
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial cache.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(format!(".tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache(path: &Path, spec: &DomainSpec, m: usize) -> Result<StokesBasis> {
    let bytes = fs::read(path).map_err(|e| Error::Cache { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_basis(&bytes, spec, m, path)
}

/// Loads the basis from `path`, solving and (re)writing the cache when it
/// is absent or rejected.
pub fn load_or_solve(path: &Path, spec: &DomainSpec, m: usize) -> Result<(StokesBasis, CacheOutcome)> {
    let outcome = if path.exists() {
        match read_cache(path, spec, m) {
            Ok(b) => {
                log::info!("basis cache hit: {}", path.display());
                return Ok((b, CacheOutcome::Hit));
            }
            Err(e) => {
                log::warn!("basis cache rejected, rebuilding: {e}");
                CacheOutcome::Rebuilt(e.to_string())
            }
        }
    } else {
        log::info!("basis cache miss: {}", path.display());
        CacheOutcome::Miss
    };
    let grid = build_grid(spec)?;
    let basis = solve_eigenbasis(&assemble_operators(&grid), &grid, m)?;
    write_atomic(path, &encode_basis(&basis))?;
    Ok((basis, outcome))
}
