//! On-disk cache for nonlocal stencils.
//!
//! Building stencils for every (node, control) pair dominates setup time on
//! fine grids, and parameter sweeps rebuild identical stencils many times
//! (the jump geometry does not depend on the penalty parameter). The cache
//! stores one file per (model hash, mesh size, truncation radius, control
//! index, time index), holding the stencils of every node in node order.
//!
//! File format, little-endian: the magic bytes `HJBSTEN1`, a u64 stencil
//! count, then per stencil a u64 header (node id, dimension, record count,
//! corner count, linear coefficient count, weight coefficient count) followed
//! by a flat f64 payload (record weights, record pointers, corner shifts,
//! corner weights, linear shifts and weights, weight-operator shifts and
//! weights, drift compensation). Shifts and pointers are encoded as f64.
//!
//! A missing, truncated or mismatched file is treated as a cache miss, never
//! an error: the caller rebuilds and overwrites.

use crate::error::Result;
use crate::levy::NonlocalStencil;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"HJBSTEN1";

/// Identity of one stencil batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StencilKey {
    pub model_hash: u64,
    pub h_bits: u64,
    pub r_bits: u64,
    pub control: u32,
    pub time: u32,
}

impl StencilKey {
    pub fn new(model_hash: u64, h: f64, r: f64, control: u32, time: u32) -> Self {
        Self {
            model_hash,
            h_bits: h.to_bits(),
            r_bits: r.to_bits(),
            control,
            time,
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "stencil-{:016x}-{:016x}-{:016x}-c{}-t{}.bin",
            self.model_hash, self.h_bits, self.r_bits, self.control, self.time
        )
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }
}

/// Write a stencil batch atomically (temp file plus rename).
pub fn save(dir: &Path, key: &StencilKey, stencils: &[NonlocalStencil]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let final_path = key.path_in(dir);
    let tmp_path = final_path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp_path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(stencils.len() as u64).to_le_bytes())?;
        for (node, st) in stencils.iter().enumerate() {
            let (dim, wg, ptr, cs, cw, ks, kw, bs, bw, drift) = st.parts();
            let header = [
                node as u64,
                dim as u64,
                wg.len() as u64,
                cw.len() as u64,
                kw.len() as u64,
                bw.len() as u64,
            ];
            for v in header {
                w.write_all(&v.to_le_bytes())?;
            }
            let mut put = |x: f64| w.write_all(&x.to_le_bytes());
            for &v in wg {
                put(v)?;
            }
            for &v in ptr {
                put(v as f64)?;
            }
            for &v in cs {
                put(v as f64)?;
            }
            for &v in cw {
                put(v)?;
            }
            for &v in ks {
                put(v as f64)?;
            }
            for &v in kw {
                put(v)?;
            }
            for &v in bs {
                put(v as f64)?;
            }
            for &v in bw {
                put(v)?;
            }
            for &v in drift {
                put(v)?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp_path, &final_path)?;
    Ok(())
}

/// Read a stencil batch. Returns `None` on any miss: absent file, wrong
/// magic, truncation, or inconsistent counts.
pub fn load(dir: &Path, key: &StencilKey) -> Result<Option<Vec<NonlocalStencil>>> {
    let path = key.path_in(dir);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(_) => return Ok(None),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8) != Some(&MAGIC[..]) {
        return Ok(None);
    }
    let count = match cur.u64() {
        Some(c) if c < 1 << 32 => c as usize,
        _ => return Ok(None),
    };
    let mut out = Vec::with_capacity(count);
    for expect_node in 0..count {
        let header: Option<Vec<u64>> = (0..6).map(|_| cur.u64()).collect();
        let header = match header {
            Some(h) => h,
            None => return Ok(None),
        };
        let (node, dim, n_rec, n_corner, n_k, n_b) = (
            header[0], header[1] as usize, header[2] as usize,
            header[3] as usize, header[4] as usize, header[5] as usize,
        );
        if node != expect_node as u64 || dim == 0 || dim > 16 {
            return Ok(None);
        }
        let wg = match cur.f64_vec(n_rec) {
            Some(v) => v,
            None => return Ok(None),
        };
        let ptr_f = match cur.f64_vec(n_rec + 1) {
            Some(v) => v,
            None => return Ok(None),
        };
        let cs_f = match cur.f64_vec(n_corner * dim) {
            Some(v) => v,
            None => return Ok(None),
        };
        let cw = match cur.f64_vec(n_corner) {
            Some(v) => v,
            None => return Ok(None),
        };
        let ks_f = match cur.f64_vec(n_k * dim) {
            Some(v) => v,
            None => return Ok(None),
        };
        let kw = match cur.f64_vec(n_k) {
            Some(v) => v,
            None => return Ok(None),
        };
        let bs_f = match cur.f64_vec(n_b * dim) {
            Some(v) => v,
            None => return Ok(None),
        };
        let bw = match cur.f64_vec(n_b) {
            Some(v) => v,
            None => return Ok(None),
        };
        let drift = match cur.f64_vec(dim) {
            Some(v) => v,
            None => return Ok(None),
        };
        let ptr: Vec<u32> = ptr_f.iter().map(|&v| v as u32).collect();
        if ptr.first() != Some(&0) || ptr.last().copied() != Some(cw.len() as u32) {
            return Ok(None);
        }
        let to_i32 = |v: &[f64]| v.iter().map(|&x| x as i32).collect::<Vec<i32>>();
        out.push(NonlocalStencil::from_parts(
            dim,
            wg,
            ptr,
            to_i32(&cs_f),
            cw,
            to_i32(&ks_f),
            kw,
            to_i32(&bs_f),
            bw,
            drift,
        ));
    }
    if cur.pos != bytes.len() {
        return Ok(None);
    }
    Ok(Some(out))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Option<Vec<f64>> {
        if self.pos + 8 * n > self.bytes.len() {
            return None;
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
