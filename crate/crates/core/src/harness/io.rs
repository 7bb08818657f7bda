//! File formats. Trajectories and models use little-endian binary layouts
//! with magic headers; tabulated results go to CSV with a header row and
//! shortest-roundtrip 64-bit numerics; provenance goes to JSON. Writers
//! are deterministic: the same inputs produce byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::assimilation::{CycleRecord, OuterLoopInfo};
use crate::error::{Error, Result};
use crate::l96::Trajectory;
use crate::linalg::Csr;
use crate::localization::{PatchLayout, PatchedReservoir};
use crate::reservoir::{MacroParams, ReservoirModel};

const TRAJ_MAGIC: &[u8; 8] = b"RNDTRJ1\n";
const MODEL_MAGIC: &[u8; 8] = b"RNDMDL1\n";
const PATCH_MAGIC: &[u8; 8] = b"RNDPAT1\n";

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64_slice(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for &v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r_f64(r)?);
    }
    Ok(out)
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&b),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    Ok(())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w_u32(&mut w, traj.dim() as u32)?;
    w_u64(&mut w, traj.len() as u64)?;
    w_f64(&mut w, traj.dt)?;
    w_f64(&mut w, traj.t0)?;
    w_f64_slice(&mut w, traj.states.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, TRAJ_MAGIC, path)?;
    let dim = r_u32(&mut r)? as usize;
    let len = r_u64(&mut r)? as usize;
    let dt = r_f64(&mut r)?;
    let t0 = r_f64(&mut r)?;
    if dim == 0 || len == 0 || dim.saturating_mul(len) > (1 << 33) {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("implausible trajectory shape {dim}x{len}"),
        });
    }
    let data = r_f64_vec(&mut r, dim * len)?;
    Trajectory::new(DMatrix::from_vec(dim, len, data), dt, t0)
}

fn write_model_into(w: &mut impl Write, model: &ReservoirModel) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w_u32(w, model.hidden_dim() as u32)?;
    w_u32(w, model.input_dim() as u32)?;
    let p = model.macro_params();
    w_f64(w, p.rho)?;
    w_f64(w, p.sigma_in)?;
    w_f64(w, p.leak)?;
    w_f64(w, p.tikhonov)?;
    let w_res = model.w_res();
    w_u64(w, w_res.nnz() as u64)?;
    for (r, c, v) in w_res.iter_triplets() {
        w_u32(w, r)?;
        w_u32(w, c)?;
        w_f64(w, v)?;
    }
    w_f64_slice(w, model.w_in().as_slice())?;
    match model.w_out() {
        Ok(w_out) => {
            w.write_all(&[1u8])?;
            w_u32(w, w_out.nrows() as u32)?;
            w_f64_slice(w, w_out.as_slice())?;
        }
        Err(_) => w.write_all(&[0u8])?,
    }
    Ok(())
}

fn read_model_from(r: &mut impl Read, path: &Path) -> Result<ReservoirModel> {
    expect_magic(r, MODEL_MAGIC, path)?;
    let n = r_u32(r)? as usize;
    let d_in = r_u32(r)? as usize;
    let params = MacroParams {
        rho: r_f64(r)?,
        sigma_in: r_f64(r)?,
        leak: r_f64(r)?,
        tikhonov: r_f64(r)?,
    };
    let nnz = r_u64(r)? as usize;
    if n == 0 || d_in == 0 || nnz > n.saturating_mul(n) {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("implausible model header n={n}, d_in={d_in}, nnz={nnz}"),
        });
    }
    let mut triplets = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let row = r_u32(r)?;
        let col = r_u32(r)?;
        let val = r_f64(r)?;
        triplets.push((row, col, val));
    }
    let w_res = Csr::from_triplets(n, n, &triplets)?;
    let w_in = DMatrix::from_vec(n, d_in, r_f64_vec(r, n * d_in)?);
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let w_out = match flag[0] {
        0 => None,
        1 => {
            let d_out = r_u32(r)? as usize;
            Some(DMatrix::from_vec(d_out, n, r_f64_vec(r, d_out * n)?))
        }
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("bad readout flag {other}"),
            })
        }
    };
    ReservoirModel::from_parts(w_res, w_in, w_out, params)
}

pub fn save_model(path: &Path, model: &ReservoirModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_into(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ReservoirModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_model_from(&mut r, path)
}

pub fn save_patched(path: &Path, patched: &PatchedReservoir) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PATCH_MAGIC)?;
    let layout = patched.layout();
    w_u32(&mut w, layout.system_dim() as u32)?;
    w_u32(&mut w, layout.patch_size() as u32)?;
    w_u32(&mut w, layout.halo() as u32)?;
    w_u32(&mut w, layout.n_patches() as u32)?;
    for model in patched.patches() {
        write_model_into(&mut w, model)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_patched(path: &Path) -> Result<PatchedReservoir> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, PATCH_MAGIC, path)?;
    let system_dim = r_u32(&mut r)? as usize;
    let patch_size = r_u32(&mut r)? as usize;
    let halo = r_u32(&mut r)? as usize;
    let n_patches = r_u32(&mut r)? as usize;
    let layout = PatchLayout::new(system_dim, patch_size, halo)?;
    if n_patches != layout.n_patches() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "{n_patches} stored patches but the layout has {}",
                layout.n_patches()
            ),
        });
    }
    let mut patches = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        patches.push(read_model_from(&mut r, path)?);
    }
    PatchedReservoir::new(layout, patches)
}

#[derive(Serialize)]
struct CycleRow {
    cycle: usize,
    time: f64,
    bg_nrmse_obs: f64,
    bg_nrmse_unobs: f64,
    bg_nrmse_all: f64,
    an_nrmse_obs: f64,
    an_nrmse_unobs: f64,
    an_nrmse_all: f64,
    an_rmse_all: f64,
    spread: f64,
    innov_mean: f64,
    innov_var: f64,
}

pub fn write_cycles_csv(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (cycle, r) in records.iter().enumerate() {
        w.serialize(CycleRow {
            cycle,
            time: r.time,
            bg_nrmse_obs: r.bg_nrmse_obs,
            bg_nrmse_unobs: r.bg_nrmse_unobs,
            bg_nrmse_all: r.bg_nrmse_all,
            an_nrmse_obs: r.an_nrmse_obs,
            an_nrmse_unobs: r.an_nrmse_unobs,
            an_nrmse_all: r.an_nrmse_all,
            an_rmse_all: r.an_rmse_all,
            spread: r.spread,
            innov_mean: r.innov_mean,
            innov_var: r.innov_var,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct VarTraceRow {
    cycle: usize,
    outer: usize,
    cost: f64,
    inner_iterations: usize,
    converged: bool,
    grad_ratio: f64,
}

pub fn write_var_trace_csv(path: &Path, trace: &[Vec<OuterLoopInfo>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (cycle, outers) in trace.iter().enumerate() {
        for (outer, info) in outers.iter().enumerate() {
            w.serialize(VarTraceRow {
                cycle,
                outer,
                cost: info.cost,
                inner_iterations: info.inner_iterations,
                converged: info.converged,
                grad_ratio: info.grad_ratio,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic row sink for evaluation and sweep tables.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            path: String::new(),
            detail: format!("csv: {other:?}"),
        },
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("json: {e}"),
    })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
