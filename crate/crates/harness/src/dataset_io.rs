//! Dataset files (`SDPD`): a metadata text block naming the environment
//! and seed, then every trajectory as 32-bit floats.

use std::path::Path;

use scaledp_core::envs::{DemoDataset, EnvKind, Mode, Trajectory, ACTION_DIM, OBS_DIM, PROPRIO_DIM};

use crate::codec::{len_u32, read_file, write_file, Reader, Writer};
use crate::error::{HarnessError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SDPD";
pub const DATASET_VERSION: u32 = 1;

fn rows<const N: usize>(values: Vec<f64>) -> Vec<[f64; N]> {
    values.chunks_exact(N).map(|c| c.try_into().expect("N values")).collect()
}

pub fn encode_dataset(d: &DemoDataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    let meta = format!("env = {}\nseed = {}\n", d.env, d.seed);
    w.u32(len_u32(meta.len(), "metadata length")?);
    w.bytes(meta.as_bytes());
    w.u32(len_u32(d.len(), "trajectory count")?);
    for t in d.trajectories() {
        w.u8(t.mode.id());
        w.u32(len_u32(t.len(), "trajectory length")?);
        w.f32s(t.obs.iter().flatten().copied());
        w.f32s(t.proprio.iter().flatten().copied());
        w.f32s(t.actions.iter().flatten().copied());
    }
    Ok(w.buf)
}

fn parse_meta(r: &Reader<'_>, at: usize, text: &str) -> Result<(EnvKind, u64)> {
    let (mut env, mut seed) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| r.error(at, format!("metadata line '{line}'")))?;
        match k.trim() {
            "env" => env = Some(v.trim().parse::<EnvKind>().map_err(|e| r.error(at, e.to_string()))?),
            "seed" => seed = Some(v.trim().parse::<u64>().map_err(|e| r.error(at, format!("seed: {e}")))?),
            other => return Err(r.error(at, format!("unknown metadata key {other}"))),
        }
    }
    match (env, seed) {
        (Some(e), Some(s)) => Ok((e, s)),
        _ => Err(r.error(at, "metadata must name env and seed")),
    }
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<DemoDataset> {
    let mut r = Reader::new(path, bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let n = r.u32("metadata length")? as usize;
    let at = r.offset();
    let meta = r.utf8(n, "metadata")?;
    let (env, seed) = parse_meta(&r, at, meta)?;
    let count = r.u32("trajectory count")?;
    let mut trajectories = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let mode = r.u8("mode")?;
        let mode = Mode::from_id(mode).ok_or_else(|| r.error(at, format!("unknown mode {mode}")))?;
        let len = r.u32("trajectory length")? as usize;
        let obs = rows::<OBS_DIM>(r.f32s(len * OBS_DIM, "observations")?);
        let proprio = rows::<PROPRIO_DIM>(r.f32s(len * PROPRIO_DIM, "proprioception")?);
        let actions = rows::<ACTION_DIM>(r.f32s(len * ACTION_DIM, "actions")?);
        trajectories.push(Trajectory::new(obs, proprio, actions, mode).map_err(|e| r.error(at, e.to_string()))?);
    }
    r.finish()?;
    DemoDataset::new(env, seed, trajectories).map_err(|e| r.error(at, e.to_string()))
}

pub fn write_dataset(d: &DemoDataset, path: &Path) -> Result<()> {
    write_file(path, &encode_dataset(d)?)
}

/// Reads a dataset file; a missing file is reported with its path.
pub fn read_dataset(path: &Path) -> Result<DemoDataset> {
    if !path.exists() {
        return Err(HarnessError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
    }
    decode_dataset(path, &read_file(path)?)
}
