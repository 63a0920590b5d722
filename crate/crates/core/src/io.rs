//! Episode serialization.
//!
//! JSON: one document `{model, seed, x_star, y_star, a_star, y}` with
//! row-major arrays (one row per time step).
//!
//! Binary: a 16-byte header (`"RLQE-EP\0"`, version `u32`, reserved `u32`),
//! then `T, d, m, seed` as `u64`, then `sigma2, tau2, R2, A, B, x_star,
//! y_star, a_star, y` as little-endian `f64` in row-major order. Mask
//! entries are stored as 0.0/1.0.
//!
//! Noise sequences are not stored; they are recovered from the dynamics
//! and measurement equations on load.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlqeError};
use crate::lds::{EpisodeData, SystemModel};
use crate::linalg::{Mat, Trajectory};

pub const MAGIC: &[u8; 8] = b"RLQE-EP\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EpisodeDoc {
    model: SystemModel,
    seed: u64,
    x_star: Trajectory,
    y_star: Trajectory,
    a_star: Vec<bool>,
    y: Trajectory,
}

fn rebuild(
    model: SystemModel,
    seed: u64,
    x_star: Trajectory,
    y_star: Trajectory,
    a_star: Vec<bool>,
    y: Trajectory,
) -> Result<EpisodeData> {
    model.validate()?;
    let t_len = x_star.len();
    let (d, m) = (model.state_dim(), model.obs_dim());
    let ok = y_star.len() == t_len
        && y.len() == t_len
        && a_star.len() == t_len
        && (t_len == 0 || (x_star.dim() == d && y_star.dim() == m && y.dim() == m));
    if !ok {
        return Err(RlqeError::DimensionMismatch("episode arrays disagree with the model".into()));
    }
    let mut w_star = Trajectory::zeros(d, t_len);
    let mut v_star = Trajectory::zeros(m, t_len);
    for i in 0..t_len {
        if i > 0 {
            w_star.set(i, &(x_star.step(i) - &model.a * x_star.step(i - 1)));
        }
        v_star.set(i, &(y_star.step(i) - &model.b * x_star.step(i)));
    }
    Ok(EpisodeData {
        model,
        seed,
        x_star,
        y_star,
        w_star,
        v_star,
        a_star,
        y,
    })
}

pub fn episode_to_json(ep: &EpisodeData) -> Result<String> {
    let doc = EpisodeDoc {
        model: ep.model.clone(),
        seed: ep.seed,
        x_star: ep.x_star.clone(),
        y_star: ep.y_star.clone(),
        a_star: ep.a_star.clone(),
        y: ep.y.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn episode_from_json(s: &str) -> Result<EpisodeData> {
    let doc: EpisodeDoc = serde_json::from_str(s)?;
    rebuild(doc.model, doc.seed, doc.x_star, doc.y_star, doc.a_star, doc.y)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_mat_rows(out: &mut Vec<u8>, m: &Mat) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            put_f64(out, m[(r, c)]);
        }
    }
}

fn put_traj(out: &mut Vec<u8>, t: &Trajectory) {
    put_mat_rows(out, &t.as_matrix().transpose());
}

pub fn write_episode_binary(ep: &EpisodeData, mut w: impl Write) -> Result<()> {
    let model = &ep.model;
    let (t_len, d, m) = (ep.horizon(), model.state_dim(), model.obs_dim());
    let mut out = Vec::with_capacity(64 + 8 * (d * d + m * d + t_len * (d + 2 * m + 1)));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in [t_len as u64, d as u64, m as u64, ep.seed] {
        put_u64(&mut out, v);
    }
    for v in [model.sigma2, model.tau2, model.r2] {
        put_f64(&mut out, v);
    }
    put_mat_rows(&mut out, &model.a);
    put_mat_rows(&mut out, &model.b);
    put_traj(&mut out, &ep.x_star);
    put_traj(&mut out, &ep.y_star);
    for &a in &ep.a_star {
        put_f64(&mut out, if a { 1.0 } else { 0.0 });
    }
    put_traj(&mut out, &ep.y);
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RlqeError::InvalidInput("truncated episode file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn traj(&mut self, len: usize, dim: usize) -> Result<Trajectory> {
        Ok(Trajectory::from_matrix(self.mat(len, dim)?.transpose()))
    }
}

pub fn read_episode_binary(mut r: impl Read) -> Result<EpisodeData> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(RlqeError::InvalidInput("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(RlqeError::InvalidInput(format!("unsupported episode version {version}")));
    }
    c.take(4)?;
    let t_len = c.u64()? as usize;
    let d = c.u64()? as usize;
    let m = c.u64()? as usize;
    let seed = c.u64()?;
    // Guard against absurd headers before allocating.
    let need = 8u128 * (3 + d * d + m * d + t_len * (d + 2 * m + 1)) as u128;
    if need > (buf.len() - c.pos) as u128 {
        return Err(RlqeError::InvalidInput("truncated episode file".into()));
    }
    let (sigma2, tau2, r2) = (c.f64()?, c.f64()?, c.f64()?);
    let a = c.mat(d, d)?;
    let b = c.mat(m, d)?;
    let model = SystemModel::new(a, b, sigma2, tau2, r2, t_len)?;
    let x_star = c.traj(t_len, d)?;
    let y_star = c.traj(t_len, m)?;
    let mut a_star = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        a_star.push(c.f64()? != 0.0);
    }
    let y = c.traj(t_len, m)?;
    rebuild(model, seed, x_star, y_star, a_star, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{apply_corruptions, simulate, AdversaryStrategy};

    fn sample() -> EpisodeData {
        let a = Mat::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let b = Mat::from_row_slice(1, 2, &[1.0, 0.5]);
        let model = SystemModel::new(a, b, 0.3, 0.7, 2.0, 25).unwrap();
        apply_corruptions(&simulate(&model, 3).unwrap(), 0.2, &AdversaryStrategy::Spike { scale: 9.0 }, 4).unwrap()
    }

    fn close(a: &EpisodeData, b: &EpisodeData) {
        assert_eq!(a.model, b.model);
        assert_eq!(a.a_star, b.a_star);
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.y, b.y);
        assert!(a.w_star.max_step_distance(&b.w_star) < 1e-12);
        assert!(a.v_star.max_step_distance(&b.v_star) < 1e-12);
    }

    #[test]
    fn json_roundtrip() {
        let ep = sample();
        let back = episode_from_json(&episode_to_json(&ep).unwrap()).unwrap();
        close(&ep, &back);
    }

    #[test]
    fn binary_roundtrip_and_header() {
        let ep = sample();
        let mut buf = Vec::new();
        write_episode_binary(&ep, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf.len(), 16 + 32 + 8 * (3 + 4 + 2 + 25 * (2 + 1 + 1 + 1)));
        close(&ep, &read_episode_binary(&buf[..]).unwrap());
    }

    #[test]
    fn truncated_binary_rejected() {
        let mut buf = Vec::new();
        write_episode_binary(&sample(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_episode_binary(&buf[..]).is_err());
    }
}
