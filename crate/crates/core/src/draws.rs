//! Posterior draw storage: columnar in memory, with a small binary file
//! format ("BCFL1"), CSV export, and the split-R-hat diagnostic.

use std::io::{Read, Write};
use std::path::Path;

use crate::probit::phi;

pub const DRAW_FIELDS: [&str; 5] = ["mu", "mu_c", "tau", "eta", "late"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawField {
    Mu,
    MuC,
    Tau,
    Eta,
    Late,
}

/// Kept MCMC draws of the four ensemble fits and the implied conditional
/// LATE at a fixed set of evaluation points. Values are stored as f32,
/// draw-major within chain: index = (chain * kept_per_chain + d) *
/// n_points + point.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub n_chains: usize,
    pub kept_per_chain: usize,
    pub n_points: usize,
    pub mu: Vec<f32>,
    pub mu_c: Vec<f32>,
    pub tau: Vec<f32>,
    pub eta: Vec<f32>,
    pub late: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum DrawsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a draw file (bad magic)")]
    BadMagic,
    #[error("draw file is malformed: {0}")]
    Malformed(String),
}

impl PosteriorDraws {
    pub fn with_capacity(n_chains: usize, kept_per_chain: usize, n_points: usize) -> Self {
        let cap = n_chains * kept_per_chain * n_points;
        PosteriorDraws {
            n_chains,
            kept_per_chain,
            n_points,
            mu: Vec::with_capacity(cap),
            mu_c: Vec::with_capacity(cap),
            tau: Vec::with_capacity(cap),
            eta: Vec::with_capacity(cap),
            late: Vec::with_capacity(cap),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.kept_per_chain
    }

    pub fn field(&self, f: DrawField) -> &[f32] {
        match f {
            DrawField::Mu => &self.mu,
            DrawField::MuC => &self.mu_c,
            DrawField::Tau => &self.tau,
            DrawField::Eta => &self.eta,
            DrawField::Late => &self.late,
        }
    }

    pub fn value(&self, f: DrawField, draw: usize, point: usize) -> f64 {
        self.field(f)[draw * self.n_points + point] as f64
    }

    /// All draws of one field at one evaluation point, in chain-then-
    /// iteration order.
    pub fn column(&self, f: DrawField, point: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.value(f, d, point)).collect()
    }

    /// Record one kept iteration from per-point ensemble fits. `late` is
    /// derived here so every consumer sees the same contrast.
    pub fn push_draw(&mut self, mu: &[f64], mu_c: &[f64], tau: &[f64], eta: &[f64]) {
        debug_assert_eq!(mu.len(), self.n_points);
        for j in 0..self.n_points {
            self.mu.push(mu[j] as f32);
            self.mu_c.push(mu_c[j] as f32);
            self.tau.push(tau[j] as f32);
            self.eta.push(eta[j] as f32);
            let base = mu[j] + mu_c[j];
            self.late.push((phi(base + tau[j]) - phi(base)) as f32);
        }
    }

    /// Append another run's buffers (used to merge chains in order).
    pub fn append_chain(&mut self, other: &PosteriorDraws) {
        assert_eq!(other.n_points, self.n_points);
        assert_eq!(other.kept_per_chain, self.kept_per_chain);
        self.mu.extend_from_slice(&other.mu);
        self.mu_c.extend_from_slice(&other.mu_c);
        self.tau.extend_from_slice(&other.tau);
        self.eta.extend_from_slice(&other.eta);
        self.late.extend_from_slice(&other.late);
    }

    /// Split-R-hat of one field at one point: each chain's kept sequence
    /// is halved, and the usual between/within variance ratio is taken
    /// over the resulting 2×n_chains sequences.
    pub fn split_rhat(&self, f: DrawField, point: usize) -> f64 {
        let per = self.kept_per_chain;
        let half = per / 2;
        if half < 2 {
            return f64::NAN;
        }
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for chain in 0..self.n_chains {
            for part in 0..2 {
                let start = chain * per + part * half;
                let seq: Vec<f64> = (start..start + half)
                    .map(|d| self.value(f, d, point))
                    .collect();
                let m = seq.iter().sum::<f64>() / half as f64;
                let v = seq.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                    / (half as f64 - 1.0);
                means.push(m);
                vars.push(v);
            }
        }
        let m_chains = means.len() as f64;
        let grand = means.iter().sum::<f64>() / m_chains;
        let b = half as f64 / (m_chains - 1.0)
            * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
        let w = vars.iter().sum::<f64>() / m_chains;
        if w <= 0.0 {
            // All sequences constant: perfectly mixed by convention.
            return 1.0;
        }
        let var_plus = (half as f64 - 1.0) / half as f64 * w + b / half as f64;
        (var_plus / w).sqrt()
    }

    /// Write the "BCFL1" binary format: magic, little-endian u32 header
    /// (n_chains, kept_per_chain, n_points, n_fields), length-prefixed
    /// field names, then each field's f32 values in storage order.
    pub fn write_bcfl1(&self, path: &Path) -> Result<(), DrawsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"BCFL1")?;
        for v in [
            self.n_chains as u32,
            self.kept_per_chain as u32,
            self.n_points as u32,
            DRAW_FIELDS.len() as u32,
        ] {
            f.write_all(&v.to_le_bytes())?;
        }
        for name in DRAW_FIELDS {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
        }
        for field in [&self.mu, &self.mu_c, &self.tau, &self.eta, &self.late] {
            for &v in field.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_bcfl1(path: &Path) -> Result<PosteriorDraws, DrawsError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        f.read_exact(&mut magic)?;
        if &magic != b"BCFL1" {
            return Err(DrawsError::BadMagic);
        }
        let read_u32 = |f: &mut dyn Read| -> Result<u32, DrawsError> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let n_chains = read_u32(&mut f)? as usize;
        let kept = read_u32(&mut f)? as usize;
        let n_points = read_u32(&mut f)? as usize;
        let n_fields = read_u32(&mut f)? as usize;
        if n_fields != DRAW_FIELDS.len() {
            return Err(DrawsError::Malformed(format!(
                "expected {} fields, found {}",
                DRAW_FIELDS.len(),
                n_fields
            )));
        }
        for expect in DRAW_FIELDS {
            let len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; len];
            f.read_exact(&mut name)?;
            if name != expect.as_bytes() {
                return Err(DrawsError::Malformed(format!(
                    "unexpected field name (wanted {expect})"
                )));
            }
        }
        let total = n_chains * kept * n_points;
        let read_field = |f: &mut dyn Read| -> Result<Vec<f32>, DrawsError> {
            let mut out = Vec::with_capacity(total);
            let mut b = [0u8; 4];
            for _ in 0..total {
                f.read_exact(&mut b)?;
                out.push(f32::from_le_bytes(b));
            }
            Ok(out)
        };
        Ok(PosteriorDraws {
            n_chains,
            kept_per_chain: kept,
            n_points,
            mu: read_field(&mut f)?,
            mu_c: read_field(&mut f)?,
            tau: read_field(&mut f)?,
            eta: read_field(&mut f)?,
            late: read_field(&mut f)?,
        })
    }

    /// Long-format CSV export: draw, point, then the five fields.
    pub fn write_csv(&self, path: &Path) -> Result<(), DrawsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "draw,point,mu,mu_c,tau,eta,late")?;
        for d in 0..self.n_draws() {
            for j in 0..self.n_points {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{}",
                    d,
                    j,
                    fmt_sig(self.value(DrawField::Mu, d, j)),
                    fmt_sig(self.value(DrawField::MuC, d, j)),
                    fmt_sig(self.value(DrawField::Tau, d, j)),
                    fmt_sig(self.value(DrawField::Eta, d, j)),
                    fmt_sig(self.value(DrawField::Late, d, j)),
                )?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Fixed 9-significant-digit float formatting so reruns produce
/// byte-identical files.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{:.9e}", v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_draws() -> PosteriorDraws {
        let mut d = PosteriorDraws::with_capacity(2, 3, 2);
        for k in 0..6 {
            let v = k as f64 * 0.1;
            d.push_draw(&[v, -v], &[0.0, v], &[1.0, -1.0], &[v, v]);
        }
        d
    }

    #[test]
    fn late_is_probit_contrast() {
        let d = toy_draws();
        // point 0, draw 0: mu=0, mu_c=0, tau=1
        let want = phi(1.0) - phi(0.0);
        assert!((d.value(DrawField::Late, 0, 0) - want).abs() < 1e-6);
    }

    #[test]
    fn binary_round_trip() {
        let d = toy_draws();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.bcfl1");
        d.write_bcfl1(&path).unwrap();
        let back = PosteriorDraws::read_bcfl1(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTBCFL1 ......").unwrap();
        assert!(matches!(
            PosteriorDraws::read_bcfl1(&path),
            Err(DrawsError::BadMagic)
        ));
    }

    #[test]
    fn rhat_near_one_for_iid_sequences() {
        // Deterministic pseudo-iid values via a simple LCG.
        let mut state = 12345u64;
        let mut unif = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut d = PosteriorDraws::with_capacity(4, 500, 1);
        for _ in 0..2000 {
            d.push_draw(&[unif()], &[0.0], &[0.0], &[0.0]);
        }
        let r = d.split_rhat(DrawField::Mu, 0);
        assert!((r - 1.0).abs() < 0.05, "rhat {r}");
    }

    #[test]
    fn rhat_flags_separated_chains() {
        let mut d = PosteriorDraws::with_capacity(2, 100, 1);
        for chain in 0..2 {
            for k in 0..100 {
                let v = chain as f64 * 10.0 + (k % 7) as f64 * 0.01;
                d.push_draw(&[v], &[0.0], &[0.0], &[0.0]);
            }
        }
        assert!(d.split_rhat(DrawField::Mu, 0) > 2.0);
    }

    #[test]
    fn csv_deterministic() {
        let d = toy_draws();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        d.write_csv(&p1).unwrap();
        d.write_csv(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
