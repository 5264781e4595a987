use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,episode,return,win,l_td,l_psi,l_phi,l_adv,explore_eps,int_err_bound";

/// One line of the training metrics stream, written after every update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Environment steps so far.
    pub step: u64,
    pub episode: u64,
    /// Return of the most recent rollout.
    pub episode_return: f64,
    pub win: bool,
    pub l_td: f64,
    pub l_psi: f64,
    pub l_phi: f64,
    pub l_adv: f64,
    pub explore_eps: f64,
    /// Fused-latent integration error bound on the latest clean messages.
    pub int_err_bound: f64,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [self.episode_return, self.l_td, self.l_psi, self.l_phi, self.l_adv, self.explore_eps, self.int_err_bound]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.episode_return,
            u8::from(self.win),
            self.l_td,
            self.l_psi,
            self.l_phi,
            self.l_adv,
            self.explore_eps,
            self.int_err_bound
        )
    }
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if !row.is_finite() {
            return Err(Error::Numeric(format!("metrics row at step {} has a non-finite entry", row.step)));
        }
        writeln!(self.out, "{}", row.csv_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Run description written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub env_steps: u64,
    pub episodes: u64,
    pub trainer_steps: u64,
    pub metrics_file: String,
    pub checkpoint_file: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            step: 10,
            episode: 2,
            episode_return: 1.0,
            win: true,
            l_td: 0.25,
            l_psi: 3.5,
            l_phi: 0.125,
            l_adv: 0.0,
            explore_eps: 0.5,
            int_err_bound: 0.01,
        }
    }

    #[test]
    fn csv_layout() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        w.write(&row()).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text, format!("{METRICS_HEADER}\n10,2,1,1,0.25,3.5,0.125,0,0.5,0.01\n"));
        assert_eq!(METRICS_HEADER.split(',').count(), row().csv_line().split(',').count());
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        assert!(w.write(&MetricsRow { l_td: f64::NAN, ..row() }).is_err());
        assert_eq!(hex(&[0, 255, 16]), "00ff10");
    }
}
