//! SI-SDR, the multi-resolution log-spectral proxy, and evaluation reports.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{SignalError, StftConfig, StftOp};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Upper bound reported for (numerically) exact matches.
pub const SI_SDR_CAP_DB: f64 = 60.0;
/// Additive power floor inside the log.
pub const LOG_FLOOR: f64 = 1e-7;
/// `(window, hop)` of the proxy's resolutions.
pub const PROXY_RESOLUTIONS: [(usize, usize); 3] = [(512, 128), (1024, 256), (2048, 512)];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference and estimate lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("signal of {len} samples is shorter than the largest proxy window ({min})")]
    TooShort { len: usize, min: usize },
    #[error("non-finite samples")]
    NonFinite,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr<R: Real>(reference: &[R], estimate: &[R]) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::Length(reference.len(), estimate.len()));
    }
    if reference.iter().chain(estimate).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let rr: f64 = reference.iter().map(|r| r.as_f64().powi(2)).sum();
    if rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let er: f64 = reference.iter().zip(estimate).map(|(r, e)| r.as_f64() * e.as_f64()).sum();
    let alpha = er / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let p = alpha * r.as_f64();
        target += p * p;
        noise += (p - e.as_f64()).powi(2);
    }
    if noise == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Mean L1 distance between `0.5 ln(|X|^2 + floor)` of the reference and the
/// estimate, averaged over three STFT resolutions. Differentiable.
pub struct PerceptualProxy<R: Real> {
    ops: Vec<Arc<StftOp<R>>>,
    min_len: usize,
}

impl<R: Real> PerceptualProxy<R> {
    pub fn new() -> Result<Self, MetricError> {
        let mut ops = Vec::new();
        let mut min_len = 0;
        for (w, h) in PROXY_RESOLUTIONS {
            let cfg = StftConfig::new(w, h)?;
            min_len = min_len.max(w);
            ops.push(Arc::new(StftOp::new(cfg)?));
        }
        Ok(Self { ops, min_len })
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    fn log_mag<'g>(&self, op: &Arc<StftOp<R>>, x: Var<'g, R>) -> Result<Var<'g, R>, TensorError> {
        let spec = x.linear_map(op.clone())?;
        let power = spec.slice(1, 0, 1)?.square()?.add(spec.slice(1, 1, 1)?.square()?)?;
        power.add_scalar(R::lit(LOG_FLOOR))?.log()?.scale(R::lit(0.5))
    }

    /// Proxy over `[B, L]` waveforms, reference first.
    pub fn loss<'g>(&self, reference: Var<'g, R>, estimate: Var<'g, R>) -> Result<Var<'g, R>, MetricError> {
        let (rs, es) = (reference.shape(), estimate.shape());
        if rs != es {
            return Err(MetricError::Length(rs.iter().product(), es.iter().product()));
        }
        let len = *rs.last().unwrap_or(&0);
        if len < self.min_len {
            return Err(MetricError::TooShort { len, min: self.min_len });
        }
        let mut total: Option<Var<'g, R>> = None;
        for op in &self.ops {
            let d = self.log_mag(op, reference)?.sub(self.log_mag(op, estimate)?)?.abs()?.mean()?;
            total = Some(match total {
                Some(t) => t.add(d)?,
                None => d,
            });
        }
        let n = R::lit(self.ops.len() as f64);
        Ok(total.expect("three resolutions").scale(R::one() / n)?)
    }
}

/// Proxy value for one pair of waveforms.
pub fn perceptual_proxy<R: Real>(reference: &[R], estimate: &[R]) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::Length(reference.len(), estimate.len()));
    }
    if reference.iter().chain(estimate).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let proxy = PerceptualProxy::<f64>::new()?;
    let g = Graph::new();
    let to = |x: &[R]| Tensor::new(&[1, x.len()], x.iter().map(|v| v.as_f64()).collect());
    let r = g.constant(to(reference)?)?;
    let e = g.constant(to(estimate)?)?;
    Ok(proxy.loss(r, e)?.value().item()?)
}

/// One evaluated utterance at one NFE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub nfe: usize,
    pub si_sdr_db: f64,
    pub proxy: f64,
    pub dur_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub label: String,
    pub nfe: usize,
    pub count: usize,
    pub mean_si_sdr_db: f64,
    pub mean_proxy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(label: &str, config_hash: &str) -> Self {
        Self {
            label: label.to_string(),
            config_hash: config_hash.to_string(),
            rows: Vec::new(),
        }
    }

    /// Distinct NFE values in first-seen order.
    pub fn nfes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.nfe) {
                out.push(r.nfe);
            }
        }
        out
    }

    /// Arithmetic means per NFE over every row.
    pub fn summaries(&self) -> Vec<EvalSummary> {
        self.nfes()
            .into_iter()
            .map(|nfe| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.nfe == nfe).collect();
                let n = rows.len() as f64;
                EvalSummary {
                    label: self.label.clone(),
                    nfe,
                    count: rows.len(),
                    mean_si_sdr_db: rows.iter().map(|r| r.si_sdr_db).sum::<f64>() / n,
                    mean_proxy: rows.iter().map(|r| r.proxy).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn mean_si_sdr(&self, nfe: usize) -> Option<f64> {
        self.summaries().into_iter().find(|s| s.nfe == nfe).map(|s| s.mean_si_sdr_db)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "utt_id,nfe,si_sdr_db,proxy,dur_s")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.6},{:.6},{:.4}", r.utt_id, r.nfe, r.si_sdr_db, r.proxy, r.dur_s)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "config_hash": self.config_hash,
            "summaries": self.summaries(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), MetricError> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        let json = serde_json::to_string_pretty(&self.summary_json()).expect("json");
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }
}

/// Scores one estimate against its reference.
pub fn score_row(utt_id: &str, nfe: usize, reference: &[f32], estimate: &[f32], sample_rate: u32) -> Result<EvalRow, MetricError> {
    Ok(EvalRow {
        utt_id: utt_id.to_string(),
        nfe,
        si_sdr_db: si_sdr(reference, estimate)?,
        proxy: perceptual_proxy(reference, estimate)?,
        dur_s: reference.len() as f64 / sample_rate as f64,
    })
}
