//! Training objectives: CTC, permutation-invariant pairing, and optional
//! reconstruction terms whose pairing is dictated by the CTC permutation.

mod ctc;
mod pit;
mod recon;

use serde::{Deserialize, Serialize};

pub use ctc::{ctc_loss, ctc_loss_with_grad, ctc_oracle, min_frames, Alphabet, LogProbs};
pub use pit::{
    exhaustive_assignment, hungarian_assignment, permutation_cost, pit, pit_from_matrix, PitOutcome,
    EXHAUSTIVE_LIMIT,
};
pub use recon::{mse_recon, mse_with_grad, si_snr, si_snr_with_grad, SI_SNR_CAP_DB, SI_SNR_EPS};

use crate::error::{Error, Result};

pub const DEFAULT_RECON_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    #[default]
    None,
    SiSnr,
    Mse,
}

impl ReconKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReconKind::None => "none",
            ReconKind::SiSnr => "si_snr",
            ReconKind::Mse => "mse",
        }
    }
}

impl std::str::FromStr for ReconKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ReconKind::None),
            "si_snr" | "sisnr" => Ok(ReconKind::SiSnr),
            "mse" => Ok(ReconKind::Mse),
            other => Err(Error::Invalid(format!("unknown reconstruction loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub recon_kind: ReconKind,
    pub recon_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            recon_kind: ReconKind::None,
            recon_weight: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_recon(kind: ReconKind) -> Self {
        ObjectiveConfig {
            recon_kind: kind,
            recon_weight: if kind == ReconKind::None { 0.0 } else { DEFAULT_RECON_WEIGHT },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.recon_weight >= 0.0) || !self.recon_weight.is_finite() {
            return Err(Error::config("recon_weight", "must be finite and >= 0"));
        }
        if (self.recon_weight == 0.0) != (self.recon_kind == ReconKind::None) {
            return Err(Error::config(
                "recon_weight",
                "must be zero exactly when recon_kind is none",
            ));
        }
        Ok(())
    }
}

/// Loss pieces and gradients for one mixture.
#[derive(Debug, Clone)]
pub struct CombinedOutcome {
    pub pit: PitOutcome,
    pub recon: f64,
    pub total: f64,
    /// `d total / d log_probs` of each stream (zero for infeasible pairs).
    pub grad_log_probs: Vec<Vec<f64>>,
    /// `d total / d separated` of each stream; empty when reconstruction is off.
    pub grad_separated: Vec<Vec<f64>>,
}

/// Per-speaker PIT-CTC with the reconstruction term, if any, evaluated under
/// the permutation chosen by CTC alone.
pub fn combined_objective(
    streams: &[LogProbs<'_>],
    targets: &[Vec<usize>],
    blank: usize,
    separated: &[&[f64]],
    clean: Option<&[&[f64]]>,
    cfg: &ObjectiveConfig,
) -> Result<CombinedOutcome> {
    cfg.validate()?;
    let outcome = pit(streams, targets, |lp, t| ctc_loss(*lp, t, blank))?;
    let grad_log_probs = streams
        .iter()
        .zip(&outcome.permutation)
        .map(|(lp, &j)| ctc_loss_with_grad(*lp, &targets[j], blank).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;

    if cfg.recon_kind == ReconKind::None {
        return Ok(CombinedOutcome {
            total: outcome.total_loss,
            pit: outcome,
            recon: 0.0,
            grad_log_probs,
            grad_separated: Vec::new(),
        });
    }
    let clean = clean.ok_or_else(|| {
        Error::Invalid(format!("{} reconstruction needs clean targets", cfg.recon_kind.as_str()))
    })?;
    if separated.len() != streams.len() || clean.len() != streams.len() {
        return Err(Error::shape(
            "reconstruction streams",
            streams.len(),
            format!("{} separated / {} clean", separated.len(), clean.len()),
        ));
    }
    let mut recon = 0.0;
    let mut grad_separated = Vec::with_capacity(separated.len());
    for (i, &j) in outcome.permutation.iter().enumerate() {
        let (value, grad) = match cfg.recon_kind {
            ReconKind::SiSnr => {
                let (db, g) = si_snr_with_grad(separated[i], clean[j])?;
                (-db, g.into_iter().map(|x| -x).collect::<Vec<_>>())
            }
            ReconKind::Mse => mse_with_grad(separated[i], clean[j])?,
            ReconKind::None => unreachable!(),
        };
        recon += value;
        grad_separated.push(grad.into_iter().map(|g| cfg.recon_weight * g).collect());
    }
    Ok(CombinedOutcome {
        total: outcome.total_loss + cfg.recon_weight * recon,
        pit: outcome,
        recon,
        grad_log_probs,
        grad_separated,
    })
}
