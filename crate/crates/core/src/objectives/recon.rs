//! Reconstruction scores between separated and clean embeddings.

use crate::error::{Error, Result};
use crate::sidecar::Embedding;

/// Noise-floor coefficient, relative to the estimate energy so the score stays
/// exactly invariant to rescaling the estimate.
pub const SI_SNR_EPS: f64 = 1e-8;
/// Magnitude cap in dB; reached by exact (or exactly orthogonal) estimates.
pub const SI_SNR_CAP_DB: f64 = 80.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR in dB and its gradient with respect to `estimate`.
pub fn si_snr_with_grad(estimate: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if estimate.len() != reference.len() {
        return Err(Error::shape("SI-SNR estimate", reference.len(), estimate.len()));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::Invalid("SI-SNR reference is identically zero".into()));
    }
    let scale = dot(estimate, reference) / ref_energy;
    let target: Vec<f64> = reference.iter().map(|r| scale * r).collect();
    let noise: Vec<f64> = estimate.iter().zip(&target).map(|(e, s)| e - s).collect();
    let signal = dot(&target, &target);
    let noise_energy = dot(&noise, &noise) + SI_SNR_EPS * dot(estimate, estimate);
    let db = 10.0 * (signal / noise_energy).log10();
    if !(db < SI_SNR_CAP_DB) {
        return Ok((SI_SNR_CAP_DB, vec![0.0; estimate.len()]));
    }
    if db <= -SI_SNR_CAP_DB {
        return Ok((-SI_SNR_CAP_DB, vec![0.0; estimate.len()]));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let grad = target
        .iter()
        .zip(&noise)
        .zip(estimate)
        .map(|((s, n), e)| k * (2.0 * s / signal - 2.0 * (n + SI_SNR_EPS * e) / noise_energy))
        .collect();
    Ok((db, grad))
}

pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_snr_with_grad(estimate, reference)?.0)
}

/// Mean squared difference and its gradient with respect to `estimate`.
pub fn mse_with_grad(estimate: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if estimate.len() != target.len() {
        return Err(Error::shape("MSE estimate", target.len(), estimate.len()));
    }
    if estimate.is_empty() {
        return Err(Error::Invalid("MSE of empty inputs".into()));
    }
    let n = estimate.len() as f64;
    let diff: Vec<f64> = estimate.iter().zip(target).map(|(e, t)| e - t).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff.iter().map(|d| 2.0 * d / n).collect()))
}

pub fn mse_recon(estimate: &Embedding, target: &Embedding) -> Result<f64> {
    if (estimate.channels(), estimate.frames()) != (target.channels(), target.frames()) {
        return Err(Error::shape(
            "MSE embedding",
            format!("{}x{}", target.channels(), target.frames()),
            format!("{}x{}", estimate.channels(), estimate.frames()),
        ));
    }
    let e: Vec<f64> = estimate.values().iter().map(|&v| v.into()).collect();
    let t: Vec<f64> = target.values().iter().map(|&v| v.into()).collect();
    Ok(mse_with_grad(&e, &t)?.0)
}
