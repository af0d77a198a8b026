//! Connectionist temporal classification loss in log space, with its exact
//! gradient with respect to the per-frame log-probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered token inventory with one blank symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    tokens: Vec<String>,
    blank: usize,
}

impl Alphabet {
    pub fn new(tokens: Vec<String>, blank: usize) -> Result<Self> {
        if blank >= tokens.len() {
            return Err(Error::config("blank_index", format!("{blank} not in [0, {})", tokens.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(Error::config("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Alphabet { tokens, blank })
    }

    /// Blank at index 0 followed by `t0 .. t{n-1}`.
    pub fn numbered(n: usize) -> Self {
        let mut tokens = vec!["<blank>".to_string()];
        tokens.extend((0..n).map(|i| format!("t{i}")));
        Alphabet { tokens, blank: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Row-major `frames x vocab` log-probabilities.
#[derive(Debug, Clone, Copy)]
pub struct LogProbs<'a> {
    pub values: &'a [f64],
    pub frames: usize,
    pub vocab: usize,
}

impl<'a> LogProbs<'a> {
    pub fn new(values: &'a [f64], frames: usize, vocab: usize) -> Result<Self> {
        if values.len() != frames * vocab {
            return Err(Error::shape("log-prob matrix", frames * vocab, values.len()));
        }
        Ok(LogProbs { values, frames, vocab })
    }

    #[inline]
    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.vocab + k]
    }
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_target(lp: &LogProbs<'_>, target: &[usize], blank: usize) -> Result<()> {
    if blank >= lp.vocab {
        return Err(Error::Range {
            what: "blank index",
            value: blank as i64,
            min: 0,
            max: lp.vocab as i64 - 1,
        });
    }
    for &tok in target {
        if tok >= lp.vocab || tok == blank {
            return Err(Error::Invalid(format!(
                "target token {tok} is not a non-blank symbol of a {}-symbol alphabet",
                lp.vocab
            )));
        }
    }
    Ok(())
}

/// Minimum number of frames needed to emit `target`: one per token plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` (log), including the emission at `t`.
fn forward_table(lp: &LogProbs<'_>, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; lp.frames * s_len];
    if lp.frames == 0 {
        return alpha;
    }
    alpha[0] = lp.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext[1]);
    }
    for t in 1..lp.frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp.at(t, ext[s])
            };
        }
    }
    alpha
}

/// Backward variables `beta[t][s]` (log), excluding the emission at `t`.
fn backward_table(lp: &LogProbs<'_>, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let frames = lp.frames;
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    if frames == 0 {
        return beta;
    }
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp.at(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }
    beta
}

/// Negative log-likelihood of `target` under all alignments.
///
/// Returns `f64::INFINITY` when no alignment fits in the available frames.
pub fn ctc_loss(lp: LogProbs<'_>, target: &[usize], blank: usize) -> Result<f64> {
    check_target(&lp, target, blank)?;
    if lp.frames == 0 || min_frames(target) > lp.frames {
        return Ok(f64::INFINITY);
    }
    let ext = extended(target, blank);
    let alpha = forward_table(&lp, &ext, blank);
    let s_len = ext.len();
    let last = &alpha[(lp.frames - 1) * s_len..];
    let mut total = last[s_len - 1];
    if s_len > 1 {
        total = log_add(total, last[s_len - 2]);
    }
    Ok(-total)
}

/// Loss and `d loss / d log_probs`, row-major like the input. The gradient is
/// zero for infeasible targets.
pub fn ctc_loss_with_grad(lp: LogProbs<'_>, target: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    let loss = ctc_loss(lp, target, blank)?;
    let mut grad = vec![0.0; lp.values.len()];
    if !loss.is_finite() {
        return Ok((loss, grad));
    }
    let ext = extended(target, blank);
    let s_len = ext.len();
    let alpha = forward_table(&lp, &ext, blank);
    let beta = backward_table(&lp, &ext, blank);
    let log_total = -loss;
    for t in 0..lp.frames {
        for (s, &sym) in ext.iter().enumerate() {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            grad[t * lp.vocab + sym] -= (a + b - log_total).exp();
        }
    }
    Ok((loss, grad))
}

/// Brute-force reference: enumerates every frame labelling, collapses it and
/// sums the probability of those matching `target`. Exponential in `frames`.
pub fn ctc_oracle(lp: LogProbs<'_>, target: &[usize], blank: usize) -> Result<f64> {
    check_target(&lp, target, blank)?;
    let paths = (lp.vocab as f64).powi(lp.frames as i32);
    if paths > 1e7 {
        return Err(Error::Invalid(format!("oracle would enumerate {paths:.0} paths")));
    }
    let mut labels = vec![0usize; lp.frames];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapses_to(&labels, target, blank) {
            let score: f64 = labels.iter().enumerate().map(|(t, &k)| lp.at(t, k)).sum();
            total = log_add(total, score);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == labels.len() {
                return Ok(-total);
            }
            labels[i] += 1;
            if labels[i] < lp.vocab {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn collapses_to(path: &[usize], target: &[usize], blank: usize) -> bool {
    let mut out = Vec::with_capacity(target.len());
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out == target
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, vocab: usize) -> Vec<f64> {
        vec![-(vocab as f64).ln(); frames * vocab]
    }

    #[test]
    fn single_frame_single_token() {
        let v = uniform(1, 3);
        let lp = LogProbs::new(&v, 1, 3).unwrap();
        assert!((ctc_loss(lp, &[1], 0).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // paths aa, a-, -a out of 9
        let v = uniform(2, 3);
        let lp = LogProbs::new(&v, 2, 3).unwrap();
        let want = -(3.0f64 / 9.0).ln();
        assert!((ctc_loss(lp, &[1], 0).unwrap() - want).abs() < 1e-12);
        assert!((ctc_oracle(lp, &[1], 0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_a_blank_frame() {
        let v = uniform(2, 3);
        let lp = LogProbs::new(&v, 2, 3).unwrap();
        assert_eq!(ctc_loss(lp, &[1, 1], 0).unwrap(), f64::INFINITY);
        assert_eq!(ctc_oracle(lp, &[1, 1], 0).unwrap(), f64::INFINITY);
        let (_, g) = ctc_loss_with_grad(lp, &[1, 1], 0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_target_is_all_blank() {
        let v: Vec<f64> = [0.5f64, 0.3, 0.2, 0.1, 0.6, 0.3].iter().map(|p| p.ln()).collect();
        let lp = LogProbs::new(&v, 2, 3).unwrap();
        let want = -(0.5f64.ln() + 0.1f64.ln());
        assert!((ctc_loss(lp, &[], 0).unwrap() - want).abs() < 1e-12);
        assert!((ctc_oracle(lp, &[], 0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        // frames emit a, blank, b with probability one
        let mut v = vec![f64::NEG_INFINITY; 9];
        v[1] = 0.0;
        v[3] = 0.0;
        v[8] = 0.0;
        let lp = LogProbs::new(&v, 3, 3).unwrap();
        assert_eq!(ctc_loss(lp, &[1, 2], 0).unwrap(), 0.0);
        assert_eq!(ctc_oracle(lp, &[1, 2], 0).unwrap(), 0.0);
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let v = uniform(2, 3);
        let lp = LogProbs::new(&v, 2, 3).unwrap();
        assert!(ctc_loss(lp, &[0], 0).is_err());
        assert!(ctc_loss(lp, &[3], 0).is_err());
    }

    #[test]
    fn occupancy_sums_to_one_per_frame() {
        let v: Vec<f64> = (0..20).map(|i| -1.0 - (i % 7) as f64 * 0.3).collect();
        let lp = LogProbs::new(&v, 5, 4).unwrap();
        let (_, g) = ctc_loss_with_grad(lp, &[1, 3], 0).unwrap();
        for t in 0..5 {
            let s: f64 = g[t * 4..(t + 1) * 4].iter().sum();
            assert!((s + 1.0).abs() < 1e-12, "frame {t}: {s}");
        }
    }

    #[test]
    fn alphabet_validation() {
        assert!(Alphabet::new(vec!["a".into(), "b".into()], 2).is_err());
        assert!(Alphabet::new(vec!["a".into(), "a".into()], 0).is_err());
        let a = Alphabet::numbered(12);
        assert_eq!(a.len(), 13);
        assert_eq!(a.blank(), 0);
    }
}
