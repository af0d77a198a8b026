use crate::error::{Error, Result};
use crate::objectives::{exhaustive_assignment, LogProbs};

/// Per-frame argmax, merge adjacent repeats, drop blanks.
pub fn greedy_ctc_decode(lp: LogProbs<'_>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..lp.frames {
        let row = &lp.values[t * lp.vocab..(t + 1) * lp.vocab];
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let next = (diag + usize::from(h != r)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[reference.len()]
}

pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("WER of an empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Edits of the best hypothesis-to-reference pairing for one mixture.
pub fn best_permutation_edits(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<(usize, Vec<usize>)> {
    if hyps.len() != refs.len() {
        return Err(Error::shape("hypothesis streams", refs.len(), hyps.len()));
    }
    let matrix: Vec<Vec<f64>> = hyps
        .iter()
        .map(|h| refs.iter().map(|r| edit_distance(h, r) as f64).collect())
        .collect();
    let (perm, total) = exhaustive_assignment(&matrix)?;
    Ok((total as usize, perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(frames: &[usize], vocab: usize) -> Vec<f64> {
        let mut v = vec![-10.0; frames.len() * vocab];
        for (t, &k) in frames.iter().enumerate() {
            v[t * vocab + k] = 0.0;
        }
        v
    }

    #[test]
    fn greedy_examples() {
        let v = one_hot(&[1, 1, 0, 2], 3);
        assert_eq!(greedy_ctc_decode(LogProbs::new(&v, 4, 3).unwrap(), 0), vec![1, 2]);
        let v = one_hot(&[0, 0, 0], 3);
        assert!(greedy_ctc_decode(LogProbs::new(&v, 3, 3).unwrap(), 0).is_empty());
        let v = one_hot(&[1, 0, 1], 3);
        assert_eq!(greedy_ctc_decode(LogProbs::new(&v, 3, 3).unwrap(), 0), vec![1, 1]);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((wer(&['a', 'x', 'c'], &['a', 'b', 'c']).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer::<u8>(&[], &[1]).unwrap(), 1.0);
        assert!(wer::<u8>(&[1], &[]).is_err());
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 3]), 2);
        assert_eq!(edit_distance(&[5], &[1, 2, 3]), 3);
    }

    #[test]
    fn pairing_ignores_stream_order() {
        let refs = vec![vec![1, 2, 3], vec![4, 5]];
        let hyps = vec![vec![4, 5], vec![1, 2]];
        let (e, perm) = best_permutation_edits(&hyps, &refs).unwrap();
        assert_eq!((e, perm), (1, vec![1, 0]));
        let swapped = vec![hyps[1].clone(), hyps[0].clone()];
        assert_eq!(best_permutation_edits(&swapped, &refs).unwrap().0, 1);
    }
}
