use super::EvalError;
use crate::vocab::{TokenId, Vocabulary};

/// `(substitutions + deletions + insertions) / |reference|` under unit-cost
/// edit distance. Normalized by the reference, so it can exceed 1 and is not
/// symmetric when the lengths differ.
pub fn token_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Content indices carried by speech tokens, one per group of `frame_rate`
/// consecutive tokens. Each group votes; the most frequent content wins and
/// ties go to the one seen first. A short trailing group still votes.
pub fn decode_content(vocab: &Vocabulary, speech: &[TokenId], frame_rate: usize) -> Result<Vec<usize>, EvalError> {
    if frame_rate == 0 {
        return Err(EvalError::Invalid("frame rate must be positive".into()));
    }
    let contents = speech
        .iter()
        .map(|&id| vocab.split_speech(id).map(|(c, _)| c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(contents
        .chunks(frame_rate)
        .map(|group| {
            let mut best = (group[0], 0usize);
            for &c in group {
                let n = group.iter().filter(|&&x| x == c).count();
                if n > best.1 {
                    best = (c, n);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ter_definition() {
        assert_eq!(token_error_rate(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[1, 2, 3, 4], &[1, 9, 3, 4]).unwrap(), 0.25);
        assert_eq!(token_error_rate(&[1], &[2, 3, 4]).unwrap(), 3.0);
        assert!(matches!(token_error_rate::<u32>(&[], &[1]), Err(EvalError::EmptyReference)));
    }

    #[test]
    fn content_votes() {
        let v = Vocabulary::default();
        let id = |c, s| v.speech_id(c, s);
        assert_eq!(decode_content(&v, &[id(3, 0), id(3, 5)], 2).unwrap(), vec![3]);
        assert_eq!(decode_content(&v, &[id(3, 0), id(5, 0)], 2).unwrap(), vec![3]);
        assert_eq!(decode_content(&v, &[id(5, 1), id(3, 0), id(3, 2)], 3).unwrap(), vec![3]);
        assert_eq!(decode_content(&v, &[id(1, 1), id(1, 1), id(2, 0)], 2).unwrap(), vec![1, 2]);
        assert!(decode_content(&v, &[0], 2).is_err());
    }
}
