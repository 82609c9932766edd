use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Groups samples of similar length so that each batch's padded size
/// (`count × longest`) stays within `token_budget`. Every index appears in
/// exactly one batch; batch order (and tie order among equal lengths) is
/// shuffled by `seed`.
pub fn batch_plan(
    ids: &[String],
    lengths: &[usize],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    assert_eq!(ids.len(), lengths.len());
    if let Some(i) = lengths.iter().position(|&l| l > token_budget) {
        return Err(TrainError::SampleTooLong {
            id: ids[i].clone(),
            len: lengths[i],
            budget: token_budget,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        // sorted ascending, so the newcomer is the longest member
        if !current.is_empty() && (current.len() + 1) * lengths[i] > token_budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn budget_forces_grouping() {
        let mut plan = batch_plan(&ids(3), &[10, 50, 10], 60, 1).unwrap();
        plan.iter_mut().for_each(|b| b.sort());
        plan.sort();
        assert_eq!(plan, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn overlong_sample_named() {
        match batch_plan(&ids(2), &[10, 70], 60, 0) {
            Err(TrainError::SampleTooLong { id, .. }) => assert_eq!(id, "s1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeds_permute_but_preserve_membership() {
        let lengths: Vec<usize> = (0..200).map(|i| 20 + (i * 37) % 40).collect();
        let a = batch_plan(&ids(200), &lengths, 400, 1).unwrap();
        let b = batch_plan(&ids(200), &lengths, 400, 2).unwrap();
        assert_ne!(a, b);
        for plan in [&a, &b] {
            let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            for batch in plan.iter() {
                let longest = batch.iter().map(|&i| lengths[i]).max().unwrap();
                assert!(batch.len() * longest <= 400);
            }
        }
    }
}
