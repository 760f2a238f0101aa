use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{ArosError, Result};
use crate::seed::rng_from;

/// Stratified split into `(first, second)` with `fraction` of the samples in
/// `first`.
///
/// The total size of `first` is `round(fraction · n)`, distributed across
/// classes by largest remainder (ties to the lower class id), with at least
/// one sample of every class on each side.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ArosError::contract(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(ArosError::TooFewSamples {
                class,
                count: members.len(),
            });
        }
    }

    let target = (fraction * data.len() as f64).round() as usize;
    let ideal: Vec<f64> = by_class.iter().map(|m| fraction * m.len() as f64).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..take.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = take.iter().sum();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        if take[c] + 1 < by_class[c].len() {
            take[c] += 1;
            assigned += 1;
        }
    }
    for (c, t) in take.iter_mut().enumerate() {
        *t = (*t).clamp(1, by_class[c].len() - 1);
    }

    let mut rng = rng_from(seed);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (members, &t) in by_class.iter_mut().zip(&take) {
        members.shuffle(&mut rng);
        first.extend_from_slice(&members[..t]);
        second.extend_from_slice(&members[t..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((data.subset(&first), data.subset(&second)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{gen_two_moons, Domain};
    use crate::tensor::Tensor;

    fn toy(n_per_class: usize) -> Dataset {
        let n = 2 * n_per_class;
        let data = (0..2 * n).map(|v| v as f64).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(Tensor::matrix(n, 2, data).unwrap(), labels, 2, Domain::Synthetic2d).unwrap()
    }

    #[test]
    fn half_split_of_ten() {
        let (a, b) = split(&toy(5), 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        for part in [&a, &b] {
            let c = part.class_counts();
            assert!(c[0].abs_diff(c[1]) <= 1, "{c:?}");
        }
    }

    #[test]
    fn union_is_input() {
        let ds = gen_two_moons(37, 0.1, 2).unwrap();
        let (a, b) = split(&ds, 0.3, 5).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..a.len())
            .map(|i| a.inputs.row(i).iter().map(|v| v.to_bits()).collect())
            .chain((0..b.len()).map(|i| b.inputs.row(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..ds.len())
            .map(|i| ds.inputs.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert_eq!(a.len() + b.len(), ds.len());
    }

    #[test]
    fn deterministic() {
        let ds = gen_two_moons(40, 0.1, 2).unwrap();
        assert_eq!(split(&ds, 0.25, 8).unwrap(), split(&ds, 0.25, 8).unwrap());
    }

    #[test]
    fn singleton_class_fails() {
        let ds = Dataset::new(
            Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap(),
            vec![0, 0, 1],
            2,
            Domain::Synthetic2d,
        )
        .unwrap();
        assert!(matches!(
            split(&ds, 0.5, 0),
            Err(ArosError::TooFewSamples { class: 1, count: 1 })
        ));
    }
}
