use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            validation,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Argument(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        let total = self.train + self.validation + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

fn quota(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Largest-remainder apportionment of `total` over groups of the given sizes.
/// Remainder ties go to the lower group index; no group receives more than `caps[g]`.
fn apportion(total: usize, sizes: &[usize], caps: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / n as f64)
        .collect();
    let mut out: Vec<usize> = exact
        .iter()
        .zip(caps)
        .map(|(&e, &cap)| ((e + 1e-9).floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(out.iter().sum());
    while left > 0 {
        let mut progressed = false;
        for &g in &order {
            if left == 0 {
                break;
            }
            if out[g] < caps[g] {
                out[g] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Splits a set into (train, validation, test).
///
/// Stratified by label when every item is labelled. Rounding remainders go to
/// train, and each split keeps the original item order.
pub fn split<T: Sample>(set: &Dataset<T>, spec: &SplitSpec) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    if set.is_empty() {
        return Err(Error::Argument("cannot split an empty set".into()));
    }
    let groups: Vec<Vec<usize>> = if set.has_labels() {
        set.positions_by_label()
            .into_iter()
            .filter(|g| !g.is_empty())
            .collect()
    } else {
        vec![(0..set.len()).collect()]
    };
    let n = set.len();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    // keep at least one training item in every group
    let caps: Vec<usize> = sizes.iter().map(|&s| s.saturating_sub(1)).collect();
    let val_counts = apportion(quota(n, spec.validation), &sizes, &caps);
    let caps_after: Vec<usize> = caps.iter().zip(&val_counts).map(|(c, v)| c - v).collect();
    let test_counts = apportion(quota(n, spec.test), &sizes, &caps_after);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut role = vec![0u8; n];
    for (g, members) in groups.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (k, &i) in shuffled.iter().enumerate() {
            role[i] = if k < val_counts[g] {
                1
            } else if k < val_counts[g] + test_counts[g] {
                2
            } else {
                0
            };
        }
    }
    let pick = |r: u8| -> Vec<usize> { (0..n).filter(|&i| role[i] == r).collect() };
    Ok((set.subset(&pick(0)), set.subset(&pick(1)), set.subset(&pick(2))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageGrid, Item, IMAGE_PIXELS};
    use std::collections::BTreeSet;

    fn set(n: usize, classes: Option<usize>) -> Dataset<ImageGrid> {
        let items = (0..n)
            .map(|i| Item {
                id: format!("i{i:03}"),
                data: ImageGrid::zeros(),
                label: classes.map(|c| i % c),
            })
            .collect();
        let names = (0..classes.unwrap_or(0)).map(|c| c.to_string()).collect();
        Dataset::new(items, names, IMAGE_PIXELS).unwrap()
    }

    #[test]
    fn exact_fractions() {
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 3).unwrap();
        let (tr, va, te) = split(&set(100, None), &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let (tr, va, te) = split(&set(100, Some(10)), &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    }

    #[test]
    fn splits_partition_the_ids() {
        let s = set(57, Some(4));
        let spec = SplitSpec::new(0.6, 0.2, 0.2, 11).unwrap();
        let (tr, va, te) = split(&s, &spec).unwrap();
        let mut all = BTreeSet::new();
        for part in [&tr, &va, &te] {
            for id in part.ids() {
                assert!(all.insert(id.to_string()), "id {id} in two splits");
            }
        }
        let orig: BTreeSet<String> = s.ids().into_iter().map(String::from).collect();
        assert_eq!(all, orig);
        assert!((va.len() as i64 - 11).abs() <= 1);
        assert!((te.len() as i64 - 11).abs() <= 1);
    }

    #[test]
    fn every_class_reaches_train() {
        let s = set(100, Some(10));
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 5).unwrap();
        let (tr, _, _) = split(&s, &spec).unwrap();
        let mut tally = vec![0; 10];
        for item in tr.items() {
            tally[item.label.unwrap()] += 1;
        }
        assert_eq!(tally, vec![8; 10]);
    }

    #[test]
    fn deterministic_and_order_stable() {
        let s = set(40, Some(3));
        let spec = SplitSpec::new(0.5, 0.25, 0.25, 9).unwrap();
        let a = split(&s, &spec).unwrap();
        let b = split(&s, &spec).unwrap();
        assert_eq!(a, b);
        let ids = a.0.ids();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn empty_and_bad_fractions() {
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 0).unwrap();
        assert!(matches!(split(&set(0, None), &spec), Err(Error::Argument(_))));
        assert!(SplitSpec::new(0.8, 0.1, 0.2, 0).is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0, 0).is_err());
    }
}
