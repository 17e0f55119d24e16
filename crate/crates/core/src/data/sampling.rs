use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{DataError, Manifest, Result, SampleRecord, Task};
use crate::seed;

/// Keep every minority-class record and an equal number of majority records
/// drawn without replacement; records unlabeled for `task` are dropped.
pub fn balance_binary<R: Rng + ?Sized>(manifest: &Manifest, task: Task, rng: &mut R) -> Result<Manifest> {
    let names = task.class_names();
    let by_class: [Vec<&SampleRecord>; 2] =
        [0, 1].map(|c| manifest.records.iter().filter(|r| r.label(task) == Some(c)).collect());
    for (c, recs) in by_class.iter().enumerate() {
        if recs.is_empty() {
            return Err(DataError::EmptyClass(names[c].to_string()));
        }
    }
    let (minority, majority) =
        if by_class[0].len() <= by_class[1].len() { (&by_class[0], &by_class[1]) } else { (&by_class[1], &by_class[0]) };
    let mut out: Vec<SampleRecord> = minority.iter().map(|r| (*r).clone()).collect();
    out.extend(majority.choose_multiple(rng, minority.len()).map(|r| (*r).clone()));
    out.shuffle(rng);
    Ok(Manifest { records: out, root: manifest.root.clone() })
}

/// Largest-remainder allocation of `total` across groups proportional to
/// `fraction · size`.
fn allocate(sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut alloc: Vec<usize> = exact.iter().zip(sizes).map(|(e, &s)| (e.floor() as usize).min(s)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = total.saturating_sub(alloc.iter().sum());
    while missing > 0 {
        let before = missing;
        for &g in &order {
            if missing > 0 && alloc[g] < sizes[g] {
                alloc[g] += 1;
                missing -= 1;
            }
        }
        if before == missing {
            break;
        }
    }
    alloc
}

/// Seeded random train/test split; `n_train = round(fraction · n)`, kept
/// within `1..n`. With `stratify`, each class of that task is split in the
/// same proportion (unlabeled records form their own group).
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64, stratify: Option<Task>) -> Result<(Manifest, Manifest)> {
    let n = manifest.len();
    if n < 2 {
        return Err(DataError::TooFewRecords(n));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let key = |r: &SampleRecord| stratify.and_then(|t| r.label(t)).map_or(2, |l| l);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for (i, r) in manifest.records.iter().enumerate() {
        groups[key(r)].push(i);
    }
    let mut rng = seed::rng(seed, "split");
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let alloc = allocate(&sizes, n_train as f64 / n as f64, n_train);
    let mut train_idx = Vec::with_capacity(n_train);
    let mut test_idx = Vec::with_capacity(n - n_train);
    for (g, k) in groups.iter().zip(&alloc) {
        train_idx.extend_from_slice(&g[..*k]);
        test_idx.extend_from_slice(&g[*k..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| Manifest {
        records: idx.iter().map(|&i| manifest.records[i].clone()).collect(),
        root: manifest.root.clone(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn records(pos: usize, neg: usize) -> Manifest {
        let mk = |i: usize, s: bool| SampleRecord {
            path: format!("{i}.wav"),
            dataset: Dataset::Asvp,
            is_scream: Some(s),
            valence: None,
            speaker: None,
        };
        Manifest::new((0..pos).map(|i| mk(i, true)).chain((pos..pos + neg).map(|i| mk(i, false))).collect(), "")
    }

    #[test]
    fn balance_published_counts() {
        let m = records(1170, 11_455);
        let b = balance_binary(&m, Task::Detect, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 2340);
        assert_eq!(b.records.iter().filter(|r| r.is_scream == Some(true)).count(), 1170);
        let (train, test) = split(&b, 0.8, 0, Some(Task::Detect)).unwrap();
        assert_eq!((train.len(), test.len()), (1872, 468));
    }

    #[test]
    fn balance_is_symmetric_and_keeps_balanced_sets() {
        let m = records(30, 5);
        let b = balance_binary(&m, Task::Detect, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.records.iter().filter(|r| r.is_scream == Some(false)).count(), 5);
        let even = records(4, 4);
        let b = balance_binary(&even, Task::Detect, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut a: Vec<_> = b.records.iter().map(|r| r.path.clone()).collect();
        let mut e: Vec<_> = even.records.iter().map(|r| r.path.clone()).collect();
        a.sort();
        e.sort();
        assert_eq!(a, e);
        assert!(matches!(balance_binary(&records(3, 0), Task::Detect, &mut ChaCha8Rng::seed_from_u64(1)), Err(DataError::EmptyClass(_))));
    }

    #[test]
    fn split_errors_and_stratification() {
        assert!(matches!(split(&records(1, 0), 0.8, 0, None), Err(DataError::TooFewRecords(1))));
        let (train, test) = split(&records(10, 10), 0.8, 3, Some(Task::Detect)).unwrap();
        assert_eq!(train.records.iter().filter(|r| r.is_scream == Some(true)).count(), 8);
        assert_eq!(test.len(), 4);
        let (a, _) = split(&records(2, 0), 0.99, 0, None).unwrap();
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn allocation_sums() {
        assert_eq!(allocate(&[5, 5, 0], 0.5, 5), vec![3, 2, 0]);
        assert_eq!(allocate(&[1170, 1170, 0], 0.8, 1872), vec![936, 936, 0]);
    }
}
