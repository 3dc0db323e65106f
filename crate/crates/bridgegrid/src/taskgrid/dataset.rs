//! Partitioned in-memory record collections handed to worker stages.

use super::TaskError;

/// An immutable collection of byte records split into a fixed number of
/// partitions at creation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    partitions: Vec<Vec<Vec<u8>>>,
}

impl Dataset {
    /// Round-robin assignment of records to `num_partitions` partitions,
    /// preserving record order within each partition.
    pub fn parallelize(records: Vec<Vec<u8>>, num_partitions: usize) -> Result<Dataset, TaskError> {
        if num_partitions == 0 {
            return Err(TaskError::InvalidArgument(
                "num_partitions must be at least 1".into(),
            ));
        }
        let mut partitions = vec![Vec::new(); num_partitions];
        for (i, record) in records.into_iter().enumerate() {
            partitions[i % num_partitions].push(record);
        }
        Ok(Dataset { partitions })
    }

    pub fn from_partitions(partitions: Vec<Vec<Vec<u8>>>) -> Dataset {
        Dataset { partitions }
    }

    /// Empty partitions, one per worker; used by stages whose input comes
    /// from elsewhere (files, the rendezvous space).
    pub fn empty(num_partitions: usize) -> Dataset {
        Dataset {
            partitions: vec![Vec::new(); num_partitions],
        }
    }

    /// The partitions of `self` followed by the partitions of `other`.
    pub fn union(&self, other: &Dataset) -> Dataset {
        let mut partitions = self.partitions.clone();
        partitions.extend(other.partitions.iter().cloned());
        Dataset { partitions }
    }

    pub fn partitions(&self) -> &[Vec<Vec<u8>>] {
        &self.partitions
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn total_records(&self) -> usize {
        self.partitions.iter().map(|p| p.len()).sum()
    }

    /// All records in partition order.
    pub fn collect(&self) -> Vec<Vec<u8>> {
        self.partitions.iter().flatten().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| vec![i as u8]).collect()
    }

    #[test]
    fn parallelize_balances_round_robin() {
        let d = Dataset::parallelize(records(6), 3).unwrap();
        assert_eq!(
            d.partitions().iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 2, 2]
        );
        let d = Dataset::parallelize(records(5), 3).unwrap();
        assert_eq!(
            d.partitions().iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        // Stable order within partitions.
        assert_eq!(d.partitions()[0], vec![vec![0u8], vec![3u8]]);
        let d = Dataset::parallelize(Vec::new(), 4).unwrap();
        assert!(d.partitions().iter().all(Vec::is_empty));
        assert!(Dataset::parallelize(records(1), 0).is_err());
    }

    #[test]
    fn union_appends_partitions_in_order() {
        let a = Dataset::parallelize(records(4), 2).unwrap();
        let b = Dataset::parallelize(records(3), 1).unwrap();
        let u = a.union(&b);
        assert_eq!(u.num_partitions(), 3);
        assert_eq!(u.total_records(), 7);
        assert_eq!(u.collect()[..4], a.collect()[..]);
        // Union with an empty dataset only renumbers partitions.
        let e = Dataset::empty(0);
        assert_eq!(e.union(&a).collect(), a.collect());
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Round-robin invariants: partition count fixed, records
        // conserved, order stable under collect-after-union.
        #[test]
        fn parallelize_conserves_and_balances(
            n_records in 0usize..64,
            n_parts in 1usize..9,
        ) {
            let records: Vec<Vec<u8>> = (0..n_records).map(|i| vec![i as u8]).collect();
            let d = Dataset::parallelize(records.clone(), n_parts).unwrap();
            prop_assert_eq!(d.num_partitions(), n_parts);
            prop_assert_eq!(d.total_records(), n_records);
            let sizes: Vec<usize> = d.partitions().iter().map(Vec::len).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1, "round robin stays balanced");
            let mut seen: Vec<Vec<u8>> = d.collect();
            seen.sort();
            let mut want = records;
            want.sort();
            prop_assert_eq!(seen, want);
        }

        #[test]
        fn union_preserves_partition_order(
            a in 0usize..32,
            b in 0usize..32,
        ) {
            let da = Dataset::parallelize((0..a).map(|i| vec![i as u8]).collect(), 2).unwrap();
            let db = Dataset::parallelize((0..b).map(|i| vec![i as u8, 1]).collect(), 3).unwrap();
            let u = da.union(&db);
            prop_assert_eq!(u.num_partitions(), 5);
            let mut expect = da.collect();
            expect.extend(db.collect());
            prop_assert_eq!(u.collect(), expect);
        }
    }
}
