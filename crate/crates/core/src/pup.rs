//! Prototype refinement from accumulated semantic embeddings.
//!
//! Seen prototypes move towards the epoch mean of their class's embeddings.
//! Each unseen prototype moves towards the average of the means of its `k`
//! most similar seen classes, with similarity taken from `Ẑ·Ẑᵀ`. Both
//! updates are the convex combination `β·old + (1-β)·target`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per seen class running sum and count of embeddings for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingLedger {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl MappingLedger {
    pub fn new(seen_classes: usize, attributes: usize) -> Self {
        MappingLedger {
            sums: vec![vec![0.0; attributes]; seen_classes],
            counts: vec![0; seen_classes],
        }
    }

    pub fn seen_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, class_id: usize, psi: &[f64]) -> Result<()> {
        let seen = self.counts.len();
        let sum = self
            .sums
            .get_mut(class_id)
            .ok_or(Error::NotSeenClass { class_id, seen })?;
        if psi.len() != sum.len() {
            return Err(Error::Config(format!(
                "embedding length {} does not match ledger width {}",
                psi.len(),
                sum.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(psi) {
            *s += v;
        }
        self.counts[class_id] += 1;
        Ok(())
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.counts.get(class_id).copied().unwrap_or(0)
    }

    /// Mean embedding of `class_id`, if it has any records.
    pub fn mean(&self, class_id: usize) -> Option<Vec<f64>> {
        let n = self.count(class_id);
        (n > 0).then(|| self.sums[class_id].iter().map(|s| s / n as f64).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| s.fill(0.0));
        self.counts.fill(0);
    }
}

/// What an unseen prototype is pulled towards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSource {
    /// Epoch means of the neighbours' embeddings.
    #[default]
    EpochMeans,
    /// The neighbours' current (already updated) prototypes.
    SeenPrototypes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    current: Tensor,
    original: Tensor,
    seen_classes: usize,
    beta: f64,
    k_neighbors: usize,
}

impl PrototypeStore {
    pub fn new(prototypes: Tensor, seen_classes: usize, beta: f64, k_neighbors: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        if prototypes.rank() != 2 || seen_classes == 0 || seen_classes > prototypes.rows() {
            return Err(Error::Config(format!(
                "prototype matrix {:?} incompatible with {seen_classes} seen classes",
                prototypes.shape()
            )));
        }
        if k_neighbors == 0 || k_neighbors > seen_classes {
            return Err(Error::Config(format!(
                "k_neighbors must lie in [1, {seen_classes}], got {k_neighbors}"
            )));
        }
        Ok(PrototypeStore {
            original: prototypes.clone(),
            current: prototypes,
            seen_classes,
            beta,
            k_neighbors,
        })
    }

    /// Restores a store with already-updated prototypes.
    pub fn with_current(mut self, current: Tensor) -> Result<Self> {
        if current.shape() != self.original.shape() {
            return Err(Error::Config(format!(
                "current prototypes {:?} do not match original {:?}",
                current.shape(),
                self.original.shape()
            )));
        }
        self.current = current;
        Ok(self)
    }

    pub fn current(&self) -> &Tensor {
        &self.current
    }

    pub fn original(&self) -> &Tensor {
        &self.original
    }

    pub fn seen_classes(&self) -> usize {
        self.seen_classes
    }

    pub fn class_count(&self) -> usize {
        self.current.rows()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    pub fn unseen_mask(&self) -> Vec<bool> {
        (0..self.class_count()).map(|c| c >= self.seen_classes).collect()
    }

    /// Rows `[0, C_s)` of the current prototypes.
    pub fn seen_prototypes(&self) -> Tensor {
        let k = self.current.cols();
        Tensor::matrix(
            self.seen_classes,
            k,
            self.current.data()[..self.seen_classes * k].to_vec(),
        )
        .expect("prefix of a matrix")
    }

    fn blend_row(&mut self, class_id: usize, target: &[f64]) {
        if self.beta == 1.0 {
            return;
        }
        let beta = self.beta;
        for (z, t) in self.current.row_mut(class_id).iter_mut().zip(target) {
            *z = beta * *z + (1.0 - beta) * t;
        }
    }

    /// Pulls each seen prototype towards its class's epoch mean.
    /// Classes without records are skipped. Returns the number updated.
    pub fn update_seen(&mut self, ledger: &MappingLedger) -> usize {
        let mut updated = 0;
        for c in 0..self.seen_classes {
            match ledger.mean(c) {
                Some(mean) => {
                    self.blend_row(c, &mean);
                    updated += 1;
                }
                None => log::warn!("prototype update: seen class {c} has no samples this epoch; skipped"),
            }
        }
        updated
    }

    /// For every unseen class, the `k` seen classes with the largest
    /// prototype dot product, best first. Ties go to the lower class id.
    pub fn semantic_knn(&self) -> Vec<Vec<usize>> {
        let similarity = self
            .current
            .matmul(&self.current.transpose().expect("matrix"))
            .expect("square product");
        (self.seen_classes..self.class_count())
            .map(|u| {
                let row = similarity.row(u);
                let mut candidates: Vec<usize> = (0..self.seen_classes).collect();
                candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                candidates.truncate(self.k_neighbors);
                candidates
            })
            .collect()
    }

    /// Pulls each unseen prototype towards the mean target of its neighbours.
    /// Neighbours without epoch data are dropped from the average.
    pub fn update_unseen(
        &mut self,
        ledger: &MappingLedger,
        neighbors: &[Vec<usize>],
        source: NeighborSource,
    ) -> Result<()> {
        let unseen = self.class_count() - self.seen_classes;
        if neighbors.len() != unseen {
            return Err(Error::Config(format!(
                "expected neighbour lists for {unseen} unseen classes, got {}",
                neighbors.len()
            )));
        }
        let k = self.current.cols();
        let mut targets = Vec::with_capacity(unseen);
        for (i, list) in neighbors.iter().enumerate() {
            let mut acc = vec![0.0; k];
            let mut used = 0usize;
            for &j in list {
                if j >= self.seen_classes {
                    return Err(Error::NotSeenClass {
                        class_id: j,
                        seen: self.seen_classes,
                    });
                }
                let target = match source {
                    NeighborSource::EpochMeans => ledger.mean(j),
                    NeighborSource::SeenPrototypes => Some(self.current.row(j).to_vec()),
                };
                match target {
                    Some(t) => {
                        acc.iter_mut().zip(&t).for_each(|(a, v)| *a += v);
                        used += 1;
                    }
                    None => log::warn!(
                        "prototype update: neighbour {j} of unseen class {} has no samples; dropped",
                        self.seen_classes + i
                    ),
                }
            }
            targets.push((used > 0).then(|| acc.iter().map(|a| a / used as f64).collect::<Vec<_>>()));
        }
        for (i, target) in targets.into_iter().enumerate() {
            if let Some(t) = target {
                self.blend_row(self.seen_classes + i, &t);
            }
        }
        Ok(())
    }

    /// One full refresh: seen update, neighbour search on the updated
    /// prototypes, then the unseen update. Returns the neighbour lists.
    pub fn refresh(&mut self, ledger: &MappingLedger, source: NeighborSource) -> Result<Vec<Vec<usize>>> {
        self.update_seen(ledger);
        let neighbors = self.semantic_knn();
        self.update_unseen(ledger, &neighbors, source)?;
        Ok(neighbors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(rows: &[Vec<f64>], seen: usize, beta: f64, k: usize) -> PrototypeStore {
        PrototypeStore::new(Tensor::from_rows(rows).unwrap(), seen, beta, k).unwrap()
    }

    #[test]
    fn ledger_means() {
        let mut l = MappingLedger::new(2, 2);
        l.record(0, &[1.0, 0.0]).unwrap();
        l.record(0, &[3.0, 2.0]).unwrap();
        assert_eq!(l.mean(0).unwrap(), vec![2.0, 1.0]);
        l.record(1, &[0.5, -0.5]).unwrap();
        assert_eq!(l.mean(1).unwrap(), vec![0.5, -0.5]);
        assert!(matches!(l.record(2, &[0.0, 0.0]), Err(Error::NotSeenClass { class_id: 2, .. })));
        l.reset();
        assert!(l.is_empty() && l.mean(0).is_none());
        for _ in 0..5 {
            l.record(1, &[0.25, 4.0]).unwrap();
        }
        assert_eq!(l.mean(1).unwrap(), vec![0.25, 4.0]);
    }

    #[test]
    fn update_seen_cases() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let mut l = MappingLedger::new(1, 2);
        l.record(0, &[0.0, 1.0]).unwrap();

        let mut s = store(&rows, 1, 1.0, 1);
        s.update_seen(&l);
        assert_eq!(s.current(), s.original());

        let mut s = store(&rows, 1, 0.0, 1);
        s.update_seen(&l);
        assert_eq!(s.current().row(0), &[0.0, 1.0]);

        let mut s = store(&rows, 1, 0.5, 1);
        s.update_seen(&l);
        assert_eq!(s.current().row(0), &[0.5, 0.5]);

        let mut s = store(&rows, 1, 0.5, 1);
        assert_eq!(s.update_seen(&MappingLedger::new(1, 2)), 0);
        assert_eq!(s.current(), s.original());
    }

    #[test]
    fn knn_tie_break_and_exact_match() {
        let eye = Tensor::identity(4);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| eye.row(i).to_vec()).collect();
        let s = store(&rows, 3, 0.5, 1);
        assert_eq!(s.semantic_knn(), vec![vec![0]]);

        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let s = store(&rows, 3, 0.5, 2);
        assert_eq!(s.semantic_knn(), vec![vec![1, 0]]);
    }

    #[test]
    fn update_unseen_cases() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let mut l = MappingLedger::new(2, 2);
        l.record(0, &[1.0, 0.0]).unwrap();
        l.record(1, &[0.0, 1.0]).unwrap();

        let mut s = store(&rows, 2, 0.5, 2);
        s.update_unseen(&l, &[vec![0, 1]], NeighborSource::EpochMeans).unwrap();
        assert_eq!(s.current().row(2), &[0.25, 0.25]);

        let mut s = store(&rows, 2, 0.0, 1);
        s.update_unseen(&l, &[vec![1]], NeighborSource::EpochMeans).unwrap();
        assert_eq!(s.current().row(2), &[0.0, 1.0]);

        let mut s = store(&rows, 2, 1.0, 2);
        s.update_unseen(&l, &[vec![0, 1]], NeighborSource::EpochMeans).unwrap();
        assert_eq!(s.current(), s.original());
    }

    #[test]
    fn neighbour_without_data_is_dropped() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let mut l = MappingLedger::new(2, 2);
        l.record(1, &[0.0, 2.0]).unwrap();
        let mut s = store(&rows, 2, 0.0, 2);
        s.update_unseen(&l, &[vec![0, 1]], NeighborSource::EpochMeans).unwrap();
        assert_eq!(s.current().row(2), &[0.0, 2.0]);
    }

    #[test]
    fn seen_prototype_source_uses_current_rows() {
        let rows = vec![vec![2.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]];
        let mut s = store(&rows, 2, 0.5, 2);
        s.update_unseen(&MappingLedger::new(2, 2), &[vec![0, 1]], NeighborSource::SeenPrototypes)
            .unwrap();
        assert_eq!(s.current().row(2), &[0.5, 1.0]);
    }

    #[test]
    fn invalid_store_parameters() {
        let z = Tensor::identity(3);
        assert!(PrototypeStore::new(z.clone(), 2, 1.5, 1).is_err());
        assert!(PrototypeStore::new(z.clone(), 2, 0.5, 3).is_err());
        assert!(PrototypeStore::new(z.clone(), 2, 0.5, 0).is_err());
        let mut s = PrototypeStore::new(z, 2, 0.5, 1).unwrap();
        let l = MappingLedger::new(2, 3);
        assert!(s.update_unseen(&l, &[vec![2]], NeighborSource::EpochMeans).is_err());
        assert!(s.update_unseen(&l, &[], NeighborSource::EpochMeans).is_err());
    }
}
