//! Structured triplet input: epoch partitioning into (anchor, positive,
//! negative) triples and batch assembly in triple-major layout.
//!
//! Each epoch partitions the dataset so every image is used at most once:
//! per class, shuffled images pair up as (anchor, positive); negatives are
//! drawn from other classes' unpaired leftovers, dismantling surplus pairs
//! of other classes when the leftovers run out. Whatever cannot be matched
//! is dropped and counted.

use crate::data::augment::Augmentor;
use crate::data::dataset::LabeledDataset;
use crate::error::{Result, TorsdError};
use crate::tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// One (anchor, positive, negative) index triple.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// An epoch's triplet partition plus the count of images left unused.
#[derive(Clone, Debug)]
pub struct EpochSample {
    pub triplets: Vec<TripletIndex>,
    pub dropped: usize,
}

/// Partitions the dataset into disjoint triplets for one epoch.
///
/// Every returned index appears in exactly one triplet in exactly one
/// role; anchors share their positive's label and differ from their
/// negative's. `dropped` counts images stranded by the size remainder or
/// by class structure. The triplet order is shuffled by `rng`.
pub fn sample_epoch_triplets(
    dataset: &LabeledDataset,
    rng: &mut ChaCha8Rng,
) -> Result<EpochSample> {
    if dataset.len() < 3 {
        return Err(TorsdError::SamplingInfeasible(format!(
            "need at least 3 images to form a triplet, have {}",
            dataset.len()
        )));
    }
    let counts = dataset.class_counts();
    if counts.iter().filter(|c| **c > 0).count() < 2 {
        return Err(TorsdError::SamplingInfeasible(
            "all images share one class; no valid negative exists".into(),
        ));
    }

    // Shuffled per-class index lists.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in 0..dataset.len() {
        by_class[dataset.label(i)].push(i);
    }
    for list in &mut by_class {
        list.shuffle(rng);
    }

    // Consecutive images pair as (anchor, positive); odd ones start in the
    // negatives pool.
    let mut pairs: Vec<Vec<(usize, usize)>> = Vec::with_capacity(dataset.num_classes);
    let mut pool: Vec<VecDeque<usize>> = vec![VecDeque::new(); dataset.num_classes];
    for (class, list) in by_class.iter().enumerate() {
        let mut p = Vec::with_capacity(list.len() / 2);
        for chunk in list.chunks(2) {
            if chunk.len() == 2 {
                p.push((chunk[0], chunk[1]));
            } else {
                pool[class].push_back(chunk[0]);
            }
        }
        pairs.push(p);
    }

    // Serve pairs round-robin, always from the class with the most pairs
    // left, so donor classes stay alive until the end. Negatives come from
    // the largest other-class leftover queue, dismantling a pair of the
    // other class with the most remaining when the queues run dry. Every
    // choice depends only on the class-count state, so the triplet count
    // is the same for every epoch of a given dataset.
    // Cursors into each class's pair list: [next, end) are still alive.
    let mut next: Vec<usize> = vec![0; dataset.num_classes];
    let mut end: Vec<usize> = pairs.iter().map(|p| p.len()).collect();

    let mut triplets = Vec::new();
    loop {
        let Some(class) = (0..dataset.num_classes)
            .filter(|c| next[*c] < end[*c])
            .max_by_key(|c| (end[*c] - next[*c], usize::MAX - *c))
        else {
            break;
        };
        let (anchor, positive) = pairs[class][next[class]];
        next[class] += 1;

        let negative = loop {
            let donor = (0..dataset.num_classes)
                .filter(|c| *c != class && !pool[*c].is_empty())
                .max_by_key(|c| (pool[*c].len(), usize::MAX - *c));
            if let Some(c) = donor {
                break Some(pool[c].pop_front().expect("donor queue non-empty"));
            }
            // Dismantle the tail pair of the other class with the most
            // pairs remaining.
            let victim = (0..dataset.num_classes)
                .filter(|c| *c != class && next[*c] < end[*c])
                .max_by_key(|c| (end[*c] - next[*c], usize::MAX - *c));
            match victim {
                Some(c) => {
                    end[c] -= 1;
                    let (a, b) = pairs[c][end[c]];
                    pool[c].push_back(a);
                    pool[c].push_back(b);
                }
                None => break None, // unmatchable: this pair is dropped
            }
        };
        if let Some(negative) = negative {
            triplets.push(TripletIndex {
                anchor,
                positive,
                negative,
            });
        }
    }

    triplets.shuffle(rng);
    let dropped = dataset.len() - 3 * triplets.len();
    Ok(EpochSample { triplets, dropped })
}

/// A batch of triplets in triple-major layout: `images` is
/// `[3T, C, H, W]` ordered `a0, p0, n0, a1, p1, n1, ...` so each role is a
/// stride-3 view.
#[derive(Clone, Debug)]
pub struct TripletBatch<E: Element> {
    pub images: Tensor<E>,
    pub y_o: Vec<usize>,
    pub y_p: Vec<usize>,
    pub y_n: Vec<usize>,
}

impl<E: Element> TripletBatch<E> {
    pub fn n_triplets(&self) -> usize {
        self.y_o.len()
    }

    /// Checks the batch invariants: triple-major leading dim, matching
    /// anchor/positive labels, differing negative labels.
    pub fn validate(&self) -> Result<()> {
        let n = self.images.shape()[0];
        if n % 3 != 0 || n / 3 != self.y_o.len() {
            return Err(TorsdError::shape(
                format!("3*{} images", self.y_o.len()),
                format!("{}", n),
            ));
        }
        for t in 0..self.y_o.len() {
            if self.y_o[t] != self.y_p[t] {
                return Err(TorsdError::InvalidTriplet(format!(
                    "triplet {}: anchor label {} != positive label {}",
                    t, self.y_o[t], self.y_p[t]
                )));
            }
            if self.y_o[t] == self.y_n[t] {
                return Err(TorsdError::InvalidTriplet(format!(
                    "triplet {}: negative shares anchor label {}",
                    t, self.y_o[t]
                )));
            }
        }
        Ok(())
    }
}

/// Streams [`TripletBatch`]es of at most `batch_size` images, never
/// splitting a triplet; the final batch may be smaller.
pub struct TripletBatcher<'a, E: Element> {
    dataset: &'a LabeledDataset,
    triplets: &'a [TripletIndex],
    per_batch: usize,
    cursor: usize,
    augmentor: &'a Augmentor,
    training: bool,
    rng: ChaCha8Rng,
    _marker: std::marker::PhantomData<E>,
}

/// Builds the batch stream for an epoch. `batch_size` counts images and
/// must be a positive multiple of 3; augmentation runs only when
/// `training` is set, drawing from `rng`.
pub fn assemble_batches<'a, E: Element>(
    triplets: &'a [TripletIndex],
    dataset: &'a LabeledDataset,
    batch_size: usize,
    augmentor: &'a Augmentor,
    training: bool,
    rng: ChaCha8Rng,
) -> Result<TripletBatcher<'a, E>> {
    if batch_size == 0 || batch_size % 3 != 0 {
        return Err(TorsdError::config(
            "batch_size",
            format!("must be a positive multiple of 3, got {}", batch_size),
        ));
    }
    Ok(TripletBatcher {
        dataset,
        triplets,
        per_batch: batch_size / 3,
        cursor: 0,
        augmentor,
        training,
        rng,
        _marker: std::marker::PhantomData,
    })
}

impl<E: Element> TripletBatcher<'_, E> {
    fn build_batch(&mut self, chunk: &[TripletIndex]) -> Result<TripletBatch<E>> {
        let ds = self.dataset;
        let (h, w, c) = (ds.h, ds.w, ds.c);
        let mut images = Tensor::zeros(&[3 * chunk.len(), c, h, w]);
        let mut y_o = Vec::with_capacity(chunk.len());
        let mut y_p = Vec::with_capacity(chunk.len());
        let mut y_n = Vec::with_capacity(chunk.len());
        for (t, tri) in chunk.iter().enumerate() {
            for (role, idx) in [tri.anchor, tri.positive, tri.negative].into_iter().enumerate() {
                let hwc = self
                    .augmentor
                    .augment(ds.image(idx), self.training, &mut self.rng)?;
                let row = 3 * t + role;
                let dst = images.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            dst[((row * c + ch) * h + y) * w + x] =
                                E::from_f64(hwc[(y * w + x) * c + ch] as f64);
                        }
                    }
                }
            }
            y_o.push(ds.label(tri.anchor));
            y_p.push(ds.label(tri.positive));
            y_n.push(ds.label(tri.negative));
        }
        Ok(TripletBatch {
            images,
            y_o,
            y_p,
            y_n,
        })
    }
}

impl<E: Element> Iterator for TripletBatcher<'_, E> {
    type Item = Result<TripletBatch<E>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.triplets.len() {
            return None;
        }
        let hi = (self.cursor + self.per_batch).min(self.triplets.len());
        let chunk = &self.triplets[self.cursor..hi];
        self.cursor = hi;
        Some(self.build_batch(&chunk.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::make_synthetic;
    use crate::data::dataset::LabeledDataset;
    use rand::SeedableRng;

    fn tiny_dataset(labels: &[u32], num_classes: usize) -> LabeledDataset {
        let px = vec![0.5f32; labels.len() * 4];
        LabeledDataset::new(px, labels.to_vec(), 2, 2, 1, num_classes).unwrap()
    }

    /// Partition validity: disjoint indices, label constraints, usage
    /// accounting.
    fn check_partition(ds: &LabeledDataset, sample: &EpochSample) {
        let mut seen = vec![false; ds.len()];
        for t in &sample.triplets {
            for idx in [t.anchor, t.positive, t.negative] {
                assert!(!seen[idx], "index {} reused", idx);
                seen[idx] = true;
            }
            assert_eq!(ds.label(t.anchor), ds.label(t.positive));
            assert_ne!(ds.label(t.anchor), ds.label(t.negative));
            assert_ne!(t.anchor, t.positive);
        }
        assert_eq!(sample.triplets.len() * 3 + sample.dropped, ds.len());
    }

    #[test]
    fn six_images_two_balanced_classes_use_everything() {
        let ds = tiny_dataset(&[0, 0, 0, 1, 1, 1], 2);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_epoch_triplets(&ds, &mut rng).unwrap();
            assert_eq!(s.triplets.len(), 2);
            assert_eq!(s.dropped, 0);
            check_partition(&ds, &s);
        }
    }

    #[test]
    fn seven_images_4_3_drop_exactly_one() {
        let ds = tiny_dataset(&[0, 0, 0, 0, 1, 1, 1], 2);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_epoch_triplets(&ds, &mut rng).unwrap();
            assert_eq!(s.triplets.len(), 2, "seed {}", seed);
            assert_eq!(s.dropped, 1);
            check_partition(&ds, &s);
        }
    }

    #[test]
    fn single_class_is_infeasible() {
        let base = make_synthetic(2, 4, 2, 2, 1, 0.1, 0);
        let err = base.subset_classes(&[0]).unwrap_err();
        assert!(matches!(err, TorsdError::SamplingInfeasible(_)));
    }

    #[test]
    fn fewer_than_three_images_is_infeasible() {
        // Two images cannot host both a positive pair and a negative; the
        // invariant check fires at construction.
        let err = LabeledDataset::new(vec![0.5f32; 8], vec![0, 1], 2, 2, 1, 2).unwrap_err();
        assert!(matches!(err, TorsdError::SamplingInfeasible(_)));
    }

    #[test]
    fn seed_determinism_and_epoch_variation() {
        let ds = make_synthetic(5, 20, 2, 2, 1, 0.1, 0);
        let a = sample_epoch_triplets(&ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_epoch_triplets(&ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.triplets, b.triplets);
        let c = sample_epoch_triplets(&ds, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.triplets, c.triplets, "different seeds should differ");
    }

    #[test]
    fn imbalanced_classes_still_partition_validly() {
        for (counts, seed) in [(vec![5usize, 1], 0u64), (vec![9, 2, 1], 1), (vec![2, 2, 2], 2)] {
            let mut labels = Vec::new();
            for (cls, n) in counts.iter().enumerate() {
                labels.extend(std::iter::repeat(cls as u32).take(*n));
            }
            let ds = tiny_dataset(&labels, counts.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_epoch_triplets(&ds, &mut rng).unwrap();
            check_partition(&ds, &s);
            assert!(!s.triplets.is_empty());
        }
    }

    #[test]
    fn batches_never_split_triplets() {
        let ds = make_synthetic(3, 31, 4, 4, 1, 0.1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = sample_epoch_triplets(&ds, &mut rng).unwrap();
        // 93 images could host 31 triplets; the greedy keeps 30 of them.
        assert_eq!(sample.triplets.len(), 30);
        assert_eq!(sample.dropped, 3);
        let aug = Augmentor::identity(4, 4, 1);
        let batches: Vec<_> = assemble_batches::<f32>(
            &sample.triplets,
            &ds,
            27,
            &aug,
            false,
            ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        .collect::<Result<_>>()
        .unwrap();
        assert_eq!(batches.len(), 4);
        assert_eq!(batches[0].images.shape()[0], 27);
        assert_eq!(batches[3].images.shape()[0], 9);
        for b in &batches {
            b.validate().unwrap();
        }
    }

    #[test]
    fn batch_size_must_be_multiple_of_three() {
        let ds = tiny_dataset(&[0, 0, 1, 1], 2);
        let aug = Augmentor::identity(2, 2, 1);
        let err = assemble_batches::<f32>(&[], &ds, 4, &aug, false, ChaCha8Rng::seed_from_u64(0))
            .err()
            .unwrap();
        assert!(matches!(err, TorsdError::ConfigValidation { .. }));
    }

    #[test]
    fn triple_major_layout_roles() {
        // Distinct constant images per sample expose the layout.
        let mut px = Vec::new();
        for i in 0..6 {
            px.extend(std::iter::repeat(i as f32 / 10.0).take(4));
        }
        let ds = LabeledDataset::new(px, vec![0, 0, 0, 1, 1, 1], 2, 2, 1, 2).unwrap();
        let tri = vec![
            TripletIndex { anchor: 0, positive: 1, negative: 3 },
            TripletIndex { anchor: 4, positive: 5, negative: 2 },
        ];
        let aug = Augmentor::identity(2, 2, 1);
        let batch = assemble_batches::<f64>(&tri, &ds, 6, &aug, false, ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        batch.validate().unwrap();
        let img = |row: usize| batch.images.data()[row * 4];
        let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
        assert!(close(img(0), 0.0)); // a0 = sample 0
        assert!(close(img(1), 0.1)); // p0 = sample 1
        assert!(close(img(2), 0.3)); // n0 = sample 3
        assert!(close(img(3), 0.4)); // a1 = sample 4
        assert!(close(img(5), 0.2)); // n1 = sample 2
        assert_eq!(batch.y_o, vec![0, 1]);
        assert_eq!(batch.y_n, vec![1, 0]);
    }
}
