use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledBatch, TrainingData, TripletBatch, UnlabeledBatch};
use crate::error::{FeverError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub triplets: usize,
    pub labeled: usize,
    /// Zero disables the unlabeled stream.
    pub unlabeled: usize,
}

/// Serializable position of one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub order: Vec<u64>,
    pub pos: u64,
    pub passes: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub streams: Vec<StreamState>,
    pub epoch: u64,
}

/// One shuffled pass over `0..n`, reshuffled when exhausted.
#[derive(Clone, Debug)]
struct Stream {
    order: Vec<usize>,
    pos: usize,
    passes: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(n: usize, seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Stream {
            order,
            pos: 0,
            passes: 0,
            rng,
        }
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
        self.passes += 1;
    }

    /// Background-loop draw: wraps and reshuffles mid-batch when needed.
    fn take_wrapping(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }

    fn state(&self) -> StreamState {
        StreamState {
            order: self.order.iter().map(|&i| i as u64).collect(),
            pos: self.pos as u64,
            passes: self.passes,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    fn restore(s: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(s.rng_seed);
        rng.set_stream(s.rng_stream);
        rng.set_word_pos(s.rng_word_pos);
        Stream {
            order: s.order.iter().map(|&i| i as usize).collect(),
            pos: s.pos as usize,
            passes: s.passes,
            rng,
        }
    }
}

/// Batches drawn for one optimizer step.
#[derive(Clone, Debug)]
pub struct Draw {
    pub triplets: TripletBatch,
    pub labeled: LabeledBatch,
    pub unlabeled: UnlabeledBatch,
    /// Epoch this batch belongs to (0-based).
    pub epoch: u64,
    /// The triplet stream has no further batch in this epoch.
    pub end_of_epoch: bool,
}

/// Three-stream sampler. The triplet stream defines epochs; the labeled and
/// unlabeled streams loop in the background, reshuffling after every pass.
#[derive(Clone, Debug)]
pub struct StreamSampler {
    sizes: BatchSizes,
    drop_last: bool,
    triplets: Stream,
    labeled: Stream,
    unlabeled: Stream,
    epoch: u64,
}

impl StreamSampler {
    pub fn new(data: &TrainingData, sizes: BatchSizes, drop_last: bool, seed: u64) -> Result<Self> {
        if sizes.triplets == 0 || sizes.labeled == 0 {
            return Err(FeverError::InvalidArgument(
                "triplet and labeled batch sizes must be positive".into(),
            ));
        }
        if sizes.triplets > data.triplets.len() {
            return Err(FeverError::InvalidArgument(format!(
                "triplet batch {} exceeds dataset size {}",
                sizes.triplets,
                data.triplets.len()
            )));
        }
        if data.labeled.is_empty() {
            return Err(FeverError::Data("labeled stream is empty".into()));
        }
        if sizes.unlabeled > 0 && data.unlabeled.is_empty() {
            return Err(FeverError::Data("unlabeled batches requested from an empty stream".into()));
        }
        Ok(StreamSampler {
            sizes,
            drop_last,
            triplets: Stream::new(data.triplets.len(), seed, 0),
            labeled: Stream::new(data.labeled.len(), seed, 1),
            unlabeled: Stream::new(data.unlabeled.len(), seed, 2),
            epoch: 0,
        })
    }

    pub fn sizes(&self) -> BatchSizes {
        self.sizes
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Optimizer steps in one pass over the triplet stream.
    pub fn steps_per_epoch(&self) -> usize {
        let n = self.triplets.order.len();
        if self.drop_last {
            n / self.sizes.triplets
        } else {
            n.div_ceil(self.sizes.triplets)
        }
    }

    fn triplets_exhausted(&self) -> bool {
        let left = self.triplets.order.len() - self.triplets.pos;
        if self.drop_last {
            left < self.sizes.triplets
        } else {
            left == 0
        }
    }

    /// Index-level draw; [`StreamSampler::next_batches`] materialises images.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>, Vec<usize>, u64, bool) {
        if self.triplets_exhausted() {
            self.triplets.reshuffle();
            self.epoch += 1;
        }
        let t = &mut self.triplets;
        let take = self.sizes.triplets.min(t.order.len() - t.pos);
        let tri = t.order[t.pos..t.pos + take].to_vec();
        t.pos += take;
        let epoch = self.epoch;
        let end = self.triplets_exhausted();
        let lab = self.labeled.take_wrapping(self.sizes.labeled);
        let unl = if self.sizes.unlabeled > 0 {
            self.unlabeled.take_wrapping(self.sizes.unlabeled)
        } else {
            Vec::new()
        };
        (tri, lab, unl, epoch, end)
    }

    pub fn next_batches(&mut self, data: &TrainingData) -> Result<Draw> {
        if data.triplets.len() != self.triplets.order.len() || data.labeled.len() != self.labeled.order.len() {
            return Err(FeverError::Invariant("sampler was built for different datasets".into()));
        }
        let (tri, lab, unl, epoch, end_of_epoch) = self.next_indices();
        Ok(Draw {
            triplets: TripletBatch {
                images: data.triplets.images(&tri),
                pairs: tri.iter().map(|&i| data.triplets.pairs[i]).collect(),
            },
            labeled: LabeledBatch {
                images: data.labeled.images(&lab),
                labels: lab.iter().map(|&i| data.labeled.labels[i]).collect(),
            },
            unlabeled: UnlabeledBatch {
                images: data.unlabeled.images(&unl),
            },
            epoch,
            end_of_epoch,
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            streams: vec![self.triplets.state(), self.labeled.state(), self.unlabeled.state()],
            epoch: self.epoch,
        }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<()> {
        if state.streams.len() != 3 {
            return Err(FeverError::Checkpoint("sampler state needs three streams".into()));
        }
        let lens = [
            self.triplets.order.len(),
            self.labeled.order.len(),
            self.unlabeled.order.len(),
        ];
        for (s, &n) in state.streams.iter().zip(&lens) {
            if s.order.len() != n || s.pos as usize > n {
                return Err(FeverError::Checkpoint(format!(
                    "sampler stream of length {} does not match dataset of {n}",
                    s.order.len()
                )));
            }
        }
        self.triplets = Stream::restore(&state.streams[0]);
        self.labeled = Stream::restore(&state.streams[1]);
        self.unlabeled = Stream::restore(&state.streams[2]);
        self.epoch = state.epoch;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledDataset, SimilarPair, TripletDataset, UnlabeledDataset};

    fn data(n_tri: usize, n_lab: usize, n_unl: usize) -> TrainingData {
        let shape = [1, 1, 1];
        TrainingData {
            triplets: TripletDataset::new(
                shape,
                (0..3 * n_tri).map(|i| i as f32).collect(),
                vec![SimilarPair::P12; n_tri],
            )
            .unwrap(),
            labeled: LabeledDataset::new(
                shape,
                8,
                (0..n_lab).map(|i| i as f32).collect(),
                (0..n_lab).map(|i| i % 8).collect(),
            )
            .unwrap(),
            unlabeled: UnlabeledDataset::new(shape, (0..n_unl).map(|i| i as f32).collect()).unwrap(),
        }
    }

    fn sizes(t: usize, l: usize, u: usize) -> BatchSizes {
        BatchSizes {
            triplets: t,
            labeled: l,
            unlabeled: u,
        }
    }

    #[test]
    fn drop_last_epoch_of_ninety_triplets() {
        let d = data(90, 20, 0);
        let mut s = StreamSampler::new(&d, sizes(36, 16, 0), true, 0).unwrap();
        assert_eq!(s.steps_per_epoch(), 2);
        let a = s.next_batches(&d).unwrap();
        let b = s.next_batches(&d).unwrap();
        let c = s.next_batches(&d).unwrap();
        assert_eq!((a.epoch, a.end_of_epoch), (0, false));
        assert_eq!((b.epoch, b.end_of_epoch), (0, true));
        assert_eq!(c.epoch, 1);
        assert_eq!(a.triplets.pairs.len(), 36);
    }

    #[test]
    fn keep_last_epoch_has_a_short_third_batch() {
        let d = data(90, 20, 0);
        let mut s = StreamSampler::new(&d, sizes(36, 16, 0), false, 0).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let lens: Vec<(usize, u64, bool)> = (0..4)
            .map(|_| {
                let b = s.next_batches(&d).unwrap();
                (b.triplets.pairs.len(), b.epoch, b.end_of_epoch)
            })
            .collect();
        assert_eq!(lens, vec![(36, 0, false), (36, 0, false), (18, 0, true), (36, 1, false)]);
    }

    #[test]
    fn triplets_exactly_once_per_epoch() {
        let d = data(50, 10, 0);
        let mut s = StreamSampler::new(&d, sizes(10, 4, 0), true, 3).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_indices().0).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn background_stream_reshuffles_after_full_pass() {
        let d = data(40, 32, 0);
        let mut s = StreamSampler::new(&d, sizes(4, 16, 0), true, 9).unwrap();
        let mut first: Vec<usize> = Vec::new();
        for _ in 0..2 {
            first.extend(s.next_indices().1);
        }
        assert_eq!(s.labeled.passes, 0);
        let mut labels: Vec<usize> = first.iter().map(|&i| d.labeled.labels[i]).collect();
        let mut expected = d.labeled.labels.clone();
        labels.sort_unstable();
        expected.sort_unstable();
        assert_eq!(labels, expected);
        s.next_indices();
        assert_eq!(s.labeled.passes, 1);
    }

    #[test]
    fn wrapping_draw_spans_passes() {
        let d = data(40, 10, 7);
        let mut s = StreamSampler::new(&d, sizes(4, 4, 5), true, 1).unwrap();
        let mut counts = [0usize; 7];
        for _ in 0..7 {
            for i in s.next_indices().2 {
                counts[i] += 1;
            }
        }
        // 35 draws over a stream of 7: exactly five full passes.
        assert_eq!(counts, [5; 7]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let d = data(30, 11, 5);
        let mut a = StreamSampler::new(&d, sizes(6, 4, 2), true, 42).unwrap();
        let mut b = StreamSampler::new(&d, sizes(6, 4, 2), true, 42).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    #[test]
    fn unlabeled_stream_does_not_perturb_the_others() {
        let with = data(30, 11, 5);
        let without = data(30, 11, 0);
        let mut a = StreamSampler::new(&with, sizes(6, 4, 2), true, 42).unwrap();
        let mut b = StreamSampler::new(&without, sizes(6, 4, 0), true, 42).unwrap();
        for _ in 0..10 {
            let (ta, la, ..) = a.next_indices();
            let (tb, lb, ..) = b.next_indices();
            assert_eq!((ta, la), (tb, lb));
        }
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let d = data(30, 11, 5);
        let mut a = StreamSampler::new(&d, sizes(6, 4, 2), true, 5).unwrap();
        for _ in 0..7 {
            a.next_indices();
        }
        let state = a.state();
        let mut b = StreamSampler::new(&d, sizes(6, 4, 2), true, 999).unwrap();
        b.restore(&state).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    #[test]
    fn oversized_triplet_batch_rejected() {
        let d = data(10, 4, 0);
        assert!(StreamSampler::new(&d, sizes(11, 4, 0), true, 0).is_err());
        assert!(StreamSampler::new(&d, sizes(5, 0, 0), true, 0).is_err());
        assert!(StreamSampler::new(&d, sizes(5, 4, 2), true, 0).is_err());
    }

    #[test]
    fn accepts_full_batch_mixes() {
        let d = data(200, 100, 100);
        assert!(StreamSampler::new(&d, sizes(64, 64, 0), true, 0).is_ok());
        let mut s = StreamSampler::new(&d, sizes(36, 16, 16), true, 0).unwrap();
        let draw = s.next_batches(&d).unwrap();
        assert_eq!(draw.triplets.images.shape()[0], 108);
        assert_eq!(draw.labeled.images.shape()[0], 16);
        assert_eq!(draw.unlabeled.images.shape()[0], 16);
    }
}
