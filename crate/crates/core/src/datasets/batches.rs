use std::sync::Arc;

use rand::seq::SliceRandom;

use super::{LabeledDataset, ToyTask};
use crate::error::{Error, Result};
use crate::ndtape::Tensor;
use crate::rng::{self, Purpose};

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// A fixed, file-backed or pre-sampled dataset.
    Fixed(Arc<LabeledDataset>),
    /// A generator that can produce fresh samples on every step.
    Toy(ToyTask),
}

impl DataSource {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Fixed(ds) => ds.dim(),
            DataSource::Toy(task) => task.dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Fixed(ds) => ds.num_classes(),
            DataSource::Toy(_) => 2,
        }
    }

    /// Batches per epoch in shuffled mode.
    pub fn batches_per_epoch(&self, batch_size: usize) -> Option<usize> {
        match self {
            DataSource::Fixed(ds) => Some(ds.len().div_ceil(batch_size)),
            DataSource::Toy(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Epoch index; always 0 for resampled streams.
    pub epoch: usize,
    /// Global step counter.
    pub step: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Endless stream of batches; the caller decides when to stop.
#[derive(Debug)]
pub struct BatchIter {
    source: DataSource,
    batch_size: usize,
    seed: u64,
    step: usize,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

/// Seeded batches. With `resample` every step draws fresh samples from the
/// generator (toy sources only); otherwise each epoch is a seeded shuffle
/// visited without replacement, the last batch possibly short.
pub fn batch_iterator(
    source: &DataSource,
    batch_size: usize,
    seed: u64,
    resample: bool,
) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if resample && matches!(source, DataSource::Fixed(_)) {
        return Err(Error::invalid(
            "resampling requires a generating distribution, not a fixed dataset",
        ));
    }
    if let DataSource::Fixed(ds) = source {
        if ds.is_empty() {
            return Err(Error::Data("cannot iterate over an empty dataset".into()));
        }
    }
    if let DataSource::Toy(task) = source {
        task.validate()?;
    }
    let mut it = BatchIter {
        source: source.clone(),
        batch_size,
        seed,
        step: 0,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
    };
    it.shuffle();
    Ok(it)
}

impl BatchIter {
    fn shuffle(&mut self) {
        let n = match &self.source {
            DataSource::Fixed(ds) => ds.len(),
            DataSource::Toy(_) => return,
        };
        self.order = (0..n).collect();
        let mut r = rng::stream(self.seed, Purpose::Shuffle, self.epoch as u64, 0, 0);
        self.order.shuffle(&mut r);
        self.cursor = 0;
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let step = self.step;
        self.step += 1;
        match &self.source {
            DataSource::Toy(task) => {
                let mut r = rng::stream(self.seed, Purpose::Toy, 1, step as u64, 0);
                let ds = task.sample_with(self.batch_size, &mut r).ok()?;
                Some(Batch {
                    epoch: 0,
                    step,
                    inputs: ds.inputs().clone(),
                    labels: ds.labels().to_vec(),
                })
            }
            DataSource::Fixed(ds) => {
                let ds = Arc::clone(ds);
                if self.cursor >= self.order.len() {
                    self.epoch += 1;
                    self.shuffle();
                }
                let end = (self.cursor + self.batch_size).min(self.order.len());
                let (inputs, labels) = ds.gather(&self.order[self.cursor..end]);
                self.cursor = end;
                Some(Batch {
                    epoch: self.epoch,
                    step,
                    inputs,
                    labels,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Provenance;

    fn fixed(n: usize) -> DataSource {
        let inputs = Tensor::from_parts(vec![n, 1], (0..n).map(|i| i as f64).collect());
        let labels = (0..n).map(|i| i % 10).collect();
        DataSource::Fixed(Arc::new(
            LabeledDataset::new(inputs, labels, 10, Provenance::Derived).unwrap(),
        ))
    }

    #[test]
    fn mnist_sized_epoch_has_600_batches() {
        let src = fixed(60_000);
        assert_eq!(src.batches_per_epoch(100), Some(600));
        let it = batch_iterator(&src, 100, 0, false).unwrap();
        let epoch0: Vec<Batch> = it.take_while(|b| b.epoch == 0).collect();
        assert_eq!(epoch0.len(), 600);
        let mut seen: Vec<usize> = epoch0
            .iter()
            .flat_map(|b| b.inputs.data().iter().map(|&v| v as usize))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..60_000).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let src = fixed(1000);
        let a: Vec<Tensor> = batch_iterator(&src, 64, 3, false).unwrap().take(40).map(|b| b.inputs).collect();
        let b: Vec<Tensor> = batch_iterator(&src, 64, 3, false).unwrap().take(40).map(|b| b.inputs).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn resampled_toy_stream_is_fresh() {
        let src = DataSource::Toy(ToyTask::Ours);
        let mut total = 0;
        let mut first = None;
        for b in batch_iterator(&src, 1024, 0, true).unwrap().take(1000) {
            total += b.labels.len();
            if let Some(f) = &first {
                assert_ne!(f, &b.inputs);
            } else {
                first = Some(b.inputs.clone());
            }
        }
        assert_eq!(total, 1_024_000);
    }

    #[test]
    fn resample_on_fixed_is_error() {
        assert!(batch_iterator(&fixed(10), 4, 0, true).is_err());
        assert!(batch_iterator(&fixed(10), 0, 0, false).is_err());
    }
}
