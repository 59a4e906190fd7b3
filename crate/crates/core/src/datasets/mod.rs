//! MNIST IDX loading, the two synthetic toy tasks and batch streams.
//!
//! Image inputs are kept in `[0, 1]` (bytes / 255). Models that want the
//! `[-1, 1]` range rescale internally so attack budgets stay in pixel units.

mod batches;
mod idx;
mod toy;

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use batches::{batch_iterator, Batch, BatchIter, DataSource};
pub use idx::{
    load_mnist_dir, load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images,
    write_idx_labels, MnistSplit, IMAGE_MAGIC, LABEL_MAGIC,
};
pub use toy::{sample_toy_ours, sample_toy_tsipras, ToyTask, TsiprasSpec, X1_SCALE, X2_AGREEMENT};

use crate::error::{Error, Result};
use crate::ndtape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    MnistTrain,
    MnistTest,
    ToyOurs,
    ToyTsipras,
    /// Derived set, e.g. the low-density adversarial sample of the toy task.
    Derived,
}

/// Inputs `[n, d]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
    /// `(rows, cols)` for image data, used when writing IDX files back out.
    image_dims: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if inputs.rank() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "inputs of shape {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            provenance,
            image_dims: None,
        })
    }

    pub(crate) fn with_image_dims(mut self, rows: usize, cols: usize) -> Self {
        self.image_dims = Some((rows, cols));
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.image_dims
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Gather rows into a `[indices.len(), d]` tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_parts(vec![indices.len(), d], data), labels)
    }

    /// Contiguous slice of examples.
    pub fn slice(&self, range: Range<usize>) -> LabeledDataset {
        let range = range.start.min(self.len())..range.end.min(self.len());
        let d = self.dim();
        let data = self.inputs.data()[range.start * d..range.end * d].to_vec();
        LabeledDataset {
            inputs: Tensor::from_parts(vec![range.len(), d], data),
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
            provenance: self.provenance,
            image_dims: self.image_dims,
        }
    }

    /// True when every input lies in `[0, 1]`.
    pub fn in_unit_box(&self) -> bool {
        self.inputs.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// CSV with header `x_0,...,x_{d-1},label`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.input(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", row.join(","), self.labels[i])?;
        }
        Ok(())
    }
}
