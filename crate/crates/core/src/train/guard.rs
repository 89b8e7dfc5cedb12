//! Dataset access for trainers. Every read goes through an allow-list of
//! training indices; test indices are refused outright.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use crate::data::Dataset;
use crate::protocol::LabelSource;
use crate::{Error, Result};

/// Shared record of every index a trainer read, for audits.
pub type AccessLog = Arc<Mutex<BTreeSet<usize>>>;

#[derive(Debug, Clone)]
pub struct GuardedView<'a> {
    dataset: &'a Dataset,
    allowed: BTreeSet<usize>,
    log: Option<AccessLog>,
}

impl<'a> GuardedView<'a> {
    pub fn new(dataset: &'a Dataset, allowed: &[usize], log: Option<AccessLog>) -> Self {
        Self {
            dataset,
            allowed: allowed.iter().copied().collect(),
            log,
        }
    }

    fn check(&self, index: usize) -> Result<()> {
        if self.dataset.is_test_index(index) {
            return Err(Error::ProtocolViolation(format!(
                "trainer requested test index {index}"
            )));
        }
        if !self.allowed.contains(&index) {
            return Err(Error::ProtocolViolation(format!(
                "index {index} is not part of this session's training data"
            )));
        }
        if let Some(log) = &self.log {
            log.lock().expect("access log poisoned").insert(index);
        }
        Ok(())
    }

    pub fn label(&self, index: usize) -> Result<usize> {
        self.check(index)?;
        Ok(self.dataset.label(index))
    }

    /// Images (concatenated) and labels of `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
        let mut images = Vec::with_capacity(indices.len() * self.dataset.shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            self.check(i)?;
            images.extend_from_slice(self.dataset.image(i));
            labels.push(self.dataset.label(i));
        }
        Ok((images, labels))
    }

    pub fn dataset_shape(&self) -> crate::data::ImageShape {
        self.dataset.shape
    }
}
