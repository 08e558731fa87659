use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Buffer of detached past predictions. Holding plain tensors means nothing stored here can
/// carry a gradient back into the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return contract("image pool capacity must be positive");
        }
        Ok(ImagePool { capacity, items: Vec::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, or replaces a uniformly chosen entry once full.
    pub fn push(&mut self, image: Tensor, rng: &mut impl Rng) {
        if self.items.len() < self.capacity {
            self.items.push(image);
        } else {
            let k = rng.random_range(0..self.capacity);
            self.items[k] = image;
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<&Tensor> {
        if self.items.is_empty() {
            return contract("image pool is empty; push predictions (warm-up) before sampling references");
        }
        Ok(&self.items[rng.random_range(0..self.items.len())])
    }
}
