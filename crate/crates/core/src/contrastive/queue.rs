use brivl_tensor::Tensor;

use crate::error::{Error, Result};

/// Fixed-capacity FIFO of embedding rows backed by a ring of slots.
///
/// Slots fill in order `0, 1, ...`, so while the queue is filling the valid
/// slots are exactly `0..len`; once full, each push overwrites the oldest
/// rows. [`NegativeQueue::enqueue`] returns the slots it wrote, which is how
/// a positive is located later without comparing floats.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    slots: Vec<f32>,
    len: usize,
    /// Next slot to write.
    head: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            len: 0,
            head: 0,
        })
    }

    /// Rebuilds a queue from its raw parts (checkpoint restore).
    pub fn from_parts(capacity: usize, dim: usize, slots: Vec<f32>, len: usize, head: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || slots.len() != capacity * dim || len > capacity || head >= capacity {
            return Err(Error::Data(format!(
                "inconsistent queue state: capacity {capacity}, dim {dim}, {} values, len {len}, head {head}",
                slots.len()
            )));
        }
        Ok(Self {
            capacity,
            dim,
            slots,
            len,
            head,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn raw_slots(&self) -> &[f32] {
        &self.slots
    }

    /// Appends the rows of `batch` (`[n, dim]`), evicting the oldest rows when
    /// over capacity. Returns the slot of each appended row.
    pub fn enqueue(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        let s = batch.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Data(format!("queue of width {} cannot take a {s:?} batch", self.dim)));
        }
        if s[0] > self.capacity {
            return Err(Error::Data(format!(
                "batch of {} rows exceeds queue capacity {}",
                s[0], self.capacity
            )));
        }
        let mut written = Vec::with_capacity(s[0]);
        for row in batch.data().chunks(self.dim) {
            let at = self.head;
            self.slots[at * self.dim..(at + 1) * self.dim].copy_from_slice(row);
            written.push(at);
            self.head = (self.head + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(written)
    }

    /// Valid rows in slot order, `[len, dim]`.
    pub fn slot_matrix(&self) -> Result<Tensor<f32>> {
        if self.len == 0 {
            return Err(Error::Data("queue is empty".into()));
        }
        Ok(Tensor::new(&[self.len, self.dim], self.slots[..self.len * self.dim].to_vec())?)
    }

    /// Rows from oldest to newest.
    pub fn entries(&self) -> Vec<&[f32]> {
        let start = if self.len < self.capacity { 0 } else { self.head };
        (0..self.len)
            .map(|i| {
                let s = (start + i) % self.capacity;
                &self.slots[s * self.dim..(s + 1) * self.dim]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use brivl_tensor::SplitMix64;
    use proptest::prelude::*;

    use super::*;

    fn rows(values: &[f32]) -> Tensor<f32> {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn push_into_empty_and_full() {
        let mut q = NegativeQueue::new(4, 1).unwrap();
        assert_eq!(q.enqueue(&rows(&[1.0, 2.0])).unwrap(), vec![0, 1]);
        assert_eq!(q.len(), 2);
        q.enqueue(&rows(&[3.0, 4.0])).unwrap();
        q.enqueue(&rows(&[5.0, 6.0])).unwrap();
        let e: Vec<f32> = q.entries().iter().map(|r| r[0]).collect();
        assert_eq!(e, vec![3.0, 4.0, 5.0, 6.0]);
        assert!(q.enqueue(&rows(&[0.0; 5])).is_err());
    }

    #[test]
    fn fifo_matches_reference_over_random_pushes() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..1000 {
            let cap = 1 + rng.below(12);
            let mut q = NegativeQueue::new(cap, 2).unwrap();
            let mut oracle: VecDeque<[f32; 2]> = VecDeque::new();
            for _ in 0..rng.below(20) {
                let n = 1 + rng.below(cap);
                let batch: Vec<[f32; 2]> = (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect();
                let t = Tensor::new(&[n, 2], batch.iter().flatten().copied().collect()).unwrap();
                let slots = q.enqueue(&t).unwrap();
                for (r, &s) in batch.iter().zip(&slots) {
                    assert_eq!(&q.raw_slots()[s * 2..s * 2 + 2], r);
                }
                for r in batch {
                    oracle.push_back(r);
                    if oracle.len() > cap {
                        oracle.pop_front();
                    }
                }
                let got: Vec<[f32; 2]> = q.entries().iter().map(|r| [r[0], r[1]]).collect();
                assert_eq!(got, oracle.iter().copied().collect::<Vec<_>>());
            }
        }
    }

    proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 1usize..20, pushes in proptest::collection::vec(1usize..20, 0..30)) {
            let mut q = NegativeQueue::new(cap, 1).unwrap();
            let mut total = 0;
            for n in pushes {
                let n = n.min(cap);
                q.enqueue(&rows(&vec![0.5; n])).unwrap();
                total += n;
                prop_assert!(q.len() <= cap);
                prop_assert_eq!(q.len(), total.min(cap));
            }
        }
    }
}
