use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::diffcore::Array;
use crate::error::{invalid, Result};

/// Per-slot FIFO of matched mask embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    slots: Vec<VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(slots: usize, dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            slots: (0..slots)
                .map(|_| VecDeque::with_capacity(capacity))
                .collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self, slot: usize) -> usize {
        self.slots[slot].len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| s.is_empty())
    }

    pub fn min_len(&self) -> usize {
        self.slots.iter().map(|s| s.len()).min().unwrap_or(0)
    }

    pub fn push(&mut self, slot: usize, emb: Vec<f64>) -> Result<()> {
        if emb.len() != self.dim || slot >= self.slots.len() {
            return Err(invalid(format!(
                "embedding of width {} for slot {}",
                emb.len(),
                slot
            )));
        }
        let q = &mut self.slots[slot];
        if q.len() == self.capacity {
            q.pop_front();
        }
        if self.capacity > 0 {
            q.push_back(emb);
        }
        Ok(())
    }

    pub fn samples_f64(&self, slot: usize) -> Vec<Vec<f64>> {
        self.slots[slot].iter().cloned().collect()
    }

    pub fn to_arrays(&self) -> Vec<(String, Array<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(s, q)| {
                let data: Vec<f64> = q.iter().flatten().copied().collect();
                (
                    format!("bank.{s}"),
                    Array::new(&[q.len(), self.dim], data).expect("bank shape"),
                )
            })
            .collect()
    }

    pub fn from_arrays(
        slots: usize,
        dim: usize,
        capacity: usize,
        arrays: &[(String, Array<f64>)],
    ) -> Result<Self> {
        let mut bank = Self::new(slots, dim, capacity);
        for s in 0..slots {
            let name = format!("bank.{s}");
            let Some((_, a)) = arrays.iter().find(|(n, _)| *n == name) else {
                return Err(invalid(format!("missing {}", name)));
            };
            if a.shape().len() != 2 || (a.rows() > 0 && a.cols() != dim) {
                return Err(invalid(format!("{} has shape {:?}", name, a.shape())));
            }
            for r in 0..a.rows() {
                bank.push(s, a.row(r).to_vec())?;
            }
        }
        Ok(bank)
    }
}
