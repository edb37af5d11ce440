//! Bounded FIFO replay with wrapping sequence numbers, and a batch buffer
//! of `(slot, seq)` references that are resolved lazily instead of copying
//! transitions.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::preproc::SegmentState;

pub const DEFAULT_CAPACITY: usize = 20_000;
pub const DEFAULT_SEQ_MODULUS: u64 = 1 << 32;

/// One environment step. States are shared, not copied.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Arc<SegmentState>,
    pub action: usize,
    pub reward: f64,
    /// `None` for the final step of an episode.
    pub next_state: Option<Arc<SegmentState>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame<P> {
    pub seq: u64,
    pub payload: P,
}

#[derive(Clone, Debug)]
pub struct ReplayQueue<P> {
    capacity: usize,
    modulus: u64,
    frames: Vec<Frame<P>>,
    /// Slot the next push writes once the ring is full.
    head: usize,
    next_seq: u64,
}

/// References into a [`ReplayQueue`]; valid while the slot still holds the
/// expected sequence number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchBuffer {
    pub entries: Vec<(usize, u64)>,
}

impl<P> ReplayQueue<P> {
    pub fn new(capacity: usize) -> Result<Self> {
        Self::with_modulus(capacity, DEFAULT_SEQ_MODULUS)
    }

    /// `modulus` must exceed `capacity` so live frames never share a number.
    pub fn with_modulus(capacity: usize, modulus: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        if modulus <= capacity as u64 {
            return Err(Error::InvalidArgument(format!(
                "sequence modulus {modulus} must exceed the capacity {capacity}"
            )));
        }
        Ok(ReplayQueue {
            capacity,
            modulus,
            frames: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            next_seq: 1 % modulus,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store `payload`, evicting the oldest frame when full; returns the
    /// sequence number assigned to it.
    pub fn push(&mut self, payload: P) -> u64 {
        let seq = self.next_seq;
        self.next_seq = (self.next_seq + 1) % self.modulus;
        let frame = Frame { seq, payload };
        if self.frames.len() < self.capacity {
            self.frames.push(frame);
        } else {
            self.frames[self.head] = frame;
            self.head = (self.head + 1) % self.capacity;
        }
        seq
    }

    pub fn get(&self, slot: usize) -> Option<&Frame<P>> {
        self.frames.get(slot)
    }

    /// Frames from oldest to newest.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Frame<P>> {
        let (newer, older) = self.frames.split_at(self.head);
        older.iter().chain(newer.iter())
    }

    /// `batch_size` distinct slots drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<BatchBuffer> {
        if batch_size > self.frames.len() {
            return Err(Error::Precondition(format!(
                "cannot draw {batch_size} transitions from a queue holding {}",
                self.frames.len()
            )));
        }
        let entries = sample(rng, self.frames.len(), batch_size)
            .into_iter()
            .map(|slot| (slot, self.frames[slot].seq))
            .collect();
        Ok(BatchBuffer { entries })
    }

    /// Resolve every entry to its frame. Entries whose slot was overwritten
    /// since sampling are replaced by fresh draws from slots not already in
    /// the batch, so the batch stays duplicate-free.
    pub fn resolve<R: Rng + ?Sized>(&self, batch: &mut BatchBuffer, rng: &mut R) -> Result<Vec<&Frame<P>>> {
        if batch.entries.len() > self.frames.len() {
            return Err(Error::Precondition(format!(
                "batch of {} cannot be resolved against {} frames",
                batch.entries.len(),
                self.frames.len()
            )));
        }
        let is_live = |&(slot, seq): &(usize, u64)| self.frames.get(slot).is_some_and(|f| f.seq == seq);
        let mut taken: HashSet<usize> = batch.entries.iter().filter(|e| is_live(e)).map(|e| e.0).collect();
        for entry in batch.entries.iter_mut() {
            if is_live(entry) {
                continue;
            }
            let slot = loop {
                let candidate = rng.gen_range(0..self.frames.len());
                if taken.insert(candidate) {
                    break candidate;
                }
            };
            *entry = (slot, self.frames[slot].seq);
        }
        Ok(batch.entries.iter().map(|&(slot, _)| &self.frames[slot]).collect())
    }
}
