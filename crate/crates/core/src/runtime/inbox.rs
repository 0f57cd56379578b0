//! Bounded data inbox with an almost-full signal.

use std::collections::VecDeque;

/// Fraction of capacity at which the inbox reports itself almost full.
pub const ALMOST_FULL_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Push {
    Accepted,
    /// Accepted, and occupancy just reached the threshold.
    AlmostFull,
}

#[derive(Clone, Debug)]
pub struct BoundedInbox<T> {
    capacity: usize,
    threshold: usize,
    queue: VecDeque<T>,
    high_water: usize,
}

impl<T> BoundedInbox<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "inbox capacity must be positive");
        let threshold = ((capacity as f64 * ALMOST_FULL_FRACTION).ceil() as usize).clamp(1, capacity);
        Self {
            capacity,
            threshold,
            queue: VecDeque::with_capacity(capacity),
            high_water: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn occupancy(&self) -> usize {
        self.queue.len()
    }

    /// Highest occupancy ever observed.
    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() >= self.capacity
    }

    /// Enqueues `item`, or hands it back when the inbox is full.
    pub fn push(&mut self, item: T) -> Result<Push, T> {
        if self.is_full() {
            return Err(item);
        }
        self.queue.push_back(item);
        let n = self.queue.len();
        self.high_water = self.high_water.max(n);
        Ok(if n == self.threshold {
            Push::AlmostFull
        } else {
            Push::Accepted
        })
    }

    pub fn pop(&mut self) -> Option<T> {
        self.queue.pop_front()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signals_on_eighth_of_ten() {
        let mut b = BoundedInbox::new(10);
        for i in 0..7 {
            assert_eq!(b.push(i), Ok(Push::Accepted));
        }
        assert_eq!(b.push(7), Ok(Push::AlmostFull));
        assert_eq!(b.push(8), Ok(Push::Accepted));
        assert_eq!(b.push(9), Ok(Push::Accepted));
        assert_eq!(b.push(10), Err(10));
        assert_eq!(b.occupancy(), 10);
        assert_eq!(b.pop(), Some(0));
        assert_eq!(b.high_water(), 10);
    }
}
