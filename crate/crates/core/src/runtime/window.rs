//! Tag-ordered sliding windows.
//!
//! A window accepts tags `offset, offset + tag_step, ...`. Position `i` is the
//! `i`-th accepted tag. Once positions `[next, next + length)` are all present
//! the window emits them and advances `next` by `stride`.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("tag {0} already buffered")]
    Duplicate(u64),
    #[error("tag {tag} arrived after the window moved past it (next tag {next})")]
    Late { tag: u64, next: u64 },
    #[error("tag {tag} is not routed to this window (offset {offset}, step {step})")]
    Misrouted { tag: u64, offset: u64, step: u64 },
    #[error("reorder buffer overflow: {held} items buffered, limit {limit}")]
    Overflow { held: usize, limit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
    pub tag_step: u64,
    pub offset: u64,
    /// Extra out-of-order items tolerated beyond `length`.
    pub slack: usize,
}

impl WindowSpec {
    pub fn single() -> Self {
        Self {
            length: 1,
            stride: 1,
            tag_step: 1,
            offset: 0,
            slack: 2,
        }
    }

    pub fn new(length: usize, stride: usize) -> Self {
        Self {
            length,
            stride,
            ..Self::single()
        }
    }
}

/// A completed window.
#[derive(Clone, Debug, PartialEq)]
pub struct Ready<T> {
    /// Tag of the first item.
    pub tag: u64,
    /// Window ordinal: first position divided by stride.
    pub index: u64,
    pub items: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SlidingWindow<T> {
    spec: WindowSpec,
    pending: BTreeMap<u64, T>,
    next: u64,
    late: u64,
    emitted: u64,
    accepted: u64,
}

impl<T: Clone> SlidingWindow<T> {
    pub fn new(spec: WindowSpec) -> Self {
        assert!(spec.length >= 1 && spec.stride >= 1 && spec.tag_step >= 1);
        Self {
            spec,
            pending: BTreeMap::new(),
            next: 0,
            late: 0,
            emitted: 0,
            accepted: 0,
        }
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    fn position(&self, tag: u64) -> Result<u64, WindowError> {
        let WindowSpec {
            tag_step, offset, ..
        } = self.spec;
        if tag < offset || !(tag - offset).is_multiple_of(tag_step) {
            return Err(WindowError::Misrouted {
                tag,
                offset,
                step: tag_step,
            });
        }
        Ok((tag - offset) / tag_step)
    }

    fn tag_of(&self, pos: u64) -> u64 {
        self.spec.offset + pos * self.spec.tag_step
    }

    /// Lowest tag not yet consumed.
    pub fn next_tag(&self) -> u64 {
        self.tag_of(self.next)
    }

    pub fn held(&self) -> usize {
        self.pending.len()
    }

    pub fn limit(&self) -> usize {
        self.spec.length + self.spec.slack
    }

    pub fn late_count(&self) -> u64 {
        self.late
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// Items accepted into the buffer so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    /// Buffered tags, ascending.
    pub fn pending_tags(&self) -> Vec<u64> {
        self.pending.keys().map(|p| self.tag_of(*p)).collect()
    }

    pub fn reset(&mut self) {
        self.pending.clear();
        self.next = 0;
    }

    /// Buffers `item` and returns every window it completes. On error the
    /// window is unchanged apart from the late counter.
    pub fn push(&mut self, tag: u64, item: T) -> Result<Vec<Ready<T>>, WindowError> {
        let pos = self.position(tag)?;
        if pos < self.next {
            self.late += 1;
            return Err(WindowError::Late {
                tag,
                next: self.next_tag(),
            });
        }
        if self.pending.contains_key(&pos) {
            return Err(WindowError::Duplicate(tag));
        }
        if self.pending.len() >= self.limit() {
            return Err(WindowError::Overflow {
                held: self.pending.len() + 1,
                limit: self.limit(),
            });
        }
        self.pending.insert(pos, item);
        self.accepted += 1;
        let mut out = Vec::new();
        let len = self.spec.length as u64;
        while (self.next..self.next + len).all(|p| self.pending.contains_key(&p)) {
            let items = (self.next..self.next + len)
                .map(|p| self.pending[&p].clone())
                .collect();
            out.push(Ready {
                tag: self.tag_of(self.next),
                index: self.next / self.spec.stride as u64,
                items,
            });
            self.emitted += 1;
            self.next += self.spec.stride as u64;
            let next = self.next;
            self.pending.retain(|p, _| *p >= next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emits_on_tenth_tag() {
        let mut w = SlidingWindow::new(WindowSpec::new(10, 1));
        for t in 0..9 {
            assert!(w.push(t, t).unwrap().is_empty());
        }
        let r = w.push(9, 9).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].items, (0..10).collect::<Vec<_>>());
        let r = w.push(10, 10).unwrap();
        assert_eq!(r[0].items, (1..11).collect::<Vec<_>>());
        assert_eq!(r[0].index, 1);
    }

    #[test]
    fn reorders_out_of_order_arrivals() {
        let mut w = SlidingWindow::new(WindowSpec::new(2, 1));
        assert!(w.push(1, 'b').unwrap().is_empty());
        let r = w.push(0, 'a').unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].items, vec!['a', 'b']);
    }

    #[test]
    fn duplicate_leaves_state_unchanged() {
        let mut w = SlidingWindow::new(WindowSpec::new(4, 1));
        w.push(3, 3).unwrap();
        let before = w.pending_tags();
        assert_eq!(w.push(3, 99), Err(WindowError::Duplicate(3)));
        assert_eq!(w.pending_tags(), before);
        assert_eq!(w.next_tag(), 0);
    }

    #[test]
    fn late_items_are_counted() {
        let mut w = SlidingWindow::new(WindowSpec::single());
        w.push(0, 0).unwrap();
        assert!(matches!(w.push(0, 0), Err(WindowError::Late { .. })));
        assert_eq!(w.late_count(), 1);
    }

    #[test]
    fn replica_offsets() {
        let spec = WindowSpec {
            tag_step: 3,
            offset: 1,
            ..WindowSpec::single()
        };
        let mut w = SlidingWindow::new(spec);
        assert!(matches!(w.push(2, 0), Err(WindowError::Misrouted { .. })));
        assert_eq!(w.push(1, 1).unwrap()[0].tag, 1);
        assert_eq!(w.push(4, 4).unwrap()[0].tag, 4);
    }

    #[test]
    fn strided_windows() {
        let mut w = SlidingWindow::new(WindowSpec::new(3, 2));
        let mut got = Vec::new();
        for t in 0..7 {
            for r in w.push(t, t).unwrap() {
                got.push((r.index, r.items));
            }
        }
        assert_eq!(got, vec![(0, vec![0, 1, 2]), (1, vec![2, 3, 4]), (2, vec![4, 5, 6])]);
    }

    #[test]
    fn overflow_is_bounded() {
        let spec = WindowSpec {
            slack: 1,
            ..WindowSpec::new(2, 1)
        };
        let mut w = SlidingWindow::new(spec);
        for t in 1..4 {
            w.push(t, t).unwrap();
        }
        assert!(matches!(w.push(4, 4), Err(WindowError::Overflow { .. })));
        assert_eq!(w.held(), 3);
    }
}
