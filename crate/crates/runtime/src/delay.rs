//! Fixed step delays between the controller and the plant.

use std::collections::VecDeque;

/// FIFO that releases what was pushed `depth` ticks earlier.
///
/// Every tick pushes exactly one slot; `None` marks a tick without a
/// payload and comes out `depth` ticks later as `None` too.
#[derive(Debug, Clone)]
pub struct DelayLine<P> {
    depth: usize,
    fifo: VecDeque<Option<P>>,
}

impl<P> DelayLine<P> {
    pub fn new(depth: usize) -> Self {
        let fifo = std::iter::repeat_with(|| None).take(depth).collect();
        Self { depth, fifo }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn push(&mut self, payload: Option<P>) -> Option<P> {
        if self.depth == 0 {
            return payload;
        }
        self.fifo.push_back(payload);
        self.fifo.pop_front().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passthrough() {
        let mut d = DelayLine::new(0);
        assert_eq!(d.push(Some('a')), Some('a'));
    }

    #[test]
    fn depth_two() {
        let mut d = DelayLine::new(2);
        let out: Vec<_> = ['a', 'b', 'c'].into_iter().map(|c| d.push(Some(c))).collect();
        assert_eq!(out, [None, None, Some('a')]);
    }

    #[test]
    fn gaps_are_delayed_too() {
        let mut d = DelayLine::new(1);
        assert_eq!(d.push(Some(1)), None);
        assert_eq!(d.push(None), Some(1));
        assert_eq!(d.push(Some(3)), None);
        assert_eq!(d.push(None), Some(3));
    }
}
