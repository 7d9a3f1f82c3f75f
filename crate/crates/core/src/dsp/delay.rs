use alloc::vec::Vec;

/// Integer-sample delay: `output[n] = input[n − N]`, zero before the line
/// fills.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    buf: Vec<f64>,
    pos: usize,
}

impl DelayLine {
    pub fn new(length: usize) -> Self {
        Self {
            buf: alloc::vec![0.0; length],
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    #[inline]
    pub fn push(&mut self, x: f64) -> f64 {
        if self.buf.is_empty() {
            return x;
        }
        let y = core::mem::replace(&mut self.buf[self.pos], x);
        self.pos += 1;
        if self.pos == self.buf.len() {
            self.pos = 0;
        }
        y
    }

    /// Oldest stored sample, i.e. what the next `push` returns.
    #[inline]
    pub fn peek(&self) -> f64 {
        if self.buf.is_empty() {
            0.0
        } else {
            self.buf[self.pos]
        }
    }

    pub fn reset(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
        self.pos = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_delay() {
        for n in [0usize, 1, 7, 31] {
            let mut d = DelayLine::new(n);
            for i in 0..200 {
                let y = d.push(i as f64 + 1.0);
                let expected = if i >= n { (i - n) as f64 + 1.0 } else { 0.0 };
                assert_eq!(y, expected);
            }
        }
    }

    #[test]
    fn delays_compose() {
        let (mut a, mut b, mut c) = (DelayLine::new(5), DelayLine::new(9), DelayLine::new(14));
        for i in 0..100 {
            let x = (i as f64).sin();
            assert_eq!(b.push(a.push(x)), c.push(x));
        }
    }
}
