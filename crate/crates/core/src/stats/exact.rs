//! Exact floating-point summation with nonoverlapping expansions.
//!
//! An [`ExactSum`] holds the exact real value of every addend as a list of
//! nonoverlapping `f64` partials, and [`ExactSum::value`] returns the
//! correctly rounded result. The rounded value is therefore independent of
//! the order in which addends arrive or accumulators are merged.

/// Error-free transformation `a + b = s + e`.
#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Error-free transformation `a · b = p + e`.
#[inline]
pub(crate) fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a finite value exactly.
    pub fn add(&mut self, value: f64) {
        debug_assert!(value.is_finite());
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let (hi, lo) = fast_two_sum(x, y);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds the exact product `a·b`.
    pub fn add_product(&mut self, a: f64, b: f64) {
        let (p, e) = two_prod(a, b);
        self.add(p);
        if e != 0.0 {
            self.add(e);
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// Adds `c` times the value of `other`, exactly.
    pub fn add_scaled(&mut self, other: &ExactSum, c: f64) {
        for &p in &other.partials {
            self.add_product(p, c);
        }
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // round half to even across the remaining partials
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation_is_exact() {
        let mut s = ExactSum::new();
        for v in [1e100, 1.0, -1e100, 1e-100] {
            s.add(v);
        }
        assert_eq!(s.value(), 1.0);
        let mut s = ExactSum::new();
        for _ in 0..10 {
            s.add(0.1);
        }
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn products_are_exact() {
        let mut s = ExactSum::new();
        let a = 1.0 + f64::EPSILON;
        s.add_product(a, a);
        s.add(-1.0);
        s.add(-2.0 * f64::EPSILON);
        assert_eq!(s.value(), f64::EPSILON * f64::EPSILON);
    }

    proptest! {
        #[test]
        fn order_and_grouping_do_not_matter(
            values in prop::collection::vec(-1e6f64..1e6, 1..200),
            split in 0usize..200,
            seed in any::<u64>(),
        ) {
            let mut forward = ExactSum::new();
            values.iter().for_each(|&v| forward.add(v));

            let mut shuffled = values.clone();
            // deterministic Fisher–Yates from the seed
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let cut = split.min(shuffled.len());
            let (mut left, mut right) = (ExactSum::new(), ExactSum::new());
            shuffled[..cut].iter().for_each(|&v| left.add(v));
            shuffled[cut..].iter().for_each(|&v| right.add(v));
            right.merge(&left);
            prop_assert_eq!(forward.value().to_bits(), right.value().to_bits());
        }
    }
}
