//! Error-compensated accumulation for losses whose finite differences must
//! resolve changes far below one ulp of the loss itself.

/// An unevaluated sum `hi + lo` with `|lo|` at most about one ulp of `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Compensated {
    pub hi: f64,
    pub lo: f64,
}

impl Compensated {
    pub fn new(x: f64) -> Self {
        Compensated { hi: x, lo: 0.0 }
    }

    /// Adds `x`, keeping the rounding error of the addition in `lo`.
    #[inline]
    pub fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
    }

    pub fn add_compensated(&mut self, other: Compensated) {
        self.add(other.hi);
        self.lo += other.lo;
    }

    /// Product with `s`, keeping the rounding error of `hi * s`.
    pub fn scale(self, s: f64) -> Self {
        let p = self.hi * s;
        Compensated {
            hi: p,
            lo: self.hi.mul_add(s, -p) + self.lo * s,
        }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    /// `self - other`, with the large parts cancelled first.
    pub fn difference(self, other: Compensated) -> f64 {
        (self.hi - other.hi) + (self.lo - other.lo)
    }
}

impl From<f64> for Compensated {
    fn from(x: f64) -> Self {
        Compensated::new(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_bits_lost_by_plain_summation() {
        let mut c = Compensated::default();
        let mut plain = 0.0;
        for _ in 0..10 {
            c.add(1.0);
            c.add(1e-17);
            plain += 1.0;
            plain += 1e-17;
        }
        assert_eq!(plain, 10.0);
        assert!((c.difference(Compensated::new(10.0)) - 1e-16).abs() < 1e-30);
    }

    #[test]
    fn scaling_keeps_the_product_error() {
        let third = Compensated::new(1.0).scale(1.0 / 3.0).scale(3.0);
        assert!((third.value() - 1.0).abs() < 1e-16);
    }
}
