//! Deterministic random generation.
//!
//! One fixed algorithm, bit-reproducible across platforms and runs:
//! the 64-bit seed is expanded into xoshiro256++ state with splitmix64,
//! uniforms take the high 53 bits of each output word, and Gaussians use
//! the Box-Muller transform (both values of each pair are consumed in
//! order). Experiment logs asserted byte-identical across runs depend on
//! this module never changing behavior.
//!
//! An `Rng` is single-owner. To give a subsystem its own stream, derive a
//! child with [`Rng::split`] instead of sharing the parent.

use crate::numkit::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = splitmix64(&mut sm);
        }
        Rng {
            state,
            spare_normal: None,
        }
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Child generator seeded from this stream. The child's sequence is
    /// independent of further draws from the parent.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection sampling, so the distribution is
    /// exact for every n.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        loop {
            let x = self.next_u64();
            let r = x % n;
            if x.wrapping_sub(r) <= u64::MAX - (n - 1) {
                return r as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. Pairs are generated together; the
    /// second value is cached and returned by the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Matrix of i.i.d. standard normal entries, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.normal();
        }
        m
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang, with the boost for shape < 1.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0);
        if shape < 1.0 {
            let u = self.uniform().max(f64::MIN_POSITIVE);
            return self.gamma(shape + 1.0) * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta(a, b) as a ratio of gammas.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a);
        let y = self.gamma(b);
        x / (x + y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ma = Rng::new(42).gaussian_matrix(2, 2);
        let mb = Rng::new(42).gaussian_matrix(2, 2);
        assert_eq!(ma.data(), mb.data());
    }

    /// Frozen reference values pin the stream across platforms and future
    /// refactors. Computed from the splitmix64 + xoshiro256++ definitions.
    #[test]
    fn stream_is_pinned() {
        let mut r = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(first, vec![5987356902031041503, 7051070477665621255, 6633766593972829180]);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(7);
        let m = rng.gaussian_matrix(1, 100_000);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = rng.below(7);
            assert!(v < 7);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn beta_one_one_is_roughly_uniform() {
        let mut rng = Rng::new(11);
        let mut bins = [0usize; 10];
        let draws = 20_000;
        for _ in 0..draws {
            let x = rng.beta(1.0, 1.0);
            assert!((0.0..=1.0).contains(&x));
            bins[((x * 10.0) as usize).min(9)] += 1;
        }
        let expect = draws as f64 / 10.0;
        for b in bins {
            assert!((b as f64 - expect).abs() < 0.1 * expect, "bin {b} vs {expect}");
        }
    }

    #[test]
    fn split_children_are_independent_of_parent_draws() {
        let mut parent_a = Rng::new(9);
        let child_a = parent_a.split();
        let mut parent_b = Rng::new(9);
        let child_b = parent_b.split();
        parent_b.next_u64(); // extra parent draw must not affect the child
        let mut ca = child_a;
        let mut cb = child_b;
        for _ in 0..10 {
            assert_eq!(ca.next_u64(), cb.next_u64());
        }
    }
}
