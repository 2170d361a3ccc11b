//! Iterative radix-2 FFT and a packed real-input transform on top of it.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }

    fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// In-place complex FFT of power-of-two length.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex::new(a.cos(), a.sin())
            })
            .collect();
        Self { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn process(&self, buf: &mut [Complex]) {
        assert_eq!(buf.len(), self.n);
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let step = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let a = buf[start + k];
                    let b = buf[start + k + half].mul(w);
                    buf[start + k] = a.add(b);
                    buf[start + k + half] = a.sub(b);
                }
            }
            len *= 2;
        }
    }
}

/// FFT of a real sequence of length `n`, evaluated through one complex FFT
/// of length `n / 2` on even/odd packed samples.
#[derive(Debug, Clone)]
pub struct RealFft {
    n: usize,
    half: Fft,
    twiddles: Vec<Complex>,
}

impl RealFft {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2 && n.is_power_of_two(), "real FFT size {n} must be a power of two >= 2");
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex::new(a.cos(), a.sin())
            })
            .collect();
        Self { n, half: Fft::new(n / 2), twiddles }
    }

    /// Returns bins `0..=n/2`.
    pub fn forward(&self, input: &[f64]) -> Vec<Complex> {
        assert_eq!(input.len(), self.n);
        let m = self.n / 2;
        let mut z: Vec<Complex> = (0..m).map(|k| Complex::new(input[2 * k], input[2 * k + 1])).collect();
        self.half.process(&mut z);
        let mut out = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let zk = z[k % m];
            let zc = z[(m - k) % m].conj();
            let even = Complex::new(0.5 * (zk.re + zc.re), 0.5 * (zk.im + zc.im));
            // (zk - zc) / (2i)
            let d = zk.sub(zc);
            let odd = Complex::new(0.5 * d.im, -0.5 * d.re);
            let w = if k == m { Complex::new(-1.0, 0.0) } else { self.twiddles[k] };
            out.push(even.add(w.mul(odd)));
        }
        out
    }
}
