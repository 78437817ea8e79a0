//! Space-time grid on (0,T) x T^n. Space is the 2*pi-periodic torus sampled
//! uniformly with `n_x` points per axis; time is sampled with `n_t` points.

use crate::error::{Error, Result};
use crate::scalar::{r, Real};

/// Discretization of the space-time domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    /// Spatial dimension (2 or 3).
    pub n: usize,
    /// Grid points per spatial axis; power of two, >= 4.
    pub n_x: usize,
    /// Time samples over [0, T).
    pub n_t: usize,
    /// Time horizon T > 0.
    pub t_end: T,
    /// Apply the 2/3 dealiasing rule when multiplying fields.
    pub dealias: bool,
}

impl<T: Real> GridSpec<T> {
    pub fn new(n: usize, n_x: usize, n_t: usize, t_end: T) -> Result<Self> {
        if !(2..=3).contains(&n) {
            return Err(Error::InvalidParameter(format!(
                "spatial dimension must be 2 or 3, got {n}"
            )));
        }
        if n_x < 4 || n_x % 2 != 0 || !n_x.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "n_x must be an even power of two >= 4, got {n_x}"
            )));
        }
        if n_t < 2 {
            return Err(Error::InvalidParameter(format!("n_t must be >= 2, got {n_t}")));
        }
        if t_end <= T::zero() {
            return Err(Error::InvalidParameter("t_end must be positive".into()));
        }
        Ok(Self {
            n,
            n_x,
            n_t,
            t_end,
            dealias: false,
        })
    }

    /// Spatial step 2*pi / n_x.
    pub fn dx(&self) -> T {
        T::TAU() / r(self.n_x as f64)
    }

    /// Time step T / n_t.
    pub fn dt(&self) -> T {
        self.t_end / r(self.n_t as f64)
    }

    /// Spatial coordinate of index `i` along any axis.
    pub fn x_of(&self, i: usize) -> T {
        r::<T>(i as f64) * self.dx()
    }

    /// Time coordinate of slice `it`.
    pub fn t_of(&self, it: usize) -> T {
        r::<T>(it as f64) * self.dt()
    }

    /// Number of spatial points, n_x^n.
    pub fn spatial_len(&self) -> usize {
        self.n_x.pow(self.n as u32)
    }

    /// Cell volume dt * dx^n.
    pub fn cell_volume(&self) -> T {
        self.dt() * self.dx().powi(self.n as i32)
    }

    /// Volume of the whole space-time domain, T * (2 pi)^n.
    pub fn domain_volume(&self) -> T {
        self.t_end * T::TAU().powi(self.n as i32)
    }

    /// Largest retained mode magnitude per axis. Modes with any |k_i| above
    /// this are dropped (the Nyquist bin is never retained).
    pub fn max_mode(&self) -> i64 {
        (self.n_x as i64) / 2 - 1
    }

    /// Signed wavenumber of FFT bin `i` along a spatial axis.
    pub fn wavenumber(&self, i: usize) -> i64 {
        let n = self.n_x as i64;
        let i = i as i64;
        if i <= n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Shape of one scalar channel: [n_t, n_x, ..., n_x].
    pub fn channel_shape(&self) -> Vec<usize> {
        let mut s = vec![self.n_t];
        s.extend(std::iter::repeat(self.n_x).take(self.n));
        s
    }

    /// Iterate all retained spatial modes as integer vectors.
    pub fn modes(&self) -> ModeIter {
        ModeIter {
            n: self.n,
            n_x: self.n_x,
            idx: vec![0; self.n],
            done: false,
        }
    }

    /// Integer mode vector of a flattened spatial index.
    pub fn mode_of_flat(&self, mut flat: usize) -> Vec<i64> {
        let mut k = vec![0i64; self.n];
        for a in (0..self.n).rev() {
            let i = flat % self.n_x;
            flat /= self.n_x;
            k[a] = self.wavenumber(i);
        }
        k
    }
}

/// Iterator over FFT index tuples together with signed mode vectors.
pub struct ModeIter {
    n: usize,
    n_x: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Iterator for ModeIter {
    /// (index tuple, signed mode vector)
    type Item = (Vec<usize>, Vec<i64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let idx = self.idx.clone();
        let n = self.n_x as i64;
        let k: Vec<i64> = idx
            .iter()
            .map(|&i| {
                let i = i as i64;
                if i <= n / 2 {
                    i
                } else {
                    i - n
                }
            })
            .collect();
        // advance odometer
        let mut a = self.n;
        loop {
            if a == 0 {
                self.done = true;
                break;
            }
            a -= 1;
            self.idx[a] += 1;
            if self.idx[a] < self.n_x {
                break;
            }
            self.idx[a] = 0;
        }
        Some((idx, k))
    }
}
