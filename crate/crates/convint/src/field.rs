//! Periodic space-time fields with dual spectral/physical representation.
//!
//! A `SpectralField` stores, per channel and per time sample, the spatial
//! Fourier coefficients of a real field on the torus, with the synthesis
//! convention f(x) = sum_k fhat(k) e^{i k.x}. Spatial derivatives are exact
//! for resolved fields; time derivatives are spectral for fields flagged as
//! compactly supported in (0,T) (periodization is then exact) and 4th-order
//! finite differences otherwise.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::scalar::{r, Real};
use crate::symbols::{MultiplierSymbol, RegularPatch};
use ndarray::{ArrayD, Axis, IxDyn, Zip};
use num_complex::Complex;
use rustfft::FftPlanner;

/// How time derivatives are taken for a given field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    /// Field is compactly supported inside (0,T): periodic extension is exact
    /// and the DFT derivative applies.
    Spectral,
    /// Generic sampled field: 4th-order central differences with one-sided
    /// closures at the ends.
    FiniteDifference4,
}

/// Gridded multi-channel field stored spectrally.
#[derive(Debug, Clone)]
pub struct SpectralField<T> {
    grid: GridSpec<T>,
    channels: usize,
    /// Shape [channels, n_t, n_x, ..., n_x]; spatial Fourier coefficients.
    coeffs: ArrayD<Complex<T>>,
    time_scheme: TimeScheme,
}

fn fft_along_axis<T: Real>(data: &mut ArrayD<Complex<T>>, axis: usize, forward: bool) {
    let len = data.shape()[axis];
    let mut planner = FftPlanner::<T>::new();
    let fft = if forward {
        planner.plan_fft_forward(len)
    } else {
        planner.plan_fft_inverse(len)
    };
    let scale = if forward {
        T::one() / r(len as f64)
    } else {
        T::one()
    };
    Zip::from(data.lanes_mut(Axis(axis))).par_for_each(|mut lane| {
        let mut buf: Vec<Complex<T>> = lane.iter().copied().collect();
        fft.process(&mut buf);
        for (dst, src) in lane.iter_mut().zip(buf) {
            *dst = src * scale;
        }
    });
}

impl<T: Real> SpectralField<T> {
    /// All-zero field.
    pub fn zeros(grid: &GridSpec<T>, channels: usize) -> Self {
        let mut shape = vec![channels];
        shape.extend(grid.channel_shape());
        Self {
            grid: grid.clone(),
            channels,
            coeffs: ArrayD::zeros(IxDyn(&shape)),
            time_scheme: TimeScheme::FiniteDifference4,
        }
    }

    /// Transform a physical array of shape [channels, n_t, n_x, ..] into
    /// spectral representation.
    pub fn from_physical(grid: &GridSpec<T>, data: &ArrayD<T>) -> Result<Self> {
        let shape = data.shape();
        let mut expect = grid.channel_shape();
        if shape.len() != expect.len() + 1 || shape[1..] != expect[..] {
            expect.insert(0, 0);
            return Err(Error::ShapeMismatch(format!(
                "expected [ch, {:?}], got {:?}",
                &expect[1..],
                shape
            )));
        }
        let channels = shape[0];
        let mut coeffs = data.mapv(|v| Complex::new(v, T::zero()));
        for ax in 0..grid.n {
            fft_along_axis(&mut coeffs, 2 + ax, true);
        }
        Ok(Self {
            grid: grid.clone(),
            channels,
            coeffs,
            time_scheme: TimeScheme::FiniteDifference4,
        })
    }

    /// Evaluate a closure on the grid and transform.
    pub fn from_fn(
        grid: &GridSpec<T>,
        channels: usize,
        f: impl Fn(usize, T, &[T]) -> T + Sync,
    ) -> Self {
        let mut shape = vec![channels];
        shape.extend(grid.channel_shape());
        let mut data = ArrayD::<T>::zeros(IxDyn(&shape));
        let n = grid.n;
        let n_x = grid.n_x;
        let spatial = grid.spatial_len();
        {
            let flat = data.as_slice_mut().expect("standard layout");
            for ch in 0..channels {
                for it in 0..grid.n_t {
                    let t = grid.t_of(it);
                    let base = (ch * grid.n_t + it) * spatial;
                    for s in 0..spatial {
                        let mut idx = s;
                        let mut x = vec![T::zero(); n];
                        for a in (0..n).rev() {
                            x[a] = grid.x_of(idx % n_x);
                            idx /= n_x;
                        }
                        flat[base + s] = f(ch, t, &x);
                    }
                }
            }
        }
        Self::from_physical(grid, &data).expect("shape is consistent by construction")
    }

    /// Inverse transform to physical space (real part; imaginary content is
    /// FP noise for Hermitian coefficients).
    pub fn to_physical(&self) -> ArrayD<T> {
        let mut work = self.coeffs.clone();
        for ax in 0..self.grid.n {
            fft_along_axis(&mut work, 2 + ax, false);
        }
        work.mapv(|c| c.re)
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &ArrayD<Complex<T>> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut ArrayD<Complex<T>> {
        &mut self.coeffs
    }

    pub fn time_scheme(&self) -> TimeScheme {
        self.time_scheme
    }

    pub fn with_time_scheme(mut self, scheme: TimeScheme) -> Self {
        self.time_scheme = scheme;
        self
    }

    fn flat(&self) -> &[Complex<T>] {
        self.coeffs.as_slice().expect("standard layout")
    }

    fn flat_mut(&mut self) -> &mut [Complex<T>] {
        self.coeffs.as_slice_mut().expect("standard layout")
    }

    #[inline]
    fn offset(&self, ch: usize, it: usize, spatial_flat: usize) -> usize {
        (ch * self.grid.n_t + it) * self.grid.spatial_len() + spatial_flat
    }

    /// Coefficient at an integer mode vector (None if unresolved).
    pub fn mode(&self, ch: usize, it: usize, k: &[i64]) -> Option<Complex<T>> {
        let flat = self.spatial_flat_of_mode(k)?;
        Some(self.flat()[self.offset(ch, it, flat)])
    }

    pub fn set_mode(&mut self, ch: usize, it: usize, k: &[i64], v: Complex<T>) -> Result<()> {
        let flat = self
            .spatial_flat_of_mode(k)
            .ok_or_else(|| Error::GridOverflow(format!("mode {k:?} unresolved")))?;
        let off = self.offset(ch, it, flat);
        self.flat_mut()[off] = v;
        Ok(())
    }

    fn spatial_flat_of_mode(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.grid.n {
            return None;
        }
        let n = self.grid.n_x as i64;
        let mut flat = 0usize;
        for &ki in k {
            if ki.abs() > self.grid.max_mode() {
                return None;
            }
            let i = if ki >= 0 { ki } else { ki + n };
            flat = flat * self.grid.n_x + i as usize;
        }
        Some(flat)
    }

    /// Zero the k = 0 coefficient at every time sample.
    pub fn enforce_zero_mean(mut self) -> Self {
        let spatial = self.grid.spatial_len();
        let n_t = self.grid.n_t;
        for ch in 0..self.channels {
            for it in 0..n_t {
                let off = (ch * n_t + it) * spatial;
                self.flat_mut()[off] = Complex::new(T::zero(), T::zero());
            }
        }
        self
    }

    /// Largest |mean| over channels and time samples.
    pub fn max_spatial_mean(&self) -> T {
        let spatial = self.grid.spatial_len();
        let mut worst = T::zero();
        for ch in 0..self.channels {
            for it in 0..self.grid.n_t {
                let c = self.flat()[(ch * self.grid.n_t + it) * spatial];
                worst = worst.max(c.norm());
            }
        }
        worst
    }

    /// Enforce exact Hermitian symmetry (projects onto real-valued fields).
    pub fn hermitian_symmetrize(&mut self) {
        let spatial = self.grid.spatial_len();
        let n_t = self.grid.n_t;
        let n = self.grid.n;
        let n_x = self.grid.n_x;
        let half = r::<T>(0.5);
        for ch in 0..self.channels {
            for it in 0..n_t {
                let base = (ch * n_t + it) * spatial;
                for s in 0..spatial {
                    // conjugate index: each axis i -> (n_x - i) mod n_x
                    let mut idx = s;
                    let mut conj = 0usize;
                    let mut digits = vec![0usize; n];
                    for a in (0..n).rev() {
                        digits[a] = idx % n_x;
                        idx /= n_x;
                    }
                    for d in &digits {
                        conj = conj * n_x + ((n_x - d) % n_x);
                    }
                    if conj < s {
                        continue;
                    }
                    let a = self.flat()[base + s];
                    let b = self.flat()[base + conj];
                    let avg = (a + b.conj()) * half;
                    self.flat_mut()[base + s] = avg;
                    self.flat_mut()[base + conj] = avg.conj();
                }
            }
        }
    }

    /// Spatial derivative d/dx_axis (spectral, exact for resolved fields).
    pub fn spatial_derivative(&self, axis: usize) -> Self {
        assert!(axis < self.grid.n);
        let mut out = self.clone();
        let spatial = self.grid.spatial_len();
        let n_t = self.grid.n_t;
        let modes: Vec<i64> = (0..spatial)
            .map(|s| self.grid.mode_of_flat(s)[axis])
            .collect();
        let nyq = (self.grid.n_x / 2) as i64;
        for ch in 0..self.channels {
            for it in 0..n_t {
                let base = (ch * n_t + it) * spatial;
                for s in 0..spatial {
                    let k = modes[s];
                    let c = out.flat()[base + s];
                    // drop the Nyquist bin: it carries no usable derivative
                    let v = if k.abs() >= nyq {
                        Complex::new(T::zero(), T::zero())
                    } else {
                        Complex::new(T::zero(), r::<T>(k as f64)) * c
                    };
                    out.flat_mut()[base + s] = v;
                }
            }
        }
        out
    }

    /// Spatial Laplacian (spectral).
    pub fn laplacian(&self) -> Self {
        let mut out = self.clone();
        let spatial = self.grid.spatial_len();
        let n_t = self.grid.n_t;
        let nyq = (self.grid.n_x / 2) as i64;
        let k2: Vec<T> = (0..spatial)
            .map(|s| {
                let k = self.grid.mode_of_flat(s);
                if k.iter().any(|ki| ki.abs() >= nyq) {
                    T::nan()
                } else {
                    k.iter().map(|&ki| r::<T>((ki * ki) as f64)).sum()
                }
            })
            .collect();
        for ch in 0..self.channels {
            for it in 0..n_t {
                let base = (ch * n_t + it) * spatial;
                for s in 0..spatial {
                    let v = if k2[s].is_nan() {
                        Complex::new(T::zero(), T::zero())
                    } else {
                        -self.flat()[base + s] * k2[s]
                    };
                    out.flat_mut()[base + s] = v;
                }
            }
        }
        out
    }

    /// Time derivative per the field's scheme.
    pub fn time_derivative(&self) -> Result<Self> {
        match self.time_scheme {
            TimeScheme::Spectral => Ok(self.time_derivative_spectral()),
            TimeScheme::FiniteDifference4 => self.time_derivative_fd4(),
        }
    }

    /// DFT time derivative (exact for resolved time-periodic fields).
    pub fn time_derivative_spectral(&self) -> Self {
        let mut out = self.clone();
        let n_t = self.grid.n_t;
        let omega0 = T::TAU() / self.grid.t_end;
        fft_along_axis(&mut out.coeffs, 1, true);
        let spatial = self.grid.spatial_len();
        for ch in 0..self.channels {
            for it in 0..n_t {
                let m = if it <= n_t / 2 {
                    it as i64
                } else {
                    it as i64 - n_t as i64
                };
                // zero the time-Nyquist bin
                let f = if m.unsigned_abs() as usize * 2 >= n_t {
                    Complex::new(T::zero(), T::zero())
                } else {
                    Complex::new(T::zero(), omega0 * r(m as f64))
                };
                let base = (ch * n_t + it) * spatial;
                for s in 0..spatial {
                    let c = out.flat()[base + s];
                    out.flat_mut()[base + s] = c * f;
                }
            }
        }
        fft_along_axis(&mut out.coeffs, 1, false);
        out
    }

    /// 4th-order finite-difference time derivative with one-sided closures.
    pub fn time_derivative_fd4(&self) -> Result<Self> {
        let n_t = self.grid.n_t;
        if n_t < 5 {
            return Err(Error::InvalidParameter(
                "FD4 time derivative needs n_t >= 5".into(),
            ));
        }
        let mut out = self.clone();
        let spatial = self.grid.spatial_len();
        let h12 = r::<T>(12.0) * self.grid.dt();
        // stencils: rows of (offsets, weights*12)
        let interior: [(i64, f64); 4] = [(-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)];
        let edge0: [(i64, f64); 5] = [(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)];
        let edge1: [(i64, f64); 5] = [(-1, -3.0), (0, -10.0), (1, 18.0), (2, -6.0), (3, 1.0)];
        for ch in 0..self.channels {
            for it in 0..n_t {
                let stencil: Vec<(i64, T)> = if it >= 2 && it + 2 < n_t {
                    interior.iter().map(|&(o, w)| (o, r(w))).collect()
                } else if it == 0 {
                    edge0.iter().map(|&(o, w)| (o, r(w))).collect()
                } else if it == 1 {
                    edge1.iter().map(|&(o, w)| (o, r(w))).collect()
                } else if it == n_t - 1 {
                    edge0.iter().map(|&(o, w)| (-o, r(-w))).collect()
                } else {
                    edge1.iter().map(|&(o, w)| (-o, r(-w))).collect()
                };
                let base_out = (ch * n_t + it) * spatial;
                for s in 0..spatial {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for &(off, w) in &stencil {
                        let jt = (it as i64 + off) as usize;
                        acc += self.flat()[(ch * n_t + jt) * spatial + s] * w;
                    }
                    out.flat_mut()[base_out + s] = acc / h12;
                }
            }
        }
        Ok(out)
    }

    /// Sum of two fields on the same grid.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.grid != other.grid || self.channels != other.channels {
            return Err(Error::GridMismatch("field addition".into()));
        }
        let mut out = self.clone();
        Zip::from(&mut out.coeffs)
            .and(&other.coeffs)
            .for_each(|a, &b| *a += b);
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = self.clone();
        out.coeffs.mapv_inplace(|c| c * s);
        out
    }

    /// Extract a single channel as a new 1-channel field.
    pub fn channel(&self, ch: usize) -> Self {
        let view = self.coeffs.index_axis(Axis(0), ch);
        let mut shape = vec![1usize];
        shape.extend(view.shape());
        let coeffs = view
            .to_owned()
            .into_shape(IxDyn(&shape))
            .expect("channel reshape");
        Self {
            grid: self.grid.clone(),
            channels: 1,
            coeffs,
            time_scheme: self.time_scheme,
        }
    }

    /// L2(Omega_T) squared norm: integral of |f|^2 dx dt over all channels.
    pub fn l2_norm_sq(&self) -> T {
        // Parseval per time slice: int |f|^2 dx = (2 pi)^n sum_k |fhat|^2
        let spatial_weight = T::TAU().powi(self.grid.n as i32);
        let dt = self.grid.dt();
        let sum: T = self.flat().iter().map(|c| c.norm_sqr()).sum();
        sum * spatial_weight * dt
    }

    /// Max physical amplitude (via inverse transform).
    pub fn sup_norm(&self) -> T {
        self.to_physical()
            .iter()
            .fold(T::zero(), |a, &b| a.max(b.abs()))
    }

    /// Total spectral energy excluding the mean mode.
    pub fn energy_nonzero_modes(&self) -> T {
        let spatial = self.grid.spatial_len();
        let mut sum = T::zero();
        for ch in 0..self.channels {
            for it in 0..self.grid.n_t {
                let base = (ch * self.grid.n_t + it) * spatial;
                for s in 1..spatial {
                    sum += self.flat()[base + s].norm_sqr();
                }
            }
        }
        sum
    }
}

/// u = T[theta]: apply the multiplier per retained mode, u_hat(t,k) =
/// m(k) theta_hat(t,k), zero mean enforced.
pub fn apply_multiplier<T: Real>(
    theta: &SpectralField<T>,
    symbol: &MultiplierSymbol<T>,
) -> Result<SpectralField<T>> {
    if theta.channels != 1 {
        return Err(Error::ShapeMismatch("theta must be a scalar field".into()));
    }
    let grid = theta.grid.clone();
    if grid.n != symbol.dim() {
        return Err(Error::ShapeMismatch(format!(
            "grid dimension {} vs symbol dimension {}",
            grid.n,
            symbol.dim()
        )));
    }
    let spatial = grid.spatial_len();
    // precompute m(k) per spatial mode; None marks zero/singular/Nyquist modes
    let mut m_table: Vec<Option<Vec<T>>> = Vec::with_capacity(spatial);
    let nyq = (grid.n_x / 2) as i64;
    for s in 0..spatial {
        let k = grid.mode_of_flat(s);
        if k.iter().all(|&ki| ki == 0) || k.iter().any(|ki| ki.abs() >= nyq) {
            m_table.push(None);
            continue;
        }
        let kf: Vec<T> = k.iter().map(|&ki| r(ki as f64)).collect();
        m_table.push(symbol.evaluate(&kf).ok());
    }
    // singular-support guard
    let total: T = theta.energy_nonzero_modes();
    if total > T::zero() {
        let mut singular_energy = T::zero();
        for s in 1..spatial {
            if m_table[s].is_none() {
                let k = grid.mode_of_flat(s);
                if k.iter().any(|ki| ki.abs() >= nyq) {
                    continue; // truncated bin, not a singular direction
                }
                for it in 0..grid.n_t {
                    singular_energy += theta.flat()[it * spatial + s].norm_sqr();
                }
            }
        }
        let frac = singular_energy / total;
        if frac > r(1e-12) {
            return Err(Error::SingularSupport(frac.to_f64().unwrap_or(1.0)));
        }
    }
    let mut u = SpectralField::zeros(&grid, grid.n);
    u.time_scheme = theta.time_scheme;
    for it in 0..grid.n_t {
        for s in 0..spatial {
            if let Some(m) = &m_table[s] {
                let th = theta.flat()[it * spatial + s];
                for (c, &mc) in m.iter().enumerate() {
                    let off = u.offset(c, it, s);
                    u.flat_mut()[off] = th * mc;
                }
            }
        }
    }
    Ok(u)
}

/// The full relaxed state U = (theta, q, u) with u = T[theta].
#[derive(Debug, Clone)]
pub struct StateField<T> {
    pub theta: SpectralField<T>,
    pub q: SpectralField<T>,
    pub u: SpectralField<T>,
    symbol: MultiplierSymbol<T>,
}

/// Space-time divergence residuals of the two block rows of U.
#[derive(Debug)]
pub struct DivergenceResidual<T> {
    /// d_t theta + div_x q, physical values.
    pub row1: ArrayD<T>,
    /// div_x u, physical values.
    pub row2: ArrayD<T>,
    /// Sup of |row1| over the grid.
    pub row1_sup: T,
    pub row2_sup: T,
    /// Sup residuals normalized by the magnitude of the terms entering.
    pub row1_relative: T,
    pub row2_relative: T,
}

impl<T: Real> DivergenceResidual<T> {
    pub fn max_relative(&self) -> T {
        self.row1_relative.max(self.row2_relative)
    }
}

impl<T: Real> StateField<T> {
    pub fn new(
        theta: SpectralField<T>,
        q: SpectralField<T>,
        u: SpectralField<T>,
        symbol: MultiplierSymbol<T>,
    ) -> Result<Self> {
        let n = theta.grid().n;
        if theta.channels() != 1 || q.channels() != n || u.channels() != n {
            return Err(Error::ShapeMismatch(
                "state needs channels (1, n, n)".into(),
            ));
        }
        if theta.grid() != q.grid() || theta.grid() != u.grid() {
            return Err(Error::GridMismatch("state channels".into()));
        }
        Ok(Self {
            theta,
            q,
            u,
            symbol,
        })
    }

    /// Constant state (theta0, q0, u0); theta/u constants must be zero for a
    /// zero-mean admissible state, q may carry the constant background.
    pub fn constant(
        grid: &GridSpec<T>,
        symbol: &MultiplierSymbol<T>,
        theta0: T,
        q0: &[T],
        u0: &[T],
    ) -> Result<Self> {
        let n = grid.n;
        if q0.len() != n || u0.len() != n {
            return Err(Error::ShapeMismatch("q0/u0 dimension".into()));
        }
        let mut theta = SpectralField::zeros(grid, 1);
        let mut q = SpectralField::zeros(grid, n);
        let mut u = SpectralField::zeros(grid, n);
        let k0 = vec![0i64; n];
        for it in 0..grid.n_t {
            theta.set_mode(0, it, &k0, Complex::new(theta0, T::zero()))?;
            for c in 0..n {
                q.set_mode(c, it, &k0, Complex::new(q0[c], T::zero()))?;
                u.set_mode(c, it, &k0, Complex::new(u0[c], T::zero()))?;
            }
        }
        Self::new(theta, q, u, symbol.clone())
    }

    pub fn grid(&self) -> &GridSpec<T> {
        self.theta.grid()
    }

    pub fn symbol(&self) -> &MultiplierSymbol<T> {
        &self.symbol
    }

    /// Pointwise state values, shape [2n+1, n_t, spatial...]:
    /// channel 0 = theta, 1..=n  = q, n+1..=2n = u.
    pub fn state_values(&self) -> ArrayD<T> {
        let n = self.grid().n;
        let mut shape = vec![2 * n + 1];
        shape.extend(self.grid().channel_shape());
        let mut out = ArrayD::zeros(IxDyn(&shape));
        let th = self.theta.to_physical();
        let q = self.q.to_physical();
        let u = self.u.to_physical();
        let per = self.grid().n_t * self.grid().spatial_len();
        {
            let flat = out.as_slice_mut().unwrap();
            flat[..per].copy_from_slice(&th.as_slice().unwrap()[..per]);
            for c in 0..n {
                flat[(1 + c) * per..(2 + c) * per]
                    .copy_from_slice(&q.as_slice().unwrap()[c * per..(c + 1) * per]);
                flat[(1 + n + c) * per..(2 + n + c) * per]
                    .copy_from_slice(&u.as_slice().unwrap()[c * per..(c + 1) * per]);
            }
        }
        out
    }

    /// Sum with a perturbation state on the same grid.
    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            theta: self.theta.add(&other.theta)?,
            q: self.q.add(&other.q)?,
            u: self.u.add(&other.u)?,
            symbol: self.symbol.clone(),
        })
    }

    /// L2(Omega_T)^2 of the full matrix field.
    pub fn l2_norm_sq(&self) -> T {
        self.theta.l2_norm_sq() + self.q.l2_norm_sq() + self.u.l2_norm_sq()
    }

    /// Per-row space-time divergence residual.
    pub fn spacetime_divergence(&self) -> Result<DivergenceResidual<T>> {
        let n = self.grid().n;
        let dt_theta = self.theta.time_derivative()?;
        let mut div_q = self.q.channel(0).spatial_derivative(0);
        for a in 1..n {
            div_q = div_q.add(&self.q.channel(a).spatial_derivative(a))?;
        }
        let mut div_u = self.u.channel(0).spatial_derivative(0);
        for a in 1..n {
            div_u = div_u.add(&self.u.channel(a).spatial_derivative(a))?;
        }
        let dt_phys = dt_theta.to_physical();
        let dq_phys = div_q.to_physical();
        let row1 = &dt_phys + &dq_phys;
        let row2 = div_u.to_physical();
        let sup = |a: &ArrayD<T>| a.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let row1_sup = sup(&row1);
        let row2_sup = sup(&row2);
        let scale1 = sup(&dt_phys).max(sup(&dq_phys));
        // per-component scale for div u
        let mut scale2 = T::zero();
        for a in 0..n {
            scale2 = scale2.max(sup(&self.u.channel(a).spatial_derivative(a).to_physical()));
        }
        let floor = T::noise_floor() * T::noise_floor();
        let rel = |num: T, den: T| {
            if den > floor {
                num / den
            } else if num > floor {
                T::one()
            } else {
                T::zero()
            }
        };
        Ok(DivergenceResidual {
            row1_relative: rel(row1_sup, scale1),
            row2_relative: rel(row2_sup, scale2),
            row1,
            row2,
            row1_sup,
            row2_sup,
        })
    }
}

/// Fraction of spectral energy whose direction lies in the union of the
/// patches and their antipodes. Coefficients with modulus below
/// `energy_floor * max-modulus` are treated as FP dust and ignored.
pub fn support_cone_check<T: Real>(
    field: &SpectralField<T>,
    patches: &[RegularPatch<T>],
    energy_floor: T,
) -> T {
    let grid = field.grid();
    let spatial = grid.spatial_len();
    let mut max_mod = T::zero();
    for c in field.coeffs().iter() {
        max_mod = max_mod.max(c.norm());
    }
    if max_mod == T::zero() {
        return T::one();
    }
    let dust = energy_floor * max_mod;
    let mut inside = T::zero();
    let mut counted = T::zero();
    for s in 1..spatial {
        let k = grid.mode_of_flat(s);
        let mut dir: Vec<T> = k.iter().map(|&ki| r(ki as f64)).collect();
        crate::scalar::normalize(&mut dir);
        let in_cone = patches.iter().any(|p| p.contains_direction(&dir));
        for ch in 0..field.channels() {
            for it in 0..grid.n_t {
                let c = field.flat()[(ch * grid.n_t + it) * spatial + s];
                let e = c.norm_sqr();
                if c.norm() > dust {
                    counted += e;
                    if in_cone {
                        inside += e;
                    }
                }
            }
        }
    }
    if counted == T::zero() {
        T::one()
    } else {
        inside / counted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid2(n_x: usize, n_t: usize) -> GridSpec<f64> {
        GridSpec::new(2, n_x, n_t, 1.0).unwrap()
    }

    #[test]
    fn constant_field_roundtrip() {
        let g = grid2(8, 4);
        let f = SpectralField::from_fn(&g, 1, |_, _, _| 1.0);
        // all mass at k = 0
        assert!((f.mode(0, 0, &[0, 0]).unwrap().re - 1.0).abs() < 1e-14);
        let phys = f.to_physical();
        for &v in phys.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_coefficients() {
        let g = grid2(16, 2);
        let f = SpectralField::from_fn(&g, 1, |_, _, x| x[0].cos());
        let c = f.mode(0, 0, &[1, 0]).unwrap();
        assert!((c.re - 0.5).abs() < 1e-13 && c.im.abs() < 1e-13);
        let c = f.mode(0, 0, &[-1, 0]).unwrap();
        assert!((c.re - 0.5).abs() < 1e-13);
    }

    #[test]
    fn random_roundtrip_and_parseval() {
        let g = grid2(16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut shape = vec![1usize];
        shape.extend(g.channel_shape());
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0));
        let f = SpectralField::from_physical(&g, &data).unwrap();
        let back = f.to_physical();
        let mut max_err: f64 = 0.0;
        for (a, b) in data.iter().zip(back.iter()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 1e-12, "roundtrip error {max_err}");

        // Parseval: mean |f|^2 = sum |fhat|^2 per slice
        let spatial = g.spatial_len() as f64;
        for it in 0..g.n_t {
            let mut phys_sq = 0.0;
            let mut spec_sq = 0.0;
            for s in 0..g.spatial_len() {
                phys_sq += data.as_slice().unwrap()[it * g.spatial_len() + s].powi(2);
                spec_sq += f.flat()[it * g.spatial_len() + s].norm_sqr();
            }
            let rel = (phys_sq / spatial - spec_sq).abs() / (phys_sq / spatial);
            assert!(rel < 1e-10, "parseval rel err {rel}");
        }
    }

    #[test]
    fn multiplier_single_mode() {
        let g = grid2(16, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let theta = SpectralField::from_fn(&g, 1, |_, _, x| x[0].cos());
        let u = apply_multiplier(&theta, &sym).unwrap();
        // m(1,0) = (0,-1): u = (0, -cos x1)
        let u_phys = u.to_physical();
        let spatial = g.spatial_len();
        for s in 0..spatial {
            let x0 = g.x_of(s / g.n_x);
            let expect = [0.0, -x0.cos()];
            for c in 0..2 {
                let v = u_phys.as_slice().unwrap()[(c * g.n_t) * spatial + s];
                assert!((v - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multiplier_zero_field() {
        let g = grid2(8, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let theta = SpectralField::zeros(&g, 1);
        let u = apply_multiplier(&theta, &sym).unwrap();
        assert_eq!(u.sup_norm(), 0.0);
    }

    /// Direct DFT-sum oracle: u(x) = sum_k m(k) theta_hat(k) e^{i k.x}.
    fn dft_oracle_2d(
        g: &GridSpec<f64>,
        sym: &MultiplierSymbol<f64>,
        theta: &SpectralField<f64>,
        it: usize,
    ) -> Vec<Vec<f64>> {
        let spatial = g.spatial_len();
        let mut out = vec![vec![0.0; spatial]; 2];
        for s_out in 0..spatial {
            let ix = [s_out / g.n_x, s_out % g.n_x];
            let x = [g.x_of(ix[0]), g.x_of(ix[1])];
            let mut acc = [Complex::new(0.0, 0.0); 2];
            for s in 0..spatial {
                let k = g.mode_of_flat(s);
                if k.iter().all(|&ki| ki == 0) {
                    continue;
                }
                if k.iter().any(|&ki| ki.abs() >= (g.n_x / 2) as i64) {
                    continue;
                }
                let m = sym.evaluate(&[k[0] as f64, k[1] as f64]).unwrap();
                let phase = k[0] as f64 * x[0] + k[1] as f64 * x[1];
                let e = Complex::new(phase.cos(), phase.sin());
                let th = theta.flat()[it * spatial + s];
                for c in 0..2 {
                    acc[c] += th * e * m[c];
                }
            }
            for c in 0..2 {
                out[c][s_out] = acc[c].re;
            }
        }
        out
    }

    #[test]
    fn multiplier_matches_dft_sum_oracle() {
        let g = grid2(8, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let theta = SpectralField::from_fn(&g, 1, |_, _, x| {
            (x[0] + x[1]).cos() + (2.0 * x[0]).cos() + 0.3 * (3.0 * x[1] - x[0]).sin()
        });
        let u = apply_multiplier(&theta, &sym).unwrap();
        let u_phys = u.to_physical();
        let spatial = g.spatial_len();
        let oracle = dft_oracle_2d(&g, &sym, &theta, 0);
        for c in 0..2 {
            for s in 0..spatial {
                let got = u_phys.as_slice().unwrap()[c * g.n_t * spatial + s];
                assert!(
                    (got - oracle[c][s]).abs() < 1e-10,
                    "c={c} s={s}: {got} vs {}",
                    oracle[c][s]
                );
            }
        }
    }

    #[test]
    fn multiplier_linearity() {
        let g = grid2(16, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let f1 = SpectralField::from_fn(&g, 1, |_, _, x| (x[0] + 2.0 * x[1]).cos());
        let f2 = SpectralField::from_fn(&g, 1, |_, _, x| (3.0 * x[0]).sin());
        let lhs = apply_multiplier(&f1.scale(1.7).add(&f2.scale(-0.4)).unwrap(), &sym).unwrap();
        let rhs = apply_multiplier(&f1, &sym)
            .unwrap()
            .scale(1.7)
            .add(&apply_multiplier(&f2, &sym).unwrap().scale(-0.4))
            .unwrap();
        let d = lhs.add(&rhs.scale(-1.0)).unwrap().sup_norm();
        assert!(d < 1e-12);
    }

    #[test]
    fn multiplier_output_is_divergence_free() {
        let g = grid2(16, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let theta = SpectralField::from_fn(&g, 1, |_, _, x| {
            0.7 * (x[0] + x[1]).cos() - 0.2 * (2.0 * x[0] + x[1]).cos()
                + (x[0] - 2.0 * x[1]).sin()
        });
        let u = apply_multiplier(&theta, &sym).unwrap();
        let mut div = u.channel(0).spatial_derivative(0);
        div = div.add(&u.channel(1).spatial_derivative(1)).unwrap();
        assert!(div.sup_norm() < 1e-12);
    }

    #[test]
    fn divergence_of_constant_state_is_zero() {
        let g = grid2(8, 8);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let st = StateField::constant(&g, &sym, 0.0, &[0.5, 0.0], &[0.0, 0.0]).unwrap();
        let d = st.spacetime_divergence().unwrap();
        assert_eq!(d.row1_relative, 0.0);
        assert_eq!(d.row2_relative, 0.0);
    }

    #[test]
    fn divergence_analytic_example() {
        // theta = sin(t) cos(x1), q = 0, u = 0: row1 = cos(t) cos(x1)
        let g = GridSpec::new(2, 16, 64, std::f64::consts::TAU).unwrap();
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let theta = SpectralField::from_fn(&g, 1, |_, t, x| t.sin() * x[0].cos());
        let q = SpectralField::zeros(&g, 2);
        let u = SpectralField::zeros(&g, 2);
        let st = StateField::new(theta, q, u, sym).unwrap();
        let d = st.spacetime_divergence().unwrap();
        let mut worst: f64 = 0.0;
        let spatial = g.spatial_len();
        for it in 0..g.n_t {
            let t = g.t_of(it);
            for s in 0..spatial {
                let x0 = g.x_of(s / g.n_x);
                let expect = t.cos() * x0.cos();
                let got = d.row1.as_slice().unwrap()[it * spatial + s];
                worst = worst.max((got - expect).abs());
            }
        }
        assert!(worst < 2e-4, "FD4 truncation error too big: {worst}");
        assert!((d.row1_sup - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cone_check_single_modes() {
        let g = grid2(16, 2);
        let patch = RegularPatch {
            center: vec![1.0, 0.0],
            angular_radius: 0.1,
            jacobian_min_singular_value: 1.0,
        };
        let mut f = SpectralField::zeros(&g, 1);
        f.set_mode(0, 0, &[5, 0], Complex::new(1.0, 0.0)).unwrap();
        f.set_mode(0, 0, &[-5, 0], Complex::new(1.0, 0.0)).unwrap();
        assert_eq!(support_cone_check(&f, &[patch.clone()], 1e-12), 1.0);
        let mut f = SpectralField::zeros(&g, 1);
        f.set_mode(0, 0, &[0, 5], Complex::new(1.0, 0.0)).unwrap();
        assert_eq!(support_cone_check(&f, &[patch], 1e-12), 0.0);
    }

    #[test]
    fn zero_mean_enforcement() {
        let g = grid2(8, 2);
        let f = SpectralField::from_fn(&g, 1, |_, _, x| 2.0 + x[0].cos());
        let f = f.enforce_zero_mean();
        assert!(f.max_spatial_mean() < 1e-14);
        // cos(x1) survives
        assert!((f.mode(0, 0, &[1, 0]).unwrap().re - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = grid2(8, 3);
        let mut shape = vec![1usize];
        shape.extend(g.channel_shape());
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0));
        let f = SpectralField::from_physical(&g, &data)
            .unwrap()
            .enforce_zero_mean();
        assert!(f.max_spatial_mean() < 1e-14);
    }

    #[test]
    fn spectral_time_derivative_exact_for_trig() {
        let g = GridSpec::new(2, 8, 32, 2.0).unwrap();
        let omega = std::f64::consts::TAU / 2.0;
        let f = SpectralField::from_fn(&g, 1, |_, t, x| (3.0 * omega * t).sin() * x[0].cos())
            .with_time_scheme(TimeScheme::Spectral);
        let df = f.time_derivative().unwrap().to_physical();
        let spatial = g.spatial_len();
        for it in 0..g.n_t {
            let t = g.t_of(it);
            for s in 0..spatial {
                let x0 = g.x_of(s / g.n_x);
                let expect = 3.0 * omega * (3.0 * omega * t).cos() * x0.cos();
                let got = df.as_slice().unwrap()[it * spatial + s];
                assert!((got - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frozen_symbol_patch_bound() {
        // theta supported in a narrow cone around xi0: || u - m(xi0) theta ||
        // bounded by the patch Lipschitz constant times the cone width.
        let g = grid2(64, 2);
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let mut theta = SpectralField::zeros(&g, 1);
        // modes (16, j), |j| <= 2: directions within atan(2/16) of (1,0)
        for j in -2i64..=2 {
            theta
                .set_mode(0, 0, &[16, j], Complex::new(0.2, 0.1 * j as f64))
                .unwrap();
            theta
                .set_mode(0, 0, &[-16, -j], Complex::new(0.2, -0.1 * j as f64))
                .unwrap();
        }
        let u = apply_multiplier(&theta, &sym).unwrap();
        let m0 = sym.evaluate(&[1.0, 0.0]).unwrap();
        let th_phys = theta.to_physical();
        let u_phys = u.to_physical();
        let spatial = g.spatial_len();
        let mut err: f64 = 0.0;
        for c in 0..2 {
            for s in 0..spatial {
                let diff = u_phys.as_slice().unwrap()[c * g.n_t * spatial + s]
                    - m0[c] * th_phys.as_slice().unwrap()[s];
                err = err.max(diff.abs());
            }
        }
        let width = (2.0f64 / 16.0).atan();
        let theta_sup = theta.sup_norm();
        // |dm/dalpha| = 1 on the pm2d circle; allow factor 2 slack
        assert!(
            err <= 2.0 * width * theta_sup,
            "frozen-symbol error {err} vs bound {}",
            2.0 * width * theta_sup
        );
    }
}
