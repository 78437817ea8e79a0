//! Fourier multiplier symbols m(xi) and their admissibility gates.
//!
//! A symbol is admissible when it is even, 0-homogeneous and tangent
//! (m(xi) . xi = 0). The built-ins cover the 2D/3D porous media symbols, the
//! magnetostrophic symbol (singular on the xi_1-axis) and the quasi-geostrophic
//! symbol, which is odd and therefore rejected by the gate.

use crate::error::{Error, Result};
use crate::scalar::{angle_between, dot, norm, normalize, r, singular_values_tall, Real};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

/// Closed-form kinds plus tabulated data loaded from disk.
#[derive(Debug, Clone)]
enum SymbolKind<T> {
    Pm2d,
    Pm3d,
    Mg,
    Sqg,
    Tabulated(Arc<TabulatedSymbol<T>>),
}

/// An evaluable Fourier multiplier symbol on R^n \ {0}.
#[derive(Debug, Clone)]
pub struct MultiplierSymbol<T> {
    name: String,
    dim: usize,
    kind: SymbolKind<T>,
    /// Metadata hint recorded at construction; the admissibility check
    /// measures the real thing.
    even_hint: bool,
    singular_set: &'static str,
}

impl<T: Real> MultiplierSymbol<T> {
    /// Look up a built-in symbol by name.
    pub fn builtin(name: &str) -> Result<Self> {
        let (kind, dim, even_hint, singular) = match name {
            "pm2d" => (SymbolKind::Pm2d, 2, true, "none (every direction regular)"),
            "pm3d" => (SymbolKind::Pm3d, 3, true, "none"),
            "mg" => (SymbolKind::Mg, 3, true, "xi_2 = xi_3 = 0 (the xi_1-axis)"),
            "sqg" => (SymbolKind::Sqg, 2, false, "none"),
            other => return Err(Error::UnknownSymbol(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            dim,
            kind,
            even_hint,
            singular_set: singular,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Construction-time hint whether the symbol is even; `sqg` carries
    /// `false`. The measured admissibility report is authoritative.
    pub fn even_hint(&self) -> bool {
        self.even_hint
    }

    pub fn singular_set_description(&self) -> &'static str {
        self.singular_set
    }

    /// True when `xi` lies in the declared singular set (relative guard).
    pub fn is_singular(&self, xi: &[T]) -> bool {
        match self.kind {
            SymbolKind::Mg => {
                let guard = r::<T>(1e-9) * norm(xi);
                xi[1].abs() <= guard && xi[2].abs() <= guard
            }
            _ => false,
        }
    }

    /// Evaluate m(xi). Errors on the zero frequency and on the singular set.
    pub fn evaluate(&self, xi: &[T]) -> Result<Vec<T>> {
        if xi.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "symbol `{}` has dimension {}, got frequency of length {}",
                self.name,
                self.dim,
                xi.len()
            )));
        }
        let n2 = dot(xi, xi);
        if n2 == T::zero() {
            return Err(Error::ZeroFrequency);
        }
        if self.is_singular(xi) {
            return Err(Error::SingularFrequency(
                xi.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
                self.name.clone(),
            ));
        }
        Ok(match &self.kind {
            SymbolKind::Pm2d => {
                // m(xi) = |xi|^-2 (xi1 xi2, -xi1^2)
                vec![xi[0] * xi[1] / n2, -xi[0] * xi[0] / n2]
            }
            SymbolKind::Pm3d => {
                // m(xi) = |xi|^-2 (xi1 xi3, xi2 xi3, -xi1^2 - xi2^2)
                vec![
                    xi[0] * xi[2] / n2,
                    xi[1] * xi[2] / n2,
                    -(xi[0] * xi[0] + xi[1] * xi[1]) / n2,
                ]
            }
            SymbolKind::Mg => {
                let (x1, x2, x3) = (xi[0], xi[1], xi[2]);
                let den = x3 * x3 * n2 + x2 * x2 * x2 * x2;
                vec![
                    (x2 * x3 * n2 + x1 * x2 * x2 * x3) / den,
                    (-x1 * x3 * n2 + x2 * x2 * x2 * x3) / den,
                    -(x2 * x2 * (x1 * x1 + x2 * x2)) / den,
                ]
            }
            SymbolKind::Sqg => {
                // i |xi|^-1 (-xi2, xi1); we evaluate the vector part. The
                // admissibility gate rejects it through the evenness test.
                let n1 = n2.sqrt();
                vec![-xi[1] / n1, xi[0] / n1]
            }
            SymbolKind::Tabulated(tab) => tab.eval(xi),
        })
    }

    /// Load a tabulated symbol from the documented binary format:
    /// magic "MSYM", u32 LE dimension n, u32 LE grid counts (1 value for
    /// n = 2, 2 values for n = 3), then f64 LE samples of m on the uniform
    /// unit-sphere grid, innermost index being the vector component.
    pub fn from_tabulated_file(name: &str, path: &Path) -> Result<Self> {
        let tab = TabulatedSymbol::read(path)?;
        let dim = tab.dim;
        Ok(Self {
            name: name.to_string(),
            dim,
            kind: SymbolKind::Tabulated(Arc::new(tab)),
            even_hint: true,
            singular_set: "unknown (tabulated)",
        })
    }
}

/// Uniform unit-sphere tabulation with linear interpolation.
#[derive(Debug, Clone)]
pub struct TabulatedSymbol<T> {
    dim: usize,
    /// Azimuth sample count (n = 2 and n = 3).
    n_az: usize,
    /// Polar sample count (n = 3 only; 1 otherwise).
    n_pol: usize,
    /// Row-major values: [polar][azimuth][component].
    values: Vec<T>,
}

impl<T: Real> TabulatedSymbol<T> {
    fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"MSYM" {
            return Err(Error::Format("bad magic, expected MSYM".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if !(2..=3).contains(&dim) {
            return Err(Error::Format(format!("unsupported dimension {dim}")));
        }
        f.read_exact(&mut u32buf)?;
        let n_az = u32::from_le_bytes(u32buf) as usize;
        let n_pol = if dim == 3 {
            f.read_exact(&mut u32buf)?;
            u32::from_le_bytes(u32buf) as usize
        } else {
            1
        };
        if n_az < 4 || (dim == 3 && n_pol < 3) {
            return Err(Error::Format("tabulation grid too coarse".into()));
        }
        let count = n_az * n_pol * dim;
        let mut values = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for _ in 0..count {
            f.read_exact(&mut f64buf)?;
            values.push(r(f64::from_le_bytes(f64buf)));
        }
        Ok(Self {
            dim,
            n_az,
            n_pol,
            values,
        })
    }

    fn eval(&self, xi: &[T]) -> Vec<T> {
        let mut u = xi.to_vec();
        normalize(&mut u);
        let tau = T::TAU().to_f64().unwrap();
        match self.dim {
            2 => {
                let az = u[1].to_f64().unwrap().atan2(u[0].to_f64().unwrap());
                let pos = (az.rem_euclid(tau)) / tau * self.n_az as f64;
                let i0 = pos.floor() as usize % self.n_az;
                let i1 = (i0 + 1) % self.n_az;
                let w = r::<T>(pos - pos.floor());
                (0..2)
                    .map(|c| {
                        let v0 = self.values[i0 * 2 + c];
                        let v1 = self.values[i1 * 2 + c];
                        v0 + (v1 - v0) * w
                    })
                    .collect()
            }
            3 => {
                let az = u[1].to_f64().unwrap().atan2(u[0].to_f64().unwrap());
                let pol = u[2].to_f64().unwrap().clamp(-1.0, 1.0).acos();
                let pa = (az.rem_euclid(tau)) / tau * self.n_az as f64;
                let pp = pol / std::f64::consts::PI * (self.n_pol - 1) as f64;
                let ia0 = pa.floor() as usize % self.n_az;
                let ia1 = (ia0 + 1) % self.n_az;
                let ip0 = (pp.floor() as usize).min(self.n_pol - 1);
                let ip1 = (ip0 + 1).min(self.n_pol - 1);
                let wa = r::<T>(pa - pa.floor());
                let wp = r::<T>(pp - pp.floor());
                (0..3)
                    .map(|c| {
                        let at = |ip: usize, ia: usize| self.values[(ip * self.n_az + ia) * 3 + c];
                        let v0 = at(ip0, ia0) + (at(ip0, ia1) - at(ip0, ia0)) * wa;
                        let v1 = at(ip1, ia0) + (at(ip1, ia1) - at(ip1, ia0)) * wa;
                        v0 + (v1 - v0) * wp
                    })
                    .collect()
            }
            _ => unreachable!(),
        }
    }
}

/// Outcome of the admissibility gate.
#[derive(Debug, Clone)]
pub struct AdmissibilityReport<T> {
    pub even: bool,
    pub zero_homogeneous: bool,
    pub tangent: bool,
    pub worst_even: T,
    pub worst_homogeneity: T,
    pub worst_tangency: T,
    pub samples: usize,
}

impl<T: Real> AdmissibilityReport<T> {
    pub fn admissible(&self) -> bool {
        self.even && self.zero_homogeneous && self.tangent
    }
}

/// Seeded unit-sphere sample avoiding the declared singular set.
fn sphere_samples<T: Real>(
    symbol: &MultiplierSymbol<T>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<T> = (0..symbol.dim())
            .map(|_| r(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        if normalize(&mut v) < r(1e-6) {
            continue;
        }
        // keep samples clear of the singular set so finite differences stay sane
        if symbol.dim() == 3 && {
            let planar = (v[1] * v[1] + v[2] * v[2]).sqrt();
            planar < r(0.05)
        } && symbol.is_singular_adjacent()
        {
            continue;
        }
        out.push(v);
    }
    out
}

impl<T: Real> MultiplierSymbol<T> {
    fn is_singular_adjacent(&self) -> bool {
        matches!(self.kind, SymbolKind::Mg)
    }

    /// Sampled admissibility gate: evenness, 0-homogeneity and tangency of
    /// the symbol, each within `tol` at every sample.
    pub fn check_admissibility(&self, sample_count: usize, tol: T, seed: u64) -> AdmissibilityReport<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = sphere_samples(self, sample_count.max(1), &mut rng);
        let mut worst_even = T::zero();
        let mut worst_hom = T::zero();
        let mut worst_tan = T::zero();
        for xi in &samples {
            let m = match self.evaluate(xi) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let neg: Vec<T> = xi.iter().map(|&x| -x).collect();
            if let Ok(mn) = self.evaluate(&neg) {
                let d = m
                    .iter()
                    .zip(&mn)
                    .map(|(&a, &b)| (a - b).abs())
                    .fold(T::zero(), |a, b| a.max(b));
                worst_even = worst_even.max(d);
            }
            for scale in [r::<T>(3.7), r::<T>(0.23)] {
                let scaled: Vec<T> = xi.iter().map(|&x| x * scale).collect();
                if let Ok(ms) = self.evaluate(&scaled) {
                    let d = m
                        .iter()
                        .zip(&ms)
                        .map(|(&a, &b)| (a - b).abs())
                        .fold(T::zero(), |a, b| a.max(b));
                    worst_hom = worst_hom.max(d);
                }
            }
            worst_tan = worst_tan.max(dot(&m, xi).abs());
        }
        AdmissibilityReport {
            even: worst_even <= tol,
            zero_homogeneous: worst_hom <= tol,
            tangent: worst_tan <= tol,
            worst_even,
            worst_homogeneity: worst_hom,
            worst_tangency: worst_tan,
            samples: samples.len(),
        }
    }
}

/// A spherical cap of regular directions: m restricted to the sphere is a
/// C^1 immersion on the cap, certified by finite differences.
#[derive(Debug, Clone)]
pub struct RegularPatch<T> {
    pub center: Vec<T>,
    pub angular_radius: T,
    pub jacobian_min_singular_value: T,
}

impl<T: Real> RegularPatch<T> {
    /// Whether a direction lies in the patch or its antipode.
    pub fn contains_direction(&self, dir: &[T]) -> bool {
        let a = angle_between(&self.center, dir);
        let b = T::PI() - a;
        a.min(b) <= self.angular_radius
    }

    /// Angle from the patch center (not folding antipodes).
    pub fn angle_from_center(&self, dir: &[T]) -> T {
        angle_between(&self.center, dir)
    }
}

/// Orthonormal tangent basis at a unit vector.
fn tangent_basis<T: Real>(u: &[T]) -> Vec<Vec<T>> {
    let n = u.len();
    // pick the axis least aligned with u, Gram-Schmidt the rest
    let mut basis: Vec<Vec<T>> = Vec::new();
    let mut candidates: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let mut e = vec![T::zero(); n];
            e[i] = T::one();
            e
        })
        .collect();
    candidates.sort_by(|a, b| {
        dot(a, u)
            .abs()
            .partial_cmp(&dot(b, u).abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for c in candidates.into_iter().take(n - 1) {
        let mut v = c;
        let du = dot(&v, u);
        for (vi, &ui) in v.iter_mut().zip(u) {
            *vi -= du * ui;
        }
        for b in &basis {
            let db = dot(&v, b);
            for (vi, &bi) in v.iter_mut().zip(b.iter()) {
                *vi -= db * bi;
            }
        }
        if normalize(&mut v) > r(1e-8) {
            basis.push(v);
        }
    }
    basis
}

/// Rotate `u` by angle `h` toward tangent direction `t`.
fn rotate_towards<T: Real>(u: &[T], t: &[T], h: T) -> Vec<T> {
    let (c, s) = (h.cos(), h.sin());
    u.iter().zip(t).map(|(&ui, &ti)| c * ui + s * ti).collect()
}

/// Finite-difference Jacobian of m restricted to the sphere; returns the
/// singular values (descending) or None when evaluation fails nearby.
pub fn sphere_jacobian_svals<T: Real>(
    symbol: &MultiplierSymbol<T>,
    u: &[T],
    h: T,
) -> Option<Vec<T>> {
    let basis = tangent_basis(u);
    let mut cols = Vec::with_capacity(basis.len());
    for t in &basis {
        let plus = symbol.evaluate(&rotate_towards(u, t, h)).ok()?;
        let minus = symbol.evaluate(&rotate_towards(u, t, -h)).ok()?;
        let col: Vec<T> = plus
            .iter()
            .zip(&minus)
            .map(|(&a, &b)| (a - b) / (r::<T>(2.0) * h))
            .collect();
        cols.push(col);
    }
    Some(singular_values_tall(&cols))
}

/// Scan the sphere for patches on which m is an immersion.
///
/// `resolution` is the angular step of the scan grid, `svd_floor` the
/// smallest acceptable tangential singular value. The finite-difference step
/// defaults to 1e-4 rad.
pub fn find_regular_patches<T: Real>(
    symbol: &MultiplierSymbol<T>,
    resolution: T,
    svd_floor: T,
) -> Result<Vec<RegularPatch<T>>> {
    let fd_h = r::<T>(1e-4);
    let dirs = scan_directions(symbol.dim(), resolution);
    let mut pass: Vec<(Vec<T>, T)> = Vec::new();
    for d in &dirs {
        if let Some(sv) = sphere_jacobian_svals(symbol, d, fd_h) {
            let min_sv = *sv.last().unwrap();
            if min_sv >= svd_floor {
                pass.push((d.clone(), min_sv));
            }
        }
    }
    if pass.is_empty() {
        return Err(Error::NoRegularPoints);
    }
    // grow a maximal cap around the best centers; greedily keep caps whose
    // centers are not already covered
    pass.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut patches: Vec<RegularPatch<T>> = Vec::new();
    for (center, _) in &pass {
        if patches.iter().any(|p| p.contains_direction(center)) {
            continue;
        }
        if let Some(patch) = grow_patch(symbol, center, resolution, svd_floor, fd_h) {
            patches.push(patch);
        }
        if patches.len() >= 8 {
            break;
        }
    }
    if patches.is_empty() {
        Err(Error::NoRegularPoints)
    } else {
        Ok(patches)
    }
}

fn scan_directions<T: Real>(dim: usize, resolution: T) -> Vec<Vec<T>> {
    let res = resolution.to_f64().unwrap().clamp(1e-3, 0.5);
    let mut dirs = Vec::new();
    match dim {
        2 => {
            let steps = (std::f64::consts::TAU / res).ceil() as usize;
            for i in 0..steps {
                let a = std::f64::consts::TAU * i as f64 / steps as f64;
                dirs.push(vec![r(a.cos()), r(a.sin())]);
            }
        }
        3 => {
            let steps = (std::f64::consts::PI / res).ceil() as usize;
            for ip in 0..=steps {
                let pol = std::f64::consts::PI * ip as f64 / steps as f64;
                let ring = ((std::f64::consts::TAU * pol.sin() / res).ceil() as usize).max(1);
                for ia in 0..ring {
                    let az = std::f64::consts::TAU * ia as f64 / ring as f64;
                    dirs.push(vec![
                        r(pol.sin() * az.cos()),
                        r(pol.sin() * az.sin()),
                        r(pol.cos()),
                    ]);
                }
            }
        }
        _ => unreachable!(),
    }
    dirs
}

fn grow_patch<T: Real>(
    symbol: &MultiplierSymbol<T>,
    center: &[T],
    resolution: T,
    svd_floor: T,
    fd_h: T,
) -> Option<RegularPatch<T>> {
    let basis = tangent_basis(center);
    let probe_ok = |radius: T| -> Option<T> {
        let mut min_sv = T::max_value();
        // probe boundary ring plus interior ring at radius/2
        for &rad in &[radius, radius * r(0.5)] {
            if rad == T::zero() {
                continue;
            }
            let spokes = 8;
            for s in 0..spokes {
                let a = T::TAU() * r::<T>(s as f64) / r(spokes as f64);
                let mut t = vec![T::zero(); center.len()];
                for (i, b) in basis.iter().enumerate() {
                    let w = if i == 0 { a.cos() } else { a.sin() };
                    for (ti, &bi) in t.iter_mut().zip(b.iter()) {
                        *ti += w * bi;
                    }
                }
                if basis.len() == 1 {
                    // 1D tangent: probe both directions
                    t = basis[0].clone();
                    let p = rotate_towards(center, &t, if s % 2 == 0 { rad } else { -rad });
                    let sv = sphere_jacobian_svals(symbol, &p, fd_h)?;
                    min_sv = min_sv.min(*sv.last().unwrap());
                    continue;
                }
                normalize(&mut t);
                let p = rotate_towards(center, &t, rad);
                let sv = sphere_jacobian_svals(symbol, &p, fd_h)?;
                min_sv = min_sv.min(*sv.last().unwrap());
            }
        }
        if min_sv >= svd_floor {
            Some(min_sv)
        } else {
            None
        }
    };

    let center_sv = sphere_jacobian_svals(symbol, center, fd_h)?;
    let mut best_radius = T::zero();
    let mut best_sv = *center_sv.last().unwrap();
    if best_sv < svd_floor {
        return None;
    }
    let mut radius = resolution;
    let max_radius = T::PI() * r(0.5);
    while radius <= max_radius {
        match probe_ok(radius) {
            Some(sv) => {
                best_radius = radius;
                best_sv = best_sv.min(sv);
                radius += resolution;
            }
            None => break,
        }
    }
    if best_radius == T::zero() {
        // immersion holds only right at the center; still a (tiny) patch
        best_radius = resolution * r(0.5);
    }
    Some(RegularPatch {
        center: center.to_vec(),
        angular_radius: best_radius,
        jacobian_min_singular_value: best_sv,
    })
}

/// Result of the span test: does m over the regular set span R^n?
#[derive(Debug, Clone)]
pub struct SpanWitness<T> {
    pub spans: bool,
    /// Frequencies whose images are linearly independent (when spanning).
    pub witness: Vec<Vec<T>>,
}

/// Greedy rank test of { m(xi) : xi in the patches }.
pub fn check_span_condition<T: Real>(
    symbol: &MultiplierSymbol<T>,
    patches: &[RegularPatch<T>],
) -> SpanWitness<T> {
    let n = symbol.dim();
    let mut basis: Vec<Vec<T>> = Vec::new();
    let mut witness: Vec<Vec<T>> = Vec::new();
    for patch in patches {
        let tangents = tangent_basis(&patch.center);
        let steps = 24;
        for i in 0..steps {
            let frac = r::<T>(i as f64) / r(steps as f64) - r(0.5);
            let ang = patch.angular_radius * r::<T>(2.0) * frac;
            for t in &tangents {
                let dir = rotate_towards(&patch.center, t, ang);
                let m = match symbol.evaluate(&dir) {
                    Ok(m) => m,
                    Err(_) => continue,
                };
                // Gram-Schmidt against current basis
                let mut v = m.clone();
                for b in &basis {
                    let d = dot(&v, b);
                    for (vi, &bi) in v.iter_mut().zip(b.iter()) {
                        *vi -= d * bi;
                    }
                }
                if normalize(&mut v) > r(1e-8) {
                    basis.push(v);
                    witness.push(dir);
                    if basis.len() == n {
                        return SpanWitness {
                            spans: true,
                            witness,
                        };
                    }
                }
            }
        }
    }
    SpanWitness {
        spans: false,
        witness,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtin64(name: &str) -> MultiplierSymbol<f64> {
        MultiplierSymbol::builtin(name).unwrap()
    }

    #[test]
    fn pm2d_direct_substitution() {
        let m = builtin64("pm2d").evaluate(&[1.0, 1.0]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((m[1] + 0.5).abs() < 1e-15);
        assert!((m[0] * 1.0 + m[1] * 1.0).abs() < 1e-15);
    }

    #[test]
    fn pm3d_direct_substitution() {
        let m = builtin64("pm3d").evaluate(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(m, vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn mg_hand_evaluation() {
        // xi = (0,1,1): den = 1*2 + 1 = 3, M = (2/3, 1/3, -1/3)
        let m = builtin64("mg").evaluate(&[0.0, 1.0, 1.0]).unwrap();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((m[2] + 1.0 / 3.0).abs() < 1e-15);
        let tangency: f64 = m[0] * 0.0 + m[1] * 1.0 + m[2] * 1.0;
        assert!(tangency.abs() < 1e-15);
    }

    #[test]
    fn mg_singular_on_axis() {
        let s = builtin64("mg");
        assert!(matches!(
            s.evaluate(&[1.0, 0.0, 0.0]),
            Err(Error::SingularFrequency(..))
        ));
    }

    #[test]
    fn zero_frequency_rejected() {
        assert!(matches!(
            builtin64("pm2d").evaluate(&[0.0, 0.0]),
            Err(Error::ZeroFrequency)
        ));
    }

    #[test]
    fn unknown_symbol() {
        assert!(matches!(
            MultiplierSymbol::<f64>::builtin("euler"),
            Err(Error::UnknownSymbol(_))
        ));
    }

    #[test]
    fn admissibility_flags() {
        let rep = builtin64("pm2d").check_admissibility(200, 1e-12, 7);
        assert!(rep.even && rep.zero_homogeneous && rep.tangent);

        let rep = builtin64("sqg").check_admissibility(200, 1e-12, 7);
        assert!(!rep.even);

        let rep = builtin64("mg").check_admissibility(200, 1e-12, 7);
        assert!(rep.even && rep.zero_homogeneous && rep.tangent);
    }

    #[test]
    fn pm2d_range_is_shifted_circle() {
        // |m(xi) + (0, 1/2)| = 1/2 on every direction
        let s = builtin64("pm2d");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let m = s.evaluate(&[a.cos(), a.sin()]).unwrap();
            let d = (m[0].powi(2) + (m[1] + 0.5).powi(2)).sqrt();
            assert!((d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pm3d_range_is_shifted_sphere() {
        let s = builtin64("pm3d");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let n = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
            if n < 1e-3 {
                continue;
            }
            let xi: Vec<f64> = v.iter().map(|x| x / n).collect();
            let m = s.evaluate(&xi).unwrap();
            let d = (m[0].powi(2) + m[1].powi(2) + (m[2] + 0.5).powi(2)).sqrt();
            assert!((d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pm2d_patches_cover_circle() {
        let patches = find_regular_patches(&builtin64("pm2d"), 0.05, 1e-3).unwrap();
        // every direction regular: scanned directions must all be covered
        for i in 0..64 {
            let a = std::f64::consts::TAU * i as f64 / 64.0;
            let d = vec![a.cos(), a.sin()];
            assert!(
                patches.iter().any(|p| p.contains_direction(&d)),
                "direction {a} uncovered"
            );
        }
    }

    #[test]
    fn pm2d_tangential_jacobian_rank_one() {
        let s = builtin64("pm2d");
        for i in 0..32 {
            let a = std::f64::consts::TAU * i as f64 / 32.0;
            let sv = sphere_jacobian_svals(&s, &[a.cos(), a.sin()], 1e-4).unwrap();
            assert_eq!(sv.len(), 1);
            assert!((sv[0] - 1.0).abs() < 1e-6, "d/dalpha m has unit speed");
        }
    }

    #[test]
    fn mg_patches_avoid_axis() {
        let patches = find_regular_patches(&builtin64("mg"), 0.1, 1e-3).unwrap();
        assert!(!patches.is_empty());
        // the axis directions are never covered
        for axis in [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]] {
            assert!(
                !patches.iter().any(|p| {
                    p.angle_from_center(&axis) <= p.angular_radius
                }),
                "a patch claims the singular axis"
            );
        }
        // every patch evaluates cleanly at its center and boundary spokes
        let s = builtin64("mg");
        for p in &patches {
            assert!(s.evaluate(&p.center).is_ok());
        }
    }

    #[test]
    fn mg_unbounded_along_tilted_curve() {
        // xi = (1, t, t^2): M2 ~ -1/(2 t^2) as t -> 0
        let s = builtin64("mg");
        for &t in &[1e-2, 5e-3, 2e-3] {
            let m = s.evaluate(&[1.0, t, t * t]).unwrap();
            let scaled = m[1] * 2.0 * t * t;
            assert!(
                (scaled + 1.0).abs() < 0.05,
                "t={t}: 2 t^2 M2 = {scaled}, expected -> -1"
            );
        }
    }

    #[test]
    fn span_conditions() {
        let pm2d = builtin64("pm2d");
        let patches = find_regular_patches(&pm2d, 0.1, 1e-3).unwrap();
        let w = check_span_condition(&pm2d, &patches);
        assert!(w.spans);
        assert_eq!(w.witness.len(), 2);

        let pm3d = builtin64("pm3d");
        let patches = find_regular_patches(&pm3d, 0.15, 1e-3).unwrap();
        assert!(check_span_condition(&pm3d, &patches).spans);
    }

    #[test]
    fn constant_symbol_fails_span() {
        // tabulated constant symbol: rank 1
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("const.msym");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"MSYM").unwrap();
        f.write_all(&2u32.to_le_bytes()).unwrap();
        f.write_all(&8u32.to_le_bytes()).unwrap();
        for _ in 0..8 {
            f.write_all(&1.0f64.to_le_bytes()).unwrap();
            f.write_all(&0.0f64.to_le_bytes()).unwrap();
        }
        drop(f);
        let s = MultiplierSymbol::<f64>::from_tabulated_file("const", &path).unwrap();
        let patch = RegularPatch {
            center: vec![1.0, 0.0],
            angular_radius: 3.0,
            jacobian_min_singular_value: 0.0,
        };
        let w = check_span_condition(&s, &[patch]);
        assert!(!w.spans);
    }

    #[test]
    fn generic_scalar_f32() {
        let s = MultiplierSymbol::<f32>::builtin("pm2d").unwrap();
        let m = s.evaluate(&[1.0f32, 1.0]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-6);
    }
}
