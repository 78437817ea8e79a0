//! Pointwise state-space geometry: the constraint set K, the restricted wave
//! cone, screen projections, the four-corner split of a state near the base
//! point, and the perturbed staircase arms used by the oscillation cascade.

use crate::error::{Error, Result};
use crate::scalar::{axpy, dist, dot, norm, normalize, r, sub, Real};
use crate::symbols::{MultiplierSymbol, RegularPatch};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A pointwise state (theta, q, u) in R^(2n+1).
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix<T> {
    pub theta: T,
    pub q: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Real> StateMatrix<T> {
    pub fn new(theta: T, q: Vec<T>, u: Vec<T>) -> Self {
        debug_assert_eq!(q.len(), u.len());
        Self { theta, q, u }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn zero(n: usize) -> Self {
        Self::new(T::zero(), vec![T::zero(); n], vec![T::zero(); n])
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(2 * self.dim() + 1);
        v.push(self.theta);
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.u);
        v
    }

    pub fn from_slice(n: usize, s: &[T]) -> Self {
        debug_assert_eq!(s.len(), 2 * n + 1);
        Self::new(s[0], s[1..=n].to_vec(), s[n + 1..].to_vec())
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(
            self.theta + o.theta,
            self.q.iter().zip(&o.q).map(|(&a, &b)| a + b).collect(),
            self.u.iter().zip(&o.u).map(|(&a, &b)| a + b).collect(),
        )
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::new(
            self.theta - o.theta,
            sub(&self.q, &o.q),
            sub(&self.u, &o.u),
        )
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(
            self.theta * s,
            self.q.iter().map(|&a| a * s).collect(),
            self.u.iter().map(|&a| a * s).collect(),
        )
    }

    pub fn norm(&self) -> T {
        (self.theta * self.theta + dot(&self.q, &self.q) + dot(&self.u, &self.u)).sqrt()
    }

    pub fn dist(&self, o: &Self) -> T {
        self.sub(o).norm()
    }
}

/// Distance to the constraint branches (theta', theta' u', u') with
/// theta' = +-1. Closed form: the optimal u' is the midpoint of the
/// (sign-adjusted) pair (q, u).
pub fn dist_to_k<T: Real>(a: &StateMatrix<T>) -> T {
    dist_to_k_components(a.theta, &a.q, &a.u)
}

/// Slice-level variant used in grid-scale loops.
pub fn dist_to_k_components<T: Real>(theta: T, q: &[T], u: &[T]) -> T {
    let half = r::<T>(0.5);
    let mut d_minus = T::zero(); // |q - u|^2
    let mut d_plus = T::zero(); // |q + u|^2
    for (&qi, &ui) in q.iter().zip(u) {
        d_minus += (qi - ui) * (qi - ui);
        d_plus += (qi + ui) * (qi + ui);
    }
    let branch_pos = (theta - T::one()) * (theta - T::one()) + half * d_minus;
    let branch_neg = (theta + T::one()) * (theta + T::one()) + half * d_plus;
    branch_pos.min(branch_neg).sqrt()
}

/// Two-point split of a state with |theta| < 1:
/// A = w X + (1-w) Y, X = (1,x,x), Y = (-1,-y,y), w = (1+theta)/2.
pub struct Decomposition<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub weight: T,
}

pub fn decompose<T: Real>(a: &StateMatrix<T>) -> Result<Decomposition<T>> {
    let one = T::one();
    if a.theta.abs() >= one - r(1e-9) {
        return Err(Error::DegenerateTheta(a.theta.to_f64().unwrap_or(f64::NAN)));
    }
    let x: Vec<T> = a
        .u
        .iter()
        .zip(&a.q)
        .map(|(&ui, &qi)| (ui + qi) / (one + a.theta))
        .collect();
    let y: Vec<T> = a
        .u
        .iter()
        .zip(&a.q)
        .map(|(&ui, &qi)| (ui - qi) / (one - a.theta))
        .collect();
    Ok(Decomposition {
        x,
        y,
        weight: (one + a.theta) * r(0.5),
    })
}

/// One sampled point of a screen S = m(W).
#[derive(Debug, Clone)]
pub struct ScreenSample<T> {
    /// Chart coordinates in the patch (1 angle for n=2, 2 for n=3).
    pub chart: Vec<T>,
    /// Frequency direction xi on the sphere.
    pub xi: Vec<T>,
    /// Screen point m(xi).
    pub point: Vec<T>,
    /// Tangent frame of the screen at the point (n-1 vectors).
    pub tangent: Vec<Vec<T>>,
}

/// The two screens S1 = m(W1), S2 = m(W2) with the projection data
/// certified at construction time.
#[derive(Debug, Clone)]
pub struct Screens<T> {
    symbol: MultiplierSymbol<T>,
    pub patches: [RegularPatch<T>; 2],
    pub samples: [Vec<ScreenSample<T>>; 2],
    /// Anchor point on the segment [m1, m2].
    pub anchor: Vec<T>,
    /// Base flux q0 on the segment.
    pub q0: Vec<T>,
    /// Certified projection ball radius around q0.
    pub delta0: T,
    /// Certified radius of the four-corner split around A0.
    pub delta: T,
    /// Certified perturbation bound on |u|, |theta| for scaled screens.
    pub delta1: T,
    pub transversality_angle_floor: T,
    /// Sampled corner set: images of probe states under the four corners.
    corner_cloud: Vec<StateMatrix<T>>,
}

/// Orthonormal tangent chart at a unit vector.
fn tangent_basis<T: Real>(u: &[T]) -> Vec<Vec<T>> {
    let n = u.len();
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

/// Point of the patch chart: rotate the center by the chart angles.
fn chart_point<T: Real>(center: &[T], frame: &[Vec<T>], chart: &[T]) -> Vec<T> {
    let mut p = center.to_vec();
    for (t, &ang) in frame.iter().zip(chart) {
        let (c, s) = (ang.cos(), ang.sin());
        let pt: Vec<T> = p.iter().zip(t).map(|(&pi, &ti)| c * pi + s * ti).collect();
        p = pt;
        let mut pn = p.clone();
        normalize(&mut pn);
        p = pn;
    }
    p
}

impl<T: Real> Screens<T> {
    pub fn symbol(&self) -> &MultiplierSymbol<T> {
        &self.symbol
    }

    /// The flat base state A0 = (0, q0, 0).
    pub fn base_state(&self) -> StateMatrix<T> {
        StateMatrix::new(T::zero(), self.q0.clone(), vec![T::zero(); self.q0.len()])
    }

    /// Distance from a state to the sampled corner set.
    pub fn dist_to_corner_set(&self, a: &StateMatrix<T>) -> T {
        self.corner_cloud
            .iter()
            .map(|c| c.dist(a))
            .fold(T::max_value(), |m, d| m.min(d))
    }

    pub fn corner_cloud(&self) -> &[StateMatrix<T>] {
        &self.corner_cloud
    }
}

/// Options for `build_screens`.
#[derive(Debug, Clone)]
pub struct ScreenOptions<T> {
    pub samples_per_patch: usize,
    pub transversality_angle_floor: T,
    pub certification_probes: usize,
    pub seed: u64,
}

impl<T: Real> Default for ScreenOptions<T> {
    fn default() -> Self {
        Self {
            samples_per_patch: 257,
            transversality_angle_floor: r(0.2),
            certification_probes: 200,
            seed: 42,
        }
    }
}

fn sample_patch<T: Real>(
    symbol: &MultiplierSymbol<T>,
    patch: &RegularPatch<T>,
    count: usize,
) -> Vec<ScreenSample<T>> {
    let frame = tangent_basis(&patch.center);
    let mut out = Vec::new();
    let fd = r::<T>(1e-5);
    match symbol.dim() {
        2 => {
            for i in 0..count {
                let a = patch.angular_radius
                    * (r::<T>(2.0) * r::<T>(i as f64) / r((count - 1) as f64) - T::one());
                let xi = chart_point(&patch.center, &frame, &[a]);
                if let Ok(point) = symbol.evaluate(&xi) {
                    let xp = chart_point(&patch.center, &frame, &[a + fd]);
                    let xm = chart_point(&patch.center, &frame, &[a - fd]);
                    if let (Ok(pp), Ok(pm)) = (symbol.evaluate(&xp), symbol.evaluate(&xm)) {
                        let mut tan: Vec<T> = pp
                            .iter()
                            .zip(&pm)
                            .map(|(&u, &v)| (u - v) / (fd + fd))
                            .collect();
                        normalize(&mut tan);
                        out.push(ScreenSample {
                            chart: vec![a],
                            xi,
                            point,
                            tangent: vec![tan],
                        });
                    }
                }
            }
        }
        3 => {
            let side = (count as f64).sqrt().ceil() as usize;
            for i in 0..side {
                for j in 0..side {
                    let a = patch.angular_radius
                        * (r::<T>(2.0) * r::<T>(i as f64) / r((side - 1) as f64) - T::one());
                    let b = patch.angular_radius
                        * (r::<T>(2.0) * r::<T>(j as f64) / r((side - 1) as f64) - T::one());
                    let xi = chart_point(&patch.center, &frame, &[a, b]);
                    if let Ok(point) = symbol.evaluate(&xi) {
                        let mut tangent = Vec::new();
                        let mut ok = true;
                        for d in 0..2 {
                            let mut cp = vec![a, b];
                            let mut cm = vec![a, b];
                            cp[d] += fd;
                            cm[d] -= fd;
                            let xp = chart_point(&patch.center, &frame, &cp);
                            let xm = chart_point(&patch.center, &frame, &cm);
                            match (symbol.evaluate(&xp), symbol.evaluate(&xm)) {
                                (Ok(pp), Ok(pm)) => {
                                    let mut tan: Vec<T> = pp
                                        .iter()
                                        .zip(&pm)
                                        .map(|(&u, &v)| (u - v) / (fd + fd))
                                        .collect();
                                    normalize(&mut tan);
                                    tangent.push(tan);
                                }
                                _ => ok = false,
                            }
                        }
                        if ok {
                            out.push(ScreenSample {
                                chart: vec![a, b],
                                xi,
                                point,
                                tangent,
                            });
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

/// Crossing angle between a line direction and the screen tangent space.
fn crossing_angle<T: Real>(line_dir: &[T], tangent: &[Vec<T>]) -> T {
    let mut d = line_dir.to_vec();
    normalize(&mut d);
    // subtract the tangential part; what remains is the transversal component
    let mut residual = d.clone();
    for t in tangent {
        let c = dot(&residual, t);
        for (ri, &ti) in residual.iter_mut().zip(t.iter()) {
            *ri -= c * ti;
        }
    }
    norm(&residual).min(T::one()).asin()
}

/// Build the screen pair from two regular patches.
///
/// The anchor and base flux sit at the 1/3 and 2/3 points of the segment
/// joining the two patch-center images; `delta0` is maximized by bisection
/// under the unique-projection requirement and `delta` is certified by
/// random probes of the four-corner split.
pub fn build_screens<T: Real>(
    symbol: &MultiplierSymbol<T>,
    w1: &RegularPatch<T>,
    w2: &RegularPatch<T>,
    opts: &ScreenOptions<T>,
) -> Result<Screens<T>> {
    let m1 = symbol.evaluate(&w1.center)?;
    let m2 = symbol.evaluate(&w2.center)?;
    let seg = sub(&m2, &m1);
    let seg_len = norm(&seg);
    if seg_len < r(1e-8) {
        return Err(Error::TransversalityFailure(
            "patch-center images coincide; the joining segment is degenerate".into(),
        ));
    }
    let third = r::<T>(1.0 / 3.0);
    let anchor = axpy(&m1, third, &seg);
    let q0 = axpy(&m1, third + third, &seg);

    let samples = [
        sample_patch(symbol, w1, opts.samples_per_patch),
        sample_patch(symbol, w2, opts.samples_per_patch),
    ];
    if samples[0].len() < 8 || samples[1].len() < 8 {
        return Err(Error::TransversalityFailure(
            "patches too close to the singular set to sample".into(),
        ));
    }

    let mut screens = Screens {
        symbol: symbol.clone(),
        patches: [w1.clone(), w2.clone()],
        samples,
        anchor,
        q0,
        delta0: T::zero(),
        delta: T::zero(),
        delta1: T::zero(),
        transversality_angle_floor: opts.transversality_angle_floor,
        corner_cloud: Vec::new(),
    };

    // transversality of the base segment at both screens
    let mut dir = seg.clone();
    normalize(&mut dir);
    let zero_u = vec![T::zero(); symbol.dim()];
    for j in 0..2 {
        let root = screens.project_onto_screen(&screens.q0, j, &zero_u, T::one())?;
        let ang = crossing_angle(&dir, &root.tangent);
        if ang < opts.transversality_angle_floor {
            return Err(Error::TransversalityFailure(format!(
                "segment meets screen {} at angle {:.4} < floor {:.4}",
                j + 1,
                ang.to_f64().unwrap_or(f64::NAN),
                opts
                    .transversality_angle_floor
                    .to_f64()
                    .unwrap_or(f64::NAN)
            )));
        }
    }

    // delta0 by bisection on the unique-projection property
    let cap = dist(&screens.anchor, &screens.q0) * r(0.95);
    let mut lo = T::zero();
    let mut hi = cap;
    for _ in 0..24 {
        let mid = (lo + hi) * r(0.5);
        if screens.ball_projects_ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= T::zero() {
        return Err(Error::TransversalityFailure(
            "no positive projection radius found".into(),
        ));
    }
    screens.delta0 = lo;

    // certify the four-corner radius delta by probing
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut delta = screens.delta0 * r(0.25);
    let n = symbol.dim();
    'outer: for _ in 0..16 {
        let mut cloud = Vec::new();
        for _ in 0..opts.certification_probes {
            let a = random_state_in_ball(&screens.base_state(), delta, n, &mut rng);
            match t4_of(&a, &screens) {
                Ok(cfg) => {
                    for t in &cfg.corners {
                        cloud.push(t.clone());
                    }
                }
                Err(_) => {
                    delta = delta * r(0.7);
                    continue 'outer;
                }
            }
        }
        screens.delta = delta;
        screens.delta1 = delta;
        screens.corner_cloud = cloud;
        break;
    }
    if screens.delta <= T::zero() {
        return Err(Error::TransversalityFailure(
            "failed to certify a positive four-corner radius".into(),
        ));
    }
    Ok(screens)
}

pub fn random_state_in_ball<T: Real>(
    center: &StateMatrix<T>,
    radius: T,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> StateMatrix<T> {
    let dim = 2 * n + 1;
    loop {
        let v: Vec<T> = (0..dim).map(|_| r(rng.gen_range(-1.0..1.0))).collect();
        if norm(&v) <= T::one() {
            let c = center.to_vec();
            let s: Vec<T> = c.iter().zip(&v).map(|(&a, &b)| a + b * radius).collect();
            return StateMatrix::from_slice(n, &s);
        }
    }
}

/// Result of a screen projection: the hit point and its screen data.
#[derive(Debug, Clone)]
pub struct ScreenHit<T> {
    pub point: Vec<T>,
    pub xi: Vec<T>,
    pub tangent: Vec<Vec<T>>,
    pub crossing_angle: T,
}

impl<T: Real> Screens<T> {
    fn ball_projects_ok(&self, radius: T) -> bool {
        if radius <= T::zero() {
            return false;
        }
        let n = self.q0.len();
        let zero_u = vec![T::zero(); n];
        let dirs: Vec<Vec<T>> = if n == 2 {
            (0..16)
                .map(|i| {
                    let a = r::<T>(i as f64) * T::TAU() / r(16.0);
                    vec![a.cos(), a.sin()]
                })
                .collect()
        } else {
            let mut d = vec![
                vec![T::one(), T::zero(), T::zero()],
                vec![-T::one(), T::zero(), T::zero()],
                vec![T::zero(), T::one(), T::zero()],
                vec![T::zero(), -T::one(), T::zero()],
                vec![T::zero(), T::zero(), T::one()],
                vec![T::zero(), T::zero(), -T::one()],
            ];
            for sx in [-T::one(), T::one()] {
                for sy in [-T::one(), T::one()] {
                    for sz in [-T::one(), T::one()] {
                        let mut v = vec![sx, sy, sz];
                        normalize(&mut v);
                        d.push(v);
                    }
                }
            }
            d
        };
        for dir in &dirs {
            for &frac in &[r::<T>(1.0), r::<T>(0.6)] {
                let x = axpy(&self.q0, radius * frac, dir);
                for j in 0..2 {
                    match self.project_onto_screen(&x, j, &zero_u, T::one()) {
                        Ok(hit) => {
                            if hit.crossing_angle < self.transversality_angle_floor {
                                return false;
                            }
                        }
                        Err(_) => return false,
                    }
                }
            }
        }
        true
    }

    /// Intersect the line through the (shifted, scaled) anchor and `point`
    /// with screen `j`, transformed as shift_u + scale * S_j.
    pub fn project_onto_screen(
        &self,
        point: &[T],
        j: usize,
        shift_u: &[T],
        scale: T,
    ) -> Result<ScreenHit<T>> {
        let anchor_t = axpy(shift_u, scale, &self.anchor);
        let xt = sub(point, &anchor_t);
        let xt_norm = norm(&xt);
        if xt_norm < r(1e-12) {
            return Err(Error::NoIntersection);
        }
        let n = self.q0.len();
        let samples = &self.samples[j];
        if n == 2 {
            // root of g(alpha) = cross2(m(alpha) - a, xt)
            let g = |sample_point: &[T]| -> T {
                let v = sub(sample_point, &self.anchor);
                v[0] * xt[1] - v[1] * xt[0]
            };
            let mut bracket = None;
            let mut count = 0;
            for w in samples.windows(2) {
                let g0 = g(&w[0].point);
                let g1 = g(&w[1].point);
                if g0 == T::zero() || g0 * g1 < T::zero() {
                    count += 1;
                    if bracket.is_none() {
                        bracket = Some((w[0].chart[0], w[1].chart[0]));
                    }
                }
            }
            if count != 1 {
                return Err(Error::NoIntersection);
            }
            let (mut lo, mut hi) = bracket.unwrap();
            let frame = tangent_basis(&self.patches[j].center);
            let eval = |alpha: T| -> Result<(Vec<T>, Vec<T>)> {
                let xi = chart_point(&self.patches[j].center, &frame, &[alpha]);
                let p = self.symbol.evaluate(&xi)?;
                Ok((xi, p))
            };
            let mut g_lo = g(&eval(lo)?.1);
            let alpha = if g_lo == T::zero() {
                lo
            } else if g(&eval(hi)?.1) == T::zero() {
                hi
            } else {
                for _ in 0..80 {
                    let mid = (lo + hi) * r(0.5);
                    let gm = g(&eval(mid)?.1);
                    if gm == T::zero() {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if g_lo * gm < T::zero() {
                        hi = mid;
                    } else {
                        lo = mid;
                        g_lo = gm;
                    }
                }
                (lo + hi) * r(0.5)
            };
            let (xi, p) = eval(alpha)?;
            let fd = r::<T>(1e-6);
            let (_, pp) = eval(alpha + fd)?;
            let (_, pm) = eval(alpha - fd)?;
            let mut tan: Vec<T> = pp
                .iter()
                .zip(&pm)
                .map(|(&a, &b)| (a - b) / (fd + fd))
                .collect();
            normalize(&mut tan);
            let mut line = xt.clone();
            normalize(&mut line);
            let ca = crossing_angle(&line, &[tan.clone()]);
            Ok(ScreenHit {
                point: axpy(shift_u, scale, &p),
                xi,
                tangent: vec![tan],
                crossing_angle: ca,
            })
        } else {
            // Gauss-Newton on the 2-parameter chart: components of
            // (m(xi) - a) orthogonal to xt must vanish.
            let perp = tangent_basis(&xt);
            if perp.len() < 2 {
                return Err(Error::NoIntersection);
            }
            let e1 = perp[0].clone();
            let e2 = perp[1].clone();
            let frame = tangent_basis(&self.patches[j].center);
            let res = |chart: &[T]| -> Result<[T; 2]> {
                let xi = chart_point(&self.patches[j].center, &frame, chart);
                let p = self.symbol.evaluate(&xi)?;
                let v = sub(&p, &self.anchor);
                Ok([dot(&v, &e1), dot(&v, &e2)])
            };
            // seed from the best sample
            let mut chart = vec![T::zero(), T::zero()];
            let mut best_r = T::max_value();
            for s in samples {
                let v = sub(&s.point, &self.anchor);
                let rr = dot(&v, &e1) * dot(&v, &e1) + dot(&v, &e2) * dot(&v, &e2);
                if rr < best_r {
                    best_r = rr;
                    chart = s.chart.clone();
                }
            }
            let fd = r::<T>(1e-6);
            let mut converged = false;
            for _ in 0..60 {
                let f0 = res(&chart)?;
                let f_norm = (f0[0] * f0[0] + f0[1] * f0[1]).sqrt();
                if f_norm < r(1e-13) {
                    converged = true;
                    break;
                }
                let mut jac = [[T::zero(); 2]; 2];
                for d in 0..2 {
                    let mut cp = chart.clone();
                    cp[d] += fd;
                    let fp = res(&cp)?;
                    jac[0][d] = (fp[0] - f0[0]) / fd;
                    jac[1][d] = (fp[1] - f0[1]) / fd;
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                if det.abs() < r(1e-14) {
                    break;
                }
                let dx = [
                    (f0[0] * jac[1][1] - f0[1] * jac[0][1]) / det,
                    (f0[1] * jac[0][0] - f0[0] * jac[1][0]) / det,
                ];
                let mut step = T::one();
                let mut improved = false;
                for _ in 0..8 {
                    let cand = vec![chart[0] - step * dx[0], chart[1] - step * dx[1]];
                    let within = cand
                        .iter()
                        .all(|&c| c.abs() <= self.patches[j].angular_radius * r(1.05));
                    if within {
                        if let Ok(fc) = res(&cand) {
                            let fc_norm = (fc[0] * fc[0] + fc[1] * fc[1]).sqrt();
                            if fc_norm < f_norm {
                                chart = cand;
                                improved = true;
                                break;
                            }
                        }
                    }
                    step = step * r(0.5);
                }
                if !improved {
                    break;
                }
            }
            let f_final = res(&chart)?;
            let f_norm = (f_final[0] * f_final[0] + f_final[1] * f_final[1]).sqrt();
            if !converged && f_norm > r(1e-9) {
                return Err(Error::NoIntersection);
            }
            let xi = chart_point(&self.patches[j].center, &frame, &chart);
            let p = self.symbol.evaluate(&xi)?;
            // tangent frame by chart finite differences
            let mut tangent = Vec::new();
            for d in 0..2 {
                let mut cp = chart.clone();
                let mut cm = chart.clone();
                cp[d] += fd;
                cm[d] -= fd;
                let pp = self
                    .symbol
                    .evaluate(&chart_point(&self.patches[j].center, &frame, &cp))?;
                let pm = self
                    .symbol
                    .evaluate(&chart_point(&self.patches[j].center, &frame, &cm))?;
                let mut tan: Vec<T> = pp
                    .iter()
                    .zip(&pm)
                    .map(|(&a, &b)| (a - b) / (fd + fd))
                    .collect();
                normalize(&mut tan);
                tangent.push(tan);
            }
            let mut line = xt.clone();
            normalize(&mut line);
            let ca = crossing_angle(&line, &tangent);
            Ok(ScreenHit {
                point: axpy(shift_u, scale, &p),
                xi,
                tangent,
                crossing_angle: ca,
            })
        }
    }

    /// Projection entry point with the certified-ball precondition: the line
    /// through the transformed anchor and `x` is intersected with both
    /// transformed screens.
    pub fn screen_project(
        &self,
        x: &[T],
        shift_u: &[T],
        scale: T,
        ball_center: &[T],
    ) -> Result<(ScreenHit<T>, ScreenHit<T>)> {
        let d = dist(x, ball_center);
        if d > self.delta0 {
            return Err(Error::OutsideBall(
                d.to_f64().unwrap_or(f64::NAN),
                self.delta0.to_f64().unwrap_or(f64::NAN),
            ));
        }
        let h1 = self.project_onto_screen(x, 0, shift_u, scale)?;
        let h2 = self.project_onto_screen(x, 1, shift_u, scale)?;
        for h in [&h1, &h2] {
            if h.crossing_angle < self.transversality_angle_floor {
                return Err(Error::TransversalityFailure(format!(
                    "crossing angle {:.4} below floor",
                    h.crossing_angle.to_f64().unwrap_or(f64::NAN)
                )));
            }
        }
        Ok((h1, h2))
    }
}

/// Four corners in K with convex weights reproducing the state.
#[derive(Debug, Clone)]
pub struct T4Configuration<T> {
    pub base: StateMatrix<T>,
    pub corners: [StateMatrix<T>; 4],
    /// Frequency directions realizing each corner difference in the cone.
    pub corner_xi: [Vec<T>; 4],
    pub weights: [T; 4],
    pub reconstruction_residual: T,
}

/// Split a state near the base point into the four-corner configuration.
pub fn t4_of<T: Real>(a: &StateMatrix<T>, screens: &Screens<T>) -> Result<T4Configuration<T>> {
    let one = T::one();
    let dec = decompose(a)?;
    let n = a.dim();
    // x side: screens shifted by u, scaled by (1 - theta)
    let (h1, h2) = screens.screen_project(&dec.x, &a.u, one - a.theta, &screens.q0)?;
    // y side: screens shifted by u, scaled by -(1 + theta), ball around -q0
    let neg_q0: Vec<T> = screens.q0.iter().map(|&v| -v).collect();
    let (h3, h4) = screens.screen_project(&dec.y, &a.u, -(one + a.theta), &neg_q0)?;

    let seg_weight = |p: &[T], p1: &[T], p2: &[T]| -> Result<(T, T)> {
        let d = sub(p2, p1);
        let l2 = dot(&d, &d);
        if l2 < r(1e-16) {
            return Err(Error::NoIntersection);
        }
        let t = dot(&sub(p, p1), &d) / l2;
        if !(t > T::zero() && t < one) {
            return Err(Error::WeightOutOfRange(t.to_f64().unwrap_or(f64::NAN)));
        }
        Ok((one - t, t))
    };
    // corner points in x-space: the hits are already shift/scale adjusted
    let (mu1, mu2) = seg_weight(&dec.x, &h1.point, &h2.point)?;
    let (nu1, nu2) = seg_weight(&dec.y, &h3.point, &h4.point)?;

    let wx = dec.weight;
    let wy = one - dec.weight;
    let weights = [wx * mu1, wx * mu2, wy * nu1, wy * nu2];
    for &w in &weights {
        if !(w > T::zero() && w < one) {
            return Err(Error::WeightOutOfRange(w.to_f64().unwrap_or(f64::NAN)));
        }
    }
    let corner_pos = |p: &Vec<T>| StateMatrix::new(one, p.clone(), p.clone());
    let corner_neg =
        |p: &Vec<T>| StateMatrix::new(-one, p.iter().map(|&v| -v).collect::<Vec<T>>(), p.clone());
    let corners = [
        corner_pos(&h1.point),
        corner_pos(&h2.point),
        corner_neg(&h3.point),
        corner_neg(&h4.point),
    ];
    // verify the convex combination reconstructs A
    let mut recon = StateMatrix::zero(n);
    for (c, &w) in corners.iter().zip(&weights) {
        recon = recon.add(&c.scale(w));
    }
    let residual = recon.dist(a);
    Ok(T4Configuration {
        base: a.clone(),
        corner_xi: [h1.xi, h2.xi, h3.xi, h4.xi],
        corners,
        weights,
        reconstruction_residual: residual,
    })
}

/// Smallest vector distance from v to the screen images m(W_j), refined by
/// golden-section search around the best sample (n = 2).
pub fn lambda_w_direction_residual<T: Real>(screens: &Screens<T>, v: &[T]) -> T {
    let mut best = T::max_value();
    for j in 0..2 {
        for s in &screens.samples[j] {
            best = best.min(dist(v, &s.point));
        }
        if screens.q0.len() == 2 {
            let frame = tangent_basis(&screens.patches[j].center);
            let w = screens.patches[j].angular_radius;
            let evald = |al: T| -> T {
                let xi = chart_point(&screens.patches[j].center, &frame, &[al]);
                match screens.symbol.evaluate(&xi) {
                    Ok(p) => dist(v, &p),
                    Err(_) => T::max_value(),
                }
            };
            let mut lo = -w;
            let mut hi = w;
            for _ in 0..60 {
                let m1 = lo + (hi - lo) * r(0.381966);
                let m2 = hi - (hi - lo) * r(0.381966);
                if evald(m1) < evald(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            best = best.min(evald((lo + hi) * r(0.5)));
        }
    }
    best
}

/// Test membership of a matrix difference in the restricted cone: the u-row
/// must be theta_D times a screen point.
pub fn in_restricted_cone<T: Real>(screens: &Screens<T>, d: &StateMatrix<T>, tol: T) -> bool {
    if d.theta.abs() < r(1e-12) {
        return false;
    }
    let v: Vec<T> = d.u.iter().map(|&x| x / d.theta).collect();
    lambda_w_direction_residual(screens, &v) <= tol
}

/// Staircase arms around a configuration: corners pulled toward the base by
/// `s`, then bent cyclically by `eta`.
#[derive(Debug, Clone)]
pub struct PerturbedArms<T> {
    /// A_0..A_4 with A_0 = A_4 = A (cyclic).
    pub arm_states: [StateMatrix<T>; 5],
    /// Bent corners (one per staircase step).
    pub bent_corners: [StateMatrix<T>; 4],
    pub closure_error: T,
    /// min_i |Tbar_i - A| / dist(A, corner set)
    pub separation_ratio: T,
}

/// Check the staircase bend parameter: (1-eta)^3 > 1/2.
pub fn eta_admissible<T: Real>(eta: T) -> bool {
    let c = (T::one() - eta).powi(3);
    c > r(0.5)
}

pub fn perturbed_arms<T: Real>(
    cfg: &T4Configuration<T>,
    screens: &Screens<T>,
    s: T,
    eta: T,
) -> Result<PerturbedArms<T>> {
    if !(s > T::zero() && s <= r(0.25)) {
        return Err(Error::InvalidParameter(format!(
            "s must be in (0, 1/4], got {}",
            s.to_f64().unwrap_or(f64::NAN)
        )));
    }
    if !eta_admissible(eta) {
        let c = (T::one() - eta).powi(3);
        return Err(Error::EtaTooLarge(
            eta.to_f64().unwrap_or(f64::NAN),
            c.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let a = &cfg.base;
    let one = T::one();
    // pulled corners T_j^s = (1-s) T_j + s A
    let pulled: Vec<StateMatrix<T>> = cfg
        .corners
        .iter()
        .map(|t| t.scale(one - s).add(&a.scale(s)))
        .collect();
    // arms A_i = A + eta * sum_{j<=i} lambda_j (T_j^s - A)
    let mut arms = vec![a.clone()];
    let mut acc = StateMatrix::zero(a.dim());
    for i in 0..4 {
        acc = acc.add(&pulled[i].sub(a).scale(cfg.weights[i]));
        arms.push(a.add(&acc.scale(eta)));
    }
    let closure_error = arms[4].dist(a);
    // bent corners: Tbar_i = T_i^s + A_{i-1} - A
    let mut bent = Vec::with_capacity(4);
    for i in 0..4 {
        bent.push(pulled[i].add(&arms[i]).sub(a));
    }
    let dist_k = screens.dist_to_corner_set(a).max(r(1e-30));
    let sep = bent
        .iter()
        .map(|t| t.dist(a))
        .fold(T::max_value(), |m, d| m.min(d))
        / dist_k;
    let arm_states: [StateMatrix<T>; 5] = [
        arms[0].clone(),
        arms[1].clone(),
        arms[2].clone(),
        arms[3].clone(),
        arms[4].clone(),
    ];
    let bent_corners: [StateMatrix<T>; 4] = [
        bent[0].clone(),
        bent[1].clone(),
        bent[2].clone(),
        bent[3].clone(),
    ];
    Ok(PerturbedArms {
        arm_states,
        bent_corners,
        closure_error,
        separation_ratio: sep,
    })
}

/// Witness for membership in the relaxation region: either the state lies in
/// the certified ball, or it splits as t A' + (1-t) T_j(A'') with a cone
/// difference.
#[derive(Debug, Clone)]
pub struct MembershipWitness<T> {
    pub t: T,
    pub corner_index: usize,
    pub a_prime: StateMatrix<T>,
    pub a_second: StateMatrix<T>,
}

/// Search for a membership witness. Returns None both for states genuinely
/// outside and on search failure (conservative).
pub fn membership_witness<T: Real>(
    a: &StateMatrix<T>,
    screens: &Screens<T>,
    seed: u64,
) -> Option<MembershipWitness<T>> {
    let a0 = screens.base_state();
    if a.dist(&a0) < screens.delta {
        return Some(MembershipWitness {
            t: T::one(),
            corner_index: 0,
            a_prime: a.clone(),
            a_second: a0,
        });
    }
    // cheap scale prefilter: everything reachable lies within the hull of the
    // ball and the corner cloud
    let reach = screens
        .corner_cloud()
        .iter()
        .map(|c| c.norm())
        .fold(T::zero(), |m, v| m.max(v))
        + screens.delta
        + a0.norm()
        + T::one();
    if a.norm() > reach {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.dim();
    for j in 0..4 {
        for restart in 0..3 {
            // Solve for A'' in the ball such that T_j(A'') - A lies in the
            // cone; the cone is a ray set, so t can be chosen afterwards.
            let mut a2 = if restart == 0 {
                a0.clone()
            } else {
                random_state_in_ball(&a0, screens.delta * r(0.5), n, &mut rng)
            };
            let mut best_res = T::max_value();
            for _iter in 0..40 {
                let cfg = match t4_of(&a2, screens) {
                    Ok(c) => c,
                    Err(_) => break,
                };
                let t_corner = &cfg.corners[j];
                let d = t_corner.sub(a);
                if d.theta.abs() < r(1e-9) {
                    break;
                }
                let v: Vec<T> = d.u.iter().map(|&x| x / d.theta).collect();
                let res = lambda_w_direction_residual(screens, &v);
                if res < r(1e-7) {
                    // find t in (0,1) with A' = (A - (1-t) T)/t inside the ball
                    for k in 1..100 {
                        let t = r::<T>(k as f64) / r(100.0);
                        let ap_vec: Vec<T> = a
                            .to_vec()
                            .iter()
                            .zip(&t_corner.to_vec())
                            .map(|(&av, &tv)| (av - (T::one() - t) * tv) / t)
                            .collect();
                        let ap = StateMatrix::from_slice(n, &ap_vec);
                        if ap.dist(&a0) < screens.delta {
                            return Some(MembershipWitness {
                                t,
                                corner_index: j,
                                a_prime: ap,
                                a_second: a2,
                            });
                        }
                    }
                    break;
                }
                if res >= best_res * (T::one() - r(1e-10)) {
                    a2 = random_state_in_ball(&a0, screens.delta * r(0.5), n, &mut rng);
                    continue;
                }
                best_res = res;
                // finite-difference descent on the residual over A''
                let fd = screens.delta * r(1e-4);
                let base_vec = a2.to_vec();
                let mut grad = vec![T::zero(); base_vec.len()];
                for d_i in 0..base_vec.len() {
                    let mut pert = base_vec.clone();
                    pert[d_i] += fd;
                    let ap = StateMatrix::from_slice(n, &pert);
                    if ap.dist(&a0) >= screens.delta {
                        continue;
                    }
                    if let Ok(cfg_p) = t4_of(&ap, screens) {
                        let dp = cfg_p.corners[j].sub(a);
                        if dp.theta.abs() > r(1e-9) {
                            let vp: Vec<T> = dp.u.iter().map(|&x| x / dp.theta).collect();
                            let rp = lambda_w_direction_residual(screens, &vp);
                            grad[d_i] = (rp - res) / fd;
                        }
                    }
                }
                let gn = norm(&grad);
                if gn < r(1e-14) {
                    break;
                }
                let step = (res / gn).min(screens.delta * r(0.2));
                let cand: Vec<T> = base_vec
                    .iter()
                    .zip(&grad)
                    .map(|(&b, &g)| b - step * g / gn)
                    .collect();
                let cand_state = StateMatrix::from_slice(n, &cand);
                if cand_state.dist(&a0) < screens.delta * r(0.95) {
                    a2 = cand_state;
                }
            }
        }
    }
    None
}

/// The openness determinant of the corner maps in the printed closed form:
/// (theta - 1) (1 - t)^n t^n.
pub fn openness_jacobian<T: Real>(theta: T, t: T, n: usize) -> T {
    (theta - T::one()) * (T::one() - t).powi(n as i32) * t.powi(n as i32)
}

/// The linearized perturbation map of the splitting construction:
/// delta A = dt (A' - T) + t (0, dq, dx) + (1 - t)(0, dx, dx).
/// Used by the openness probe; its determinant factors as (theta'-1) t^n.
pub fn openness_probe_map<T: Real>(
    a_prime: &StateMatrix<T>,
    corner: &StateMatrix<T>,
    t: T,
    dt: T,
    dq: &[T],
    dx: &[T],
) -> StateMatrix<T> {
    let n = a_prime.dim();
    let one = T::one();
    let mut out = a_prime.sub(corner).scale(dt);
    for i in 0..n {
        out.q[i] += t * dq[i] + (one - t) * dx[i];
        out.u[i] += dx[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{angle_between, det_dense};

    fn pm2d_screens() -> Screens<f64> {
        let sym = MultiplierSymbol::builtin("pm2d").unwrap();
        let w1 = RegularPatch {
            center: vec![1.0, 0.0],
            angular_radius: 0.35,
            jacobian_min_singular_value: 1.0,
        };
        let w2 = RegularPatch {
            center: vec![0.0, 1.0],
            angular_radius: 0.35,
            jacobian_min_singular_value: 1.0,
        };
        build_screens(&sym, &w1, &w2, &ScreenOptions::default()).unwrap()
    }

    #[test]
    fn dist_to_k_trivials() {
        let u = vec![0.3f64, -0.7];
        let a = StateMatrix::new(1.0, u.clone(), u.clone());
        assert!(dist_to_k(&a) < 1e-15);
        let b = StateMatrix::new(-1.0, u.iter().map(|x| -x).collect(), u.clone());
        assert!(dist_to_k(&b) < 1e-15);
    }

    #[test]
    fn dist_to_k_matches_grid_search() {
        let a: StateMatrix<f64> = StateMatrix::new(0.0, vec![0.5, 0.0], vec![0.0, 0.0]);
        let analytic = dist_to_k(&a);
        let mut best = f64::MAX;
        for &th in &[-1.0, 1.0] {
            let steps = 400;
            for i in 0..=steps {
                for j in 0..=steps {
                    let u = [
                        -2.0 + 4.0 * i as f64 / steps as f64,
                        -2.0 + 4.0 * j as f64 / steps as f64,
                    ];
                    let d2 = (a.theta - th).powi(2)
                        + (a.q[0] - th * u[0]).powi(2)
                        + (a.q[1] - th * u[1]).powi(2)
                        + (a.u[0] - u[0]).powi(2)
                        + (a.u[1] - u[1]).powi(2);
                    best = best.min(d2.sqrt());
                }
            }
        }
        assert!(
            (analytic - best).abs() < 1e-2,
            "closed form {analytic} vs grid {best}"
        );
        assert!(analytic > 0.0);
        assert!((analytic - (1.0f64 + 0.125).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn decompose_symmetric_case() {
        let a: StateMatrix<f64> = StateMatrix::new(0.0, vec![0.5, 0.0], vec![0.0, 0.0]);
        let d = decompose(&a).unwrap();
        assert_eq!(d.x, vec![0.5, 0.0]);
        assert_eq!(d.y, vec![-0.5, 0.0]);
        assert_eq!(d.weight, 0.5);
    }

    #[test]
    fn decompose_hand_case() {
        // A = (1/2, (1,0), (0,1)): x = (2/3, 2/3), y = (-2, 2), weights 3/4, 1/4
        let a: StateMatrix<f64> = StateMatrix::new(0.5, vec![1.0, 0.0], vec![0.0, 1.0]);
        let d = decompose(&a).unwrap();
        assert!((d.x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.x[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.y[0] + 2.0).abs() < 1e-15);
        assert!((d.y[1] - 2.0).abs() < 1e-15);
        assert!((d.weight - 0.75).abs() < 1e-15);
        let x = StateMatrix::new(1.0, d.x.clone(), d.x.clone());
        let y = StateMatrix::new(-1.0, d.y.iter().map(|v| -v).collect(), d.y.clone());
        let rec = x.scale(d.weight).add(&y.scale(1.0 - d.weight));
        assert!(rec.dist(&a) < 1e-14);
    }

    #[test]
    fn decompose_degenerate_theta() {
        let a: StateMatrix<f64> = StateMatrix::new(0.999999999, vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(decompose(&a), Err(Error::DegenerateTheta(_))));
    }

    #[test]
    fn screens_build_and_project_base() {
        let s = pm2d_screens();
        assert!(s.delta0 > 0.05, "delta0 = {}", s.delta0);
        assert!(s.delta > 0.0);
        // anchor and q0 on the vertical diameter between (0,-1) and (0,0)
        assert!((s.anchor[0]).abs() < 1e-12 && (s.anchor[1] + 2.0 / 3.0).abs() < 1e-12);
        assert!((s.q0[0]).abs() < 1e-12 && (s.q0[1] + 1.0 / 3.0).abs() < 1e-12);
        // projecting q0 itself hits the screens near m1, m2
        let zero = vec![0.0, 0.0];
        let q0 = s.q0.clone();
        let (h1, h2) = s.screen_project(&q0, &zero, 1.0, &q0).unwrap();
        assert!(dist(&h1.point, &[0.0, -1.0]) < 1e-9);
        assert!(dist(&h2.point, &[0.0, 0.0]) < 1e-9);
    }

    #[test]
    fn screen_project_against_line_sampling_oracle() {
        let s = pm2d_screens();
        let x = vec![0.05, -0.38];
        let zero = vec![0.0, 0.0];
        let q0 = s.q0.clone();
        let (h1, _h2) = s.screen_project(&x, &zero, 1.0, &q0).unwrap();
        // oracle: dense sampling of the arc, minimizing distance to the line
        let sym = MultiplierSymbol::<f64>::builtin("pm2d").unwrap();
        let dir = {
            let mut d = sub(&x, &s.anchor);
            normalize(&mut d);
            d
        };
        let mut best = (f64::MAX, vec![0.0, 0.0]);
        for j in 0..200001 {
            let al = -0.35 + 0.7 * j as f64 / 200000.0;
            let xi = [al.cos(), al.sin()];
            let m = sym.evaluate(&xi).unwrap();
            // distance from m to the line through anchor with direction dir
            let v = sub(&m, &s.anchor);
            let long = dot(&v, &dir);
            let lat2 = dot(&v, &v) - long * long;
            if lat2 < best.0 {
                best = (lat2, m.to_vec());
            }
        }
        assert!(
            dist(&h1.point, &best.1) < 2e-5,
            "root {:?} vs oracle {:?}",
            h1.point,
            best.1
        );
    }

    #[test]
    fn screen_project_identity_scaling() {
        let s = pm2d_screens();
        let x = vec![-0.04, -0.3];
        let zero = vec![0.0, 0.0];
        let q0 = s.q0.clone();
        let a = s.screen_project(&x, &zero, 1.0, &q0).unwrap();
        let b = s.screen_project(&x, &zero, 1.0 - 0.0, &q0).unwrap();
        assert!(dist(&a.0.point, &b.0.point) < 1e-14);
        assert!(dist(&a.1.point, &b.1.point) < 1e-14);
    }

    #[test]
    fn screen_project_outside_ball() {
        let s = pm2d_screens();
        let dir = vec![0.0, 1.0];
        let x = axpy(&s.q0, s.delta0 * 1.0001, &dir);
        let zero = vec![0.0, 0.0];
        let q0 = s.q0.clone();
        assert!(matches!(
            s.screen_project(&x, &zero, 1.0, &q0),
            Err(Error::OutsideBall(..))
        ));
    }

    #[test]
    fn coincident_patches_rejected() {
        let sym = MultiplierSymbol::<f64>::builtin("pm2d").unwrap();
        let w = RegularPatch {
            center: vec![1.0, 0.0],
            angular_radius: 0.3,
            jacobian_min_singular_value: 1.0,
        };
        assert!(matches!(
            build_screens(&sym, &w, &w.clone(), &ScreenOptions::default()),
            Err(Error::TransversalityFailure(_))
        ));
    }

    #[test]
    fn t4_of_base_state() {
        let s = pm2d_screens();
        let a0 = s.base_state();
        let cfg = t4_of(&a0, &s).unwrap();
        assert!(cfg.reconstruction_residual < 1e-10);
        for c in &cfg.corners {
            assert!(dist_to_k(c) < 1e-10);
        }
        for c in cfg.corners.iter() {
            let d = c.sub(&a0);
            assert!(in_restricted_cone(&s, &d, 1e-6), "corner diff not in cone");
        }
        // symmetric weights: lambda = (1/6, 1/3, 1/6, 1/3)
        assert!((cfg.weights[0] - 1.0 / 6.0).abs() < 1e-8);
        assert!((cfg.weights[1] - 1.0 / 3.0).abs() < 1e-8);
        assert!((cfg.weights[2] - 1.0 / 6.0).abs() < 1e-8);
        assert!((cfg.weights[3] - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn t4_reconstruction_random_states() {
        let s = pm2d_screens();
        let a0 = s.base_state();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = random_state_in_ball(&a0, s.delta * 0.5, 2, &mut rng);
            let cfg = t4_of(&a, &s).unwrap();
            worst = worst.max(cfg.reconstruction_residual);
            for c in &cfg.corners {
                assert!(dist_to_k(c) < 1e-10);
                assert!(in_restricted_cone(&s, &c.sub(&a), 1e-6));
            }
            for &w in &cfg.weights {
                assert!(w > 0.0 && w < 1.0);
            }
        }
        assert!(worst < 1e-10, "worst reconstruction residual {worst}");
    }

    #[test]
    fn t4_outside_ball_rejected() {
        let s = pm2d_screens();
        let mut a = s.base_state();
        a.q[1] += 10.0;
        assert!(t4_of(&a, &s).is_err());
    }

    #[test]
    fn corner_separation() {
        // |A' - T_j(A'')| >= 1 - delta for A', A'' in the ball
        let s = pm2d_screens();
        let a0 = s.base_state();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let a1 = random_state_in_ball(&a0, s.delta, 2, &mut rng);
            let a2 = random_state_in_ball(&a0, s.delta, 2, &mut rng);
            let cfg = t4_of(&a2, &s).unwrap();
            for c in &cfg.corners {
                assert!(
                    a1.dist(c) >= 1.0 - s.delta,
                    "separation {} < {}",
                    a1.dist(c),
                    1.0 - s.delta
                );
            }
        }
    }

    #[test]
    fn eta_gate() {
        assert!(eta_admissible(0.15f64)); // 0.85^3 = 0.614125 > 1/2
        assert!(!eta_admissible(0.25f64)); // 0.75^3 = 0.421875 <= 1/2
    }

    #[test]
    fn arms_structure() {
        let s = pm2d_screens();
        let a0 = s.base_state();
        let cfg = t4_of(&a0, &s).unwrap();
        let arms = perturbed_arms(&cfg, &s, 0.1, 0.15).unwrap();
        assert!(arms.closure_error < 1e-12, "A_4 must close back to A");
        assert!(arms.separation_ratio >= 0.5, "(away2)-type separation violated");
        // cyclic relation A_i = (1 - eta l_i) A_{i-1} + eta l_i Tbar_i
        for i in 0..4 {
            let lhs = &arms.arm_states[i + 1];
            let rhs = arms.arm_states[i]
                .scale(1.0 - 0.15 * cfg.weights[i])
                .add(&arms.bent_corners[i].scale(0.15 * cfg.weights[i]));
            assert!(lhs.dist(&rhs) < 1e-12);
        }
        // bent corner differences stay in the cone
        for i in 0..4 {
            let d = arms.bent_corners[i].sub(&arms.arm_states[i]);
            assert!(in_restricted_cone(&s, &d, 1e-6));
        }
    }

    #[test]
    fn arms_eta_rejection_and_s_limit() {
        let s = pm2d_screens();
        let cfg = t4_of(&s.base_state(), &s).unwrap();
        assert!(matches!(
            perturbed_arms(&cfg, &s, 0.1, 0.25),
            Err(Error::EtaTooLarge(..))
        ));
        assert!(perturbed_arms(&cfg, &s, 0.3, 0.15).is_err());
    }

    #[test]
    fn arms_s_continuity() {
        let s = pm2d_screens();
        let cfg = t4_of(&s.base_state(), &s).unwrap();
        let tiny = perturbed_arms(&cfg, &s, 1e-6, 0.15).unwrap();
        // s -> 0 limit: Tbar_i -> T_i + A_{i-1} - A
        for i in 0..4 {
            let limit = cfg.corners[i].add(&tiny.arm_states[i]).sub(&cfg.base);
            assert!(tiny.bent_corners[i].dist(&limit) < 1e-5);
        }
    }

    #[test]
    fn membership_trivial_and_far() {
        let s = pm2d_screens();
        let a0 = s.base_state();
        assert!(membership_witness(&a0, &s, 1).is_some());
        let mut far = a0.clone();
        far.q[0] += 10.0;
        assert!(membership_witness(&far, &s, 1).is_none());
    }

    #[test]
    fn membership_midpoint_witness() {
        let s = pm2d_screens();
        let a0 = s.base_state();
        let cfg = t4_of(&a0, &s).unwrap();
        let mid = a0.scale(0.5).add(&cfg.corners[0].scale(0.5));
        let w = membership_witness(&mid, &s, 3).expect("midpoint must be inside");
        let cfg2 = t4_of(&w.a_second, &s).unwrap();
        let rec = w
            .a_prime
            .scale(w.t)
            .add(&cfg2.corners[w.corner_index].scale(1.0 - w.t));
        assert!(rec.dist(&mid) < 1e-4, "witness residual {}", rec.dist(&mid));
    }

    #[test]
    fn openness_jacobian_closed_form() {
        assert!((openness_jacobian(0.0f64, 0.5, 2) + 1.0 / 16.0).abs() < 1e-15);
        assert_eq!(openness_jacobian(0.3f64, 0.0, 2), 0.0);
        assert_eq!(openness_jacobian(0.3f64, 1.0, 3), 0.0);
        assert_eq!(openness_jacobian(1.0f64, 0.5, 2), 0.0);
    }

    #[test]
    fn openness_probe_determinant() {
        // FD-linearize the perturbation map; its determinant factors as
        // (theta'-1) t^n and shares the zero set of the printed closed form
        // on t in (0,1).
        let s = pm2d_screens();
        let a0 = s.base_state();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a_prime = random_state_in_ball(&a0, s.delta * 0.5, 2, &mut rng);
        let a_second = random_state_in_ball(&a0, s.delta * 0.5, 2, &mut rng);
        let corner = t4_of(&a_second, &s).unwrap().corners[0].clone();
        let t = 0.37;
        let n = 2;
        let dim = 2 * n + 1;
        let fd = 1e-6;
        let mut jac = vec![vec![0.0f64; dim]; dim];
        for col in 0..dim {
            let mut dt = 0.0;
            let mut dq = vec![0.0; n];
            let mut dx = vec![0.0; n];
            match col {
                0 => dt = fd,
                c if c <= n => dq[c - 1] = fd,
                c => dx[c - n - 1] = fd,
            }
            let img = openness_probe_map(&a_prime, &corner, t, dt, &dq, &dx);
            let v = img.to_vec();
            for (row, val) in v.iter().enumerate() {
                jac[row][col] = *val / fd;
            }
        }
        let det_fd = det_dense(&jac);
        let derived = (a_prime.theta - 1.0) * t.powi(n as i32);
        assert!(
            (det_fd - derived).abs() < 1e-8 * derived.abs().max(1.0),
            "FD {det_fd} vs derived {derived}"
        );
        assert!(det_fd.abs() > 0.0);
        assert!(openness_jacobian(a_prime.theta, t, n).abs() > 0.0);
    }

    #[test]
    fn angle_helper_sane() {
        let a = angle_between(&[1.0, 0.0], &[0.0, 2.0]);
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
