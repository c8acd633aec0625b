//! Sphere, equirectangular and tangent-plane geometry.
//!
//! Conventions used throughout the crate:
//!
//! * `theta` is the polar angle measured from the north pole, `phi` the
//!   azimuth. The unit vector of `(theta, phi)` is
//!   `(sin θ cos φ, sin θ sin φ, cos θ)`.
//! * Continuous equirectangular coordinates satisfy `θ = π·y/H` and
//!   `φ = 2π·x/W`. Pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`,
//!   so row centers never sit on a pole.
//! * Tangent planes sit at distance 1 from the sphere center. The `u` axis
//!   points east (increasing φ, i.e. increasing column) and the `v` axis
//!   points south along the local meridian (increasing θ, i.e. increasing row),
//!   so a tangent image has the same orientation as the equirectangular one.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest transformed-kernel side; wider footprints are dilated instead.
pub const MAX_KERNEL_SIDE: usize = 65;

const WEIGHT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereCoord {
    pub theta: f64,
    pub phi: f64,
}

impl SphereCoord {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !phi.is_finite() {
            return Err(Error::Domain(format!(
                "polar angle {theta} outside [0, π] or non-finite azimuth {phi}"
            )));
        }
        Ok(SphereCoord {
            theta,
            phi: normalize_azimuth(phi),
        })
    }

    pub fn to_unit(self) -> [f64; 3] {
        unit_vector(self.theta, self.phi)
    }

    pub fn from_unit(v: [f64; 3]) -> Self {
        SphereCoord {
            theta: v[0].hypot(v[1]).atan2(v[2]),
            phi: normalize_azimuth(v[1].atan2(v[0])),
        }
    }

    /// Great-circle distance in radians.
    pub fn angle_to(self, other: SphereCoord) -> f64 {
        let a = self.to_unit();
        let b = other.to_unit();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        norm3(cross).atan2(dot3(a, b))
    }
}

pub fn normalize_azimuth(phi: f64) -> f64 {
    let p = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Unit vector for arbitrary (possibly out-of-range) angles.
#[inline]
pub fn unit_vector(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// A pixel lattice. Equirectangular grids have `width == 2 * height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "grid extents must be >= 1, got {height}x{width}"
            )));
        }
        Ok(GridSpec { height, width })
    }

    /// 2:1 equirectangular grid of the given height.
    pub fn equirect(height: usize) -> Result<Self> {
        GridSpec::new(height, 2 * height)
    }

    pub fn is_equirect(&self) -> bool {
        self.width == 2 * self.height
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Polar angle of the center of row `y`.
    pub fn row_theta(&self, y: usize) -> f64 {
        PI * (y as f64 + 0.5) / self.height as f64
    }

    /// Azimuth of the center of column `x`.
    pub fn col_phi(&self, x: usize) -> f64 {
        TAU * (x as f64 + 0.5) / self.width as f64
    }

    pub fn pixel_center(&self, x: usize, y: usize) -> SphereCoord {
        SphereCoord {
            theta: self.row_theta(y),
            phi: self.col_phi(x),
        }
    }

    /// Radians of polar angle per row.
    pub fn pitch(&self) -> f64 {
        PI / self.height as f64
    }

    /// The grid after `n` rounds of 2×2 floor pooling.
    pub fn pooled(&self, n: u32) -> GridSpec {
        GridSpec {
            height: self.height >> n,
            width: self.width >> n,
        }
    }
}

/// `(θ, φ) = (π·y/H, 2π·x/W)` for continuous coordinates.
pub fn equirect_to_sphere(x: f64, y: f64, grid: GridSpec) -> Result<SphereCoord> {
    let (w, h) = (grid.width as f64, grid.height as f64);
    if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
        return Err(Error::Precondition(format!(
            "pixel coordinate ({x}, {y}) outside {}x{} grid",
            grid.width, grid.height
        )));
    }
    Ok(SphereCoord {
        theta: PI * y / h,
        phi: TAU * x / w,
    })
}

/// Inverse of [`equirect_to_sphere`]: returns continuous `(x, y)` with
/// `x ∈ [0, W)` and `y ∈ [0, H]`.
pub fn sphere_to_equirect(p: SphereCoord, grid: GridSpec) -> (f64, f64) {
    let x = snap(p.phi / TAU * grid.width as f64);
    let y = snap(p.theta / PI * grid.height as f64);
    let x = if x >= grid.width as f64 {
        x - grid.width as f64
    } else {
        x
    };
    (x, y)
}

// Lattice coordinates survive the trigonometric round trip only up to an ulp
// or two; pull those back onto the integer.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 8.0 * f64::EPSILON * r.abs().max(1.0) {
        r
    } else {
        v
    }
}

/// Orthonormal frame of the plane tangent at `center`.
#[derive(Clone, Copy, Debug)]
pub struct TangentFrame {
    pub normal: [f64; 3],
    pub east: [f64; 3],
    pub south: [f64; 3],
}

impl TangentFrame {
    pub fn at(center: SphereCoord) -> Self {
        let (st, ct) = center.theta.sin_cos();
        let (sp, cp) = center.phi.sin_cos();
        TangentFrame {
            normal: [st * cp, st * sp, ct],
            east: [-sp, cp, 0.0],
            south: [ct * cp, ct * sp, -st],
        }
    }

    /// Project a unit vector; `None` when it is on or behind the horizon.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let d = dot3(p, self.normal);
        if d <= 1e-12 {
            return None;
        }
        Some((dot3(p, self.east) / d, dot3(p, self.south) / d))
    }

    /// Ray direction (not normalized) through plane point `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [
            self.normal[0] + u * self.east[0] + v * self.south[0],
            self.normal[1] + u * self.east[1] + v * self.south[1],
            self.normal[2] + u * self.east[2] + v * self.south[2],
        ]
    }
}

/// Gnomonic projection of `p` onto the plane tangent at `center`.
pub fn gnomonic_forward(center: SphereCoord, p: SphereCoord) -> Result<(f64, f64)> {
    TangentFrame::at(center)
        .project(p.to_unit())
        .ok_or_else(|| {
            Error::Domain(format!(
                "point {p:?} is not on the hemisphere visible from {center:?}"
            ))
        })
}

pub fn gnomonic_inverse(center: SphereCoord, u: f64, v: f64) -> SphereCoord {
    SphereCoord::from_unit(TangentFrame::at(center).ray(u, v))
}

/// A square pixel grid on the plane tangent at `center`.
///
/// `step` is the plane distance between neighbouring pixel centers, which is
/// also the angular pitch (radians) at the tangency point. Odd sides put the
/// central pixel on the tangency point; even sides put the tangency point on
/// the corner shared by the four central pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentGrid {
    pub center: SphereCoord,
    pub step: f64,
    pub side: usize,
}

impl TangentGrid {
    pub fn with_step(center: SphereCoord, step: f64, side: usize) -> Result<Self> {
        let tg = TangentGrid { center, step, side };
        tg.validate()?;
        Ok(tg)
    }

    /// Grid whose outer pixel edges span the full field of view `fov`.
    pub fn with_fov(center: SphereCoord, fov: f64, side: usize) -> Result<Self> {
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::Domain(format!("field of view {fov} not in (0, π)")));
        }
        if side == 0 {
            return Err(Error::Precondition("tangent grid side must be >= 1".into()));
        }
        TangentGrid::with_step(center, 2.0 * (fov / 2.0).tan() / side as f64, side)
    }

    pub fn fov(&self) -> f64 {
        2.0 * (self.side as f64 * self.step / 2.0).atan()
    }

    fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::Precondition("tangent grid side must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Precondition(format!(
                "bad tangent step {}",
                self.step
            )));
        }
        let fov = self.fov();
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::Domain(format!("field of view {fov} not in (0, π)")));
        }
        Ok(())
    }

    /// Plane coordinate of pixel index `i` along either axis.
    #[inline]
    pub fn plane_coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5 - self.side as f64 / 2.0) * self.step
    }
}

/// Sparse linear resampling operator from an input grid to an output grid.
///
/// Entries are `(out_index, in_index, weight)` with row-major pixel indices.
/// `out_index` entries are sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMap {
    pub out_rows: usize,
    pub out_cols: usize,
    pub in_grid: GridSpec,
    pub entries: Vec<(u32, u32, f64)>,
}

impl SamplingMap {
    /// Apply to an `H × W × C` map on `in_grid`, giving `out_rows × out_cols × C`.
    pub fn apply(&self, input: &crate::tensor::FeatureMap) -> Result<crate::tensor::FeatureMap> {
        let (h, w, c) = input.hwc()?;
        if h != self.in_grid.height || w != self.in_grid.width {
            return Err(Error::Shape(format!(
                "sampling map expects {}x{} input, got {h}x{w}",
                self.in_grid.height, self.in_grid.width
            )));
        }
        let mut out = crate::tensor::Tensor::zeros(&[self.out_rows, self.out_cols, c]);
        let src = input.data();
        let dst = out.data_mut();
        for &(o, i, wgt) in &self.entries {
            let (o, i) = (o as usize * c, i as usize * c);
            for ch in 0..c {
                dst[o + ch] += wgt * src[i + ch];
            }
        }
        Ok(out)
    }

    /// Per-output weight sums.
    pub fn weight_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.out_rows * self.out_cols];
        for &(o, _, w) in &self.entries {
            sums[o as usize] += w;
        }
        sums
    }

    /// The same map for content rotated by `shift` input columns; valid for
    /// equirectangular inputs where a whole-pixel azimuth shift is exact.
    pub fn shifted_columns(&self, shift: isize) -> SamplingMap {
        let w = self.in_grid.width as isize;
        let entries = self
            .entries
            .iter()
            .map(|&(o, i, wgt)| {
                let (r, c) = (i as isize / w, i as isize % w);
                let c = (c + shift).rem_euclid(w);
                (o, (r * w + c) as u32, wgt)
            })
            .collect();
        SamplingMap {
            entries,
            ..self.clone()
        }
    }
}

/// Bilinear taps at fractional pixel position `(fx, fy)` (pixel-center
/// units) on an equirectangular grid: columns wrap, rows clamp.
fn equirect_bilinear(fx: f64, fy: f64, grid: GridSpec, mut emit: impl FnMut(usize, f64)) {
    let (h, w) = (grid.height as isize, grid.width as isize);
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut taps: [(usize, f64); 4] = [(0, 0.0); 4];
    let mut n = 0;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let wgt = wy * wx;
            if wgt <= WEIGHT_EPS {
                continue;
            }
            let r = (y0 + dy).clamp(0, h - 1);
            let c = (x0 + dx).rem_euclid(w);
            let idx = (r * w + c) as usize;
            if let Some(t) = taps[..n].iter_mut().find(|t| t.0 == idx) {
                t.1 += wgt;
            } else {
                taps[n] = (idx, wgt);
                n += 1;
            }
        }
    }
    for &(idx, wgt) in &taps[..n] {
        emit(idx, wgt);
    }
}

/// Resample an equirectangular image onto a tangent grid.
pub fn build_tangent_sampling_map(tg: &TangentGrid, grid: GridSpec) -> Result<SamplingMap> {
    tg.validate()?;
    if !grid.is_equirect() {
        return Err(Error::Precondition(format!(
            "expected a 2:1 equirectangular grid, got {}x{}",
            grid.width, grid.height
        )));
    }
    let frame = TangentFrame::at(tg.center);
    let mut entries = Vec::with_capacity(tg.side * tg.side * 4);
    for b in 0..tg.side {
        let v = tg.plane_coord(b);
        for a in 0..tg.side {
            let u = tg.plane_coord(a);
            let p = SphereCoord::from_unit(frame.ray(u, v));
            let (x, y) = sphere_to_equirect(p, grid);
            let out = (b * tg.side + a) as u32;
            equirect_bilinear(x - 0.5, y - 0.5, grid, |i, w| {
                entries.push((out, i as u32, w))
            });
        }
    }
    Ok(SamplingMap {
        out_rows: tg.side,
        out_cols: tg.side,
        in_grid: grid,
        entries,
    })
}

/// The reverse direction: paint the tangent grid's image onto an
/// equirectangular canvas. Canvas pixels outside the tangent image (or on the
/// far hemisphere) receive no entries.
pub fn build_canvas_sampling_map(tg: &TangentGrid, grid: GridSpec) -> Result<SamplingMap> {
    tg.validate()?;
    let frame = TangentFrame::at(tg.center);
    let side = tg.side as isize;
    let half = tg.side as f64 / 2.0;
    let mut entries = Vec::new();
    for y in 0..grid.height {
        for x in 0..grid.width {
            let p = grid.pixel_center(x, y).to_unit();
            let Some((u, v)) = frame.project(p) else {
                continue;
            };
            let fa = u / tg.step + half - 0.5;
            let fb = v / tg.step + half - 0.5;
            if fa <= -1.0 || fb <= -1.0 || fa >= tg.side as f64 || fb >= tg.side as f64 {
                continue;
            }
            let out = (y * grid.width + x) as u32;
            let (a0, b0) = (fa.floor(), fb.floor());
            let (ta, tb) = (fa - a0, fb - b0);
            let (a0, b0) = (a0 as isize, b0 as isize);
            for (db, wb) in [(0, 1.0 - tb), (1, tb)] {
                for (da, wa) in [(0, 1.0 - ta), (1, ta)] {
                    let (a, b) = (a0 + da, b0 + db);
                    let wgt = wa * wb;
                    if wgt > WEIGHT_EPS && (0..side).contains(&a) && (0..side).contains(&b) {
                        entries.push((out, (b * side + a) as u32, wgt));
                    }
                }
            }
        }
    }
    Ok(SamplingMap {
        out_rows: grid.height,
        out_cols: grid.width,
        in_grid: GridSpec::new(tg.side, tg.side)?,
        entries,
    })
}

/// Rows × columns of a transformed kernel, plus the tap spacing in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct KernelShape {
    pub h: usize,
    pub w: usize,
    pub dilation: usize,
}

impl KernelShape {
    pub fn taps(&self) -> usize {
        self.h * self.w
    }

    /// Effective `(rows, cols)` footprint in pixels.
    pub fn extent(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.dilation + 1,
            (self.w - 1) * self.dilation + 1,
        )
    }
}

/// Half-extents `(rows, cols)` in pixels of the back-projected footprint of
/// a `k × k` tangent kernel centred at polar angle `theta`, and whether the
/// footprint encloses a pole.
pub fn receptive_field_half_extent(
    theta: f64,
    k: usize,
    spacing: f64,
    grid: GridSpec,
) -> (f64, f64, bool) {
    const SAMPLES_PER_EDGE: usize = 256;
    let center = SphereCoord { theta, phi: 0.0 };
    let frame = TangentFrame::at(center);
    let half = k as f64 * spacing / 2.0;
    let row_scale = grid.height as f64 / PI;
    let col_scale = grid.width as f64 / TAU;

    let mut max_dy: f64 = 0.0;
    let mut max_dx: f64 = 0.0;
    let mut visit = |u: f64, v: f64| {
        let p = SphereCoord::from_unit(frame.ray(u, v));
        let dphi = {
            let d = p.phi.rem_euclid(TAU);
            if d > PI {
                d - TAU
            } else {
                d
            }
        };
        max_dy = max_dy.max(((p.theta - theta) * row_scale).abs());
        max_dx = max_dx.max((dphi * col_scale).abs());
    };
    for i in 0..=SAMPLES_PER_EDGE {
        let t = -half + 2.0 * half * i as f64 / SAMPLES_PER_EDGE as f64;
        visit(t, -half);
        visit(t, half);
        visit(-half, t);
        visit(half, t);
    }

    let mut encloses_pole = false;
    for pole in [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]] {
        if let Some((u, v)) = frame.project(pole) {
            if u.abs() <= half && v.abs() <= half {
                encloses_pole = true;
                let pole_theta = if pole[2] > 0.0 { 0.0 } else { PI };
                max_dy = max_dy.max(((pole_theta - theta) * row_scale).abs());
            }
        }
    }
    (max_dy, max_dx, encloses_pole)
}

fn smallest_odd_at_least(extent: f64) -> usize {
    let n = (extent - 1e-9).ceil().max(1.0) as usize;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

/// Smallest odd tap count whose dilated extent covers `extent` pixels.
fn odd_taps_covering(extent: usize, dilation: usize) -> usize {
    let n = (extent - 1).div_ceil(dilation) + 1;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

/// Minimal odd bounding box of the back-projected receptive field of a
/// `k × k` kernel with tangent pixel pitch `spacing` at polar angle `theta`.
///
/// Sides above [`MAX_KERNEL_SIDE`] are fixed at the cap and the kernel is
/// dilated to keep covering the box.
pub fn target_kernel_shape(
    theta: f64,
    k: usize,
    spacing: f64,
    grid: GridSpec,
) -> Result<KernelShape> {
    if !(theta > 0.0 && theta < PI) {
        return Err(Error::Domain(format!(
            "kernel shape undefined at polar angle {theta} (poles excluded)"
        )));
    }
    if k.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "source kernel side {k} must be odd"
        )));
    }
    if !(spacing > 0.0 && (k as f64 * spacing / 2.0).atan() < PI / 2.0) {
        return Err(Error::Precondition(format!(
            "bad tangent spacing {spacing}"
        )));
    }
    // the footprint is mirror-symmetric about the equator
    let theta = theta.min(PI - theta);
    let (half_h, half_w, pole) = receptive_field_half_extent(theta, k, spacing, grid);

    let max_w = if grid.width.is_multiple_of(2) {
        grid.width - 1
    } else {
        grid.width
    };
    let box_h = smallest_odd_at_least(2.0 * half_h);
    let box_w = if pole {
        max_w
    } else {
        smallest_odd_at_least(2.0 * half_w).min(max_w)
    };

    let cap = MAX_KERNEL_SIDE;
    let dilation = [box_h, box_w]
        .into_iter()
        .filter(|&b| b > cap)
        .map(|b| (b - 1).div_ceil(cap - 1))
        .max()
        .unwrap_or(1);
    let side = |b: usize| {
        if b > cap {
            cap
        } else {
            odd_taps_covering(b, dilation)
        }
    };
    Ok(KernelShape {
        h: side(box_h),
        w: side(box_w),
        dilation,
    })
}

/// Bilinear projection matrix `P` (`(h·w) × k²`) resampling a `k × k`
/// tangent-plane kernel onto the equirectangular taps of `shape` at polar
/// angle `theta`.
pub fn projected_kernel_weights(
    theta: f64,
    k: usize,
    shape: KernelShape,
    spacing: f64,
    grid: GridSpec,
) -> Result<Matrix> {
    let expected = target_kernel_shape(theta, k, spacing, grid)?;
    if expected != shape {
        return Err(Error::Precondition(format!(
            "kernel shape {shape:?} does not match {expected:?} at θ={theta}"
        )));
    }
    Ok(projection_matrix_unchecked(theta, k, shape, spacing, grid))
}

pub(crate) fn projection_matrix_unchecked(
    theta: f64,
    k: usize,
    shape: KernelShape,
    spacing: f64,
    grid: GridSpec,
) -> Matrix {
    let frame = TangentFrame::at(SphereCoord { theta, phi: 0.0 });
    let k2 = k * k;
    let mut p = Matrix::zeros(shape.taps(), k2);
    let ch = (shape.h as isize - 1) / 2;
    let cw = (shape.w as isize - 1) / 2;
    let d = shape.dilation as isize;
    let center_tap = (k as f64 - 1.0) / 2.0;
    for r in 0..shape.h {
        let dy = (r as isize - ch) * d;
        let t = theta + dy as f64 * grid.pitch();
        for c in 0..shape.w {
            let dx = (c as isize - cw) * d;
            let ph = dx as f64 * TAU / grid.width as f64;
            let Some((u, v)) = frame.project(unit_vector(t, ph)) else {
                continue;
            };
            let fa = u / spacing + center_tap;
            let fb = v / spacing + center_tap;
            let (a0, b0) = (fa.floor(), fb.floor());
            let (ta, tb) = (fa - a0, fb - b0);
            let (a0, b0) = (a0 as isize, b0 as isize);
            let row = r * shape.w + c;
            for (db, wb) in [(0, 1.0 - tb), (1, tb)] {
                for (da, wa) in [(0, 1.0 - ta), (1, ta)] {
                    let (a, b) = (a0 + da, b0 + db);
                    let wgt = wa * wb;
                    if wgt > WEIGHT_EPS
                        && (0..k as isize).contains(&a)
                        && (0..k as isize).contains(&b)
                    {
                        p.data[row * k2 + (b as usize) * k + a as usize] += wgt;
                    }
                }
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid80() -> GridSpec {
        GridSpec::equirect(80).unwrap()
    }

    #[test]
    fn equirect_to_sphere_examples() {
        let g = grid80();
        assert_eq!(
            equirect_to_sphere(0.0, 0.0, g).unwrap(),
            SphereCoord {
                theta: 0.0,
                phi: 0.0
            }
        );
        let p = equirect_to_sphere(80.0, 40.0, g).unwrap();
        assert!((p.theta - PI / 2.0).abs() < 1e-15 && (p.phi - PI).abs() < 1e-15);
        let p = equirect_to_sphere(159.0, 79.0, g).unwrap();
        assert!((p.theta - 79.0 * PI / 80.0).abs() < 1e-15);
        assert!((p.phi - 159.0 * PI / 80.0).abs() < 1e-15);
    }

    #[test]
    fn equirect_to_sphere_rejects_out_of_range() {
        let g = grid80();
        assert!(matches!(
            equirect_to_sphere(160.0, 0.0, g),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            equirect_to_sphere(0.0, -1.0, g),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn lattice_round_trip_is_exact() {
        for h in [1usize, 5, 20, 40, 80, 160] {
            let g = GridSpec::equirect(h).unwrap();
            for y in 0..h {
                for x in 0..g.width {
                    let p = equirect_to_sphere(x as f64, y as f64, g).unwrap();
                    assert_eq!(sphere_to_equirect(p, g), (x as f64, y as f64));
                }
            }
        }
    }

    #[test]
    fn gnomonic_equator_example() {
        let c = SphereCoord::new(PI / 2.0, 0.0).unwrap();
        let p = SphereCoord::new(PI / 2.0, 0.3).unwrap();
        let (u, v) = gnomonic_forward(c, p).unwrap();
        assert!((u - 0.3f64.tan()).abs() < 1e-15);
        assert!((u - 0.309336).abs() < 1e-6);
        assert!(v.abs() < 1e-15);
        assert_eq!(gnomonic_forward(c, c).unwrap(), (0.0, 0.0));
    }

    // Independent oracle: intersect the ray from the origin through p with
    // the plane n·x = 1 and read off coordinates in a frame built from
    // finite differences of the spherical parameterisation.
    fn ray_plane_oracle(c: SphereCoord, p: SphereCoord) -> (f64, f64) {
        let n = c.to_unit();
        let h = 1e-6;
        let de = unit_vector(c.theta, c.phi + h);
        let dn = unit_vector(c.theta + h, c.phi);
        let mut east = [de[0] - n[0], de[1] - n[1], de[2] - n[2]];
        let mut south = [dn[0] - n[0], dn[1] - n[1], dn[2] - n[2]];
        let ne = norm3(east);
        let ns = norm3(south);
        east.iter_mut().for_each(|v| *v /= ne);
        south.iter_mut().for_each(|v| *v /= ns);
        let q = p.to_unit();
        let t = 1.0 / dot3(q, n);
        let hit = [q[0] * t - n[0], q[1] * t - n[1], q[2] * t - n[2]];
        (dot3(hit, east), dot3(hit, south))
    }

    #[test]
    fn gnomonic_matches_ray_plane_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = SphereCoord::new(rng.gen_range(0.2..2.9), rng.gen_range(0.0..TAU)).unwrap();
            let (u, v): (f64, f64) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let p = gnomonic_inverse(c, u, v);
            let (ou, ov) = ray_plane_oracle(c, p);
            assert!(
                (ou - u).abs() < 1e-5 && (ov - v).abs() < 1e-5,
                "{u} {v} vs {ou} {ov}"
            );
        }
    }

    #[test]
    fn gnomonic_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < 1000 {
            let c = SphereCoord::new(rng.gen_range(0.0..PI), rng.gen_range(0.0..TAU)).unwrap();
            let p = SphereCoord::new(rng.gen_range(0.0..PI), rng.gen_range(0.0..TAU)).unwrap();
            let Ok((u, v)) = gnomonic_forward(c, p) else {
                continue;
            };
            if c.angle_to(p) > 1.55 {
                continue;
            }
            worst = worst.max(gnomonic_inverse(c, u, v).angle_to(p));
            n += 1;
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn gnomonic_rejects_far_hemisphere() {
        let c = SphereCoord::new(PI / 2.0, 0.0).unwrap();
        let p = SphereCoord::new(PI / 2.0, PI / 2.0).unwrap();
        assert!(matches!(gnomonic_forward(c, p), Err(Error::Domain(_))));
        let q = SphereCoord::new(PI / 2.0, PI).unwrap();
        assert!(gnomonic_forward(c, q).is_err());
    }

    #[test]
    fn single_pixel_map_on_lattice_point_is_exact() {
        let g = grid80();
        let tg = TangentGrid::with_step(g.pixel_center(17, 40), g.pitch(), 1).unwrap();
        let m = build_tangent_sampling_map(&tg, g).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].1 as usize, 40 * 160 + 17);
        assert!((m.entries[0].2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_map_partition_of_unity() {
        let g = grid80();
        for (theta, phi) in [(0.1, 0.0), (1.0, 2.0), (PI / 2.0, 6.2), (3.0, 4.0)] {
            let tg = TangentGrid::with_fov(SphereCoord::new(theta, phi).unwrap(), 1.2, 33).unwrap();
            let m = build_tangent_sampling_map(&tg, g).unwrap();
            for s in m.weight_sums() {
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert!(m.entries.iter().all(|e| e.2 >= 0.0));
        }
    }

    #[test]
    fn sampling_map_rejects_wide_fov() {
        let c = SphereCoord::new(1.0, 0.0).unwrap();
        assert!(matches!(
            TangentGrid::with_fov(c, PI, 9),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn seam_resampling_matches_unrolled_image() {
        let g = GridSpec::equirect(20).unwrap();
        // φ-periodic test image
        let f = |x: usize, y: usize| {
            let phi = g.col_phi(x);
            (3.0 * phi).sin() + 0.3 * (phi).cos() * y as f64 + 0.01 * (y * y) as f64
        };
        let img = crate::tensor::Tensor::from_fn(&[g.height, g.width, 1], |i| {
            f(i % g.width, i / g.width)
        });
        let tg = TangentGrid::with_fov(SphereCoord::new(1.3, 0.0).unwrap(), 1.0, 15).unwrap();
        let m = build_tangent_sampling_map(&tg, g).unwrap();
        let got = m.apply(&img).unwrap();

        // brute force: unroll three periods horizontally and sample directly
        let w = g.width as isize;
        let unrolled = |x: isize, y: isize| {
            let y = y.clamp(0, g.height as isize - 1) as usize;
            f((x + w) as usize % g.width, y)
        };
        let frame = TangentFrame::at(tg.center);
        for b in 0..tg.side {
            for a in 0..tg.side {
                let p = SphereCoord::from_unit(frame.ray(tg.plane_coord(a), tg.plane_coord(b)));
                let mut x = p.phi / TAU * g.width as f64 - 0.5;
                if x > g.width as f64 / 2.0 {
                    x -= g.width as f64;
                }
                let y = p.theta / PI * g.height as f64 - 0.5;
                let (x0, y0) = (x.floor(), y.floor());
                let (tx, ty) = (x - x0, y - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let expect = (1.0 - ty)
                    * ((1.0 - tx) * unrolled(x0, y0) + tx * unrolled(x0 + 1, y0))
                    + ty * ((1.0 - tx) * unrolled(x0, y0 + 1) + tx * unrolled(x0 + 1, y0 + 1));
                assert!((got.at3(b, a, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equator_kernel_shape_is_planar() {
        let g = grid80();
        let s = target_kernel_shape(PI / 2.0, 3, g.pitch(), g).unwrap();
        assert_eq!(
            s,
            KernelShape {
                h: 3,
                w: 3,
                dilation: 1
            }
        );
        let s = target_kernel_shape(g.row_theta(40), 5, g.pitch(), g).unwrap();
        assert_eq!(
            s,
            KernelShape {
                h: 5,
                w: 5,
                dilation: 1
            }
        );
    }

    // Oracle for the equator case: back-project the corners of all nine
    // tap cells directly with the closed-form inverse.
    #[test]
    fn equator_shape_matches_corner_backprojection() {
        let g = grid80();
        let s = g.pitch();
        let c = SphereCoord::new(PI / 2.0, 0.0).unwrap();
        let (mut mx, mut my): (f64, f64) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = ((i as f64 - 1.5) * s, (j as f64 - 1.5) * s);
                let p = gnomonic_inverse(c, u, v);
                let dphi = if p.phi > PI { p.phi - TAU } else { p.phi };
                mx = mx.max((dphi / TAU * 160.0).abs());
                my = my.max(((p.theta - PI / 2.0) / PI * 80.0).abs());
            }
        }
        assert_eq!(
            (
                smallest_odd_at_least(2.0 * my),
                smallest_odd_at_least(2.0 * mx)
            ),
            (3, 3)
        );
    }

    #[test]
    fn near_pole_kernel_is_capped_and_dilated() {
        let g = grid80();
        let s = target_kernel_shape(4f64.to_radians(), 3, g.pitch(), g).unwrap();
        assert_eq!(s.w, MAX_KERNEL_SIDE, "{s:?}");
        assert!(s.dilation > 1);
    }

    #[test]
    fn kernel_shape_rejects_poles_and_even_k() {
        let g = grid80();
        assert!(matches!(
            target_kernel_shape(0.0, 3, g.pitch(), g),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            target_kernel_shape(PI, 3, g.pitch(), g),
            Err(Error::Domain(_))
        ));
        assert!(target_kernel_shape(1.0, 4, g.pitch(), g).is_err());
    }

    #[test]
    fn projection_at_equator_reproduces_kernel() {
        let g = grid80();
        let theta = PI / 2.0;
        let shape = target_kernel_shape(theta, 3, g.pitch(), g).unwrap();
        let p = projected_kernel_weights(theta, 3, shape, g.pitch(), g).unwrap();
        let kernel: Vec<f64> = (0..9).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.5).collect();
        for r in 0..9 {
            let v: f64 = (0..9).map(|t| p.get(r, t) * kernel[t]).sum();
            assert!((v - kernel[r]).abs() < 0.05);
        }
        assert!(p.data.iter().all(|&w| w >= 0.0));
        for r in 0..p.rows {
            assert!(p.row(r).iter().sum::<f64>() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn projection_rejects_mismatched_shape() {
        let g = grid80();
        let bad = KernelShape {
            h: 5,
            w: 3,
            dilation: 1,
        };
        assert!(matches!(
            projected_kernel_weights(PI / 2.0, 3, bad, g.pitch(), g),
            Err(Error::Precondition(_))
        ));
    }
}
