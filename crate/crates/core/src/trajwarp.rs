//! Trajectory conditioning geometry.
//!
//! Ground-plane waypoints are smoothed with a clamped B-spline, turned into
//! yaw-only camera poses, and used to reproject the first frame under a
//! uniform-depth assumption. Holes left by forward splatting are filled by
//! harmonic diffusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{bail, Result};

/// Planar trajectory request: 2 to 5 `(x, z)` waypoints in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<(f64, f64)>,
    pub num_frames: usize,
}

impl TrajectorySpec {
    pub const DEFAULT_FRAMES: usize = 25;

    pub fn new(waypoints: Vec<(f64, f64)>, num_frames: usize) -> Result<Self> {
        let spec = Self { waypoints, num_frames };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 || self.waypoints.len() > 5 {
            bail!(InvalidArgument, "trajectory needs 2..=5 waypoints, got {}", self.waypoints.len());
        }
        if self.num_frames < 2 {
            bail!(InvalidArgument, "trajectory needs at least 2 frames, got {}", self.num_frames);
        }
        if self.waypoints.iter().any(|(x, z)| !x.is_finite() || !z.is_finite()) {
            bail!(InvalidArgument, "waypoints must be finite");
        }
        Ok(())
    }
}

/// Rigid transform taking frame-0 camera coordinates to frame-t camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    /// World-to-camera rotation for a camera heading `yaw` radians from +z toward +x.
    /// Rows are the camera's right, up and forward axes.
    pub fn yaw_basis(yaw: f64) -> [[f64; 3]; 3] {
        let (s, c) = yaw.sin_cos();
        [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
    }

    pub fn yaw(yaw: f64) -> Self {
        Self { r: Self::yaw_basis(yaw), t: [0.0; 3] }
    }

    /// Pose of a camera at `center_t` heading `yaw_t`, relative to one at `center_0` heading `yaw_0`.
    pub fn relative(center_0: [f64; 3], yaw_0: f64, center_t: [f64; 3], yaw_t: f64) -> Self {
        let b0 = Self::yaw_basis(yaw_0);
        let bt = Self::yaw_basis(yaw_t);
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| bt[i][k] * b0[j][k]).sum();
            }
        }
        let d = [center_0[0] - center_t[0], center_0[1] - center_t[1], center_0[2] - center_t[2]];
        let t = mat_vec(&bt, d);
        Self { r, t }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let rp = mat_vec(&self.r, p);
        [rp[0] + self.t[0], rp[1] + self.t[1], rp[2] + self.t[2]]
    }

    /// Pose mapping `other`'s target frame into this pose's target frame,
    /// i.e. `self ∘ other⁻¹`.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        // other⁻¹: x0 = Rₒᵀ(x − Tₒ)
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.r[i][k] * other.r[j][k]).sum();
            }
        }
        let rt = mat_vec(&r, other.t);
        let t = [self.t[0] - rt[0], self.t[1] - rt[1], self.t[2] - rt[2]];
        CameraPose { r, t }
    }

    /// Camera center expressed in frame-0 camera coordinates.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(0..3).map(|i| self.r[i][j] * self.t[i]).sum::<f64>();
        }
        c
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.r;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                err = err.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        err.max((det - 1.0).abs())
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            bail!(InvalidArgument, "focal lengths must be positive: fx={fx} fy={fy}");
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `fx = fy = width`, principal point at the image center.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self { fx: width as f64, fy: width as f64, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }
}

pub const DEFAULT_DEPTH: f64 = 10.0;

/// Clamped uniform B-spline through the waypoints as control polygon, sampled at
/// `num_frames` uniform parameters. Returns `(x, 0, z)` points.
pub fn interp_trajectory(spec: &TrajectorySpec) -> Result<Vec<[f64; 3]>> {
    spec.validate()?;
    let ctrl: Vec<[f64; 2]> = spec.waypoints.iter().map(|&(x, z)| [x, z]).collect();
    let degree = 3.min(ctrl.len() - 1);
    let knots = clamped_knots(ctrl.len(), degree);
    let n = spec.num_frames;
    Ok((0..n)
        .map(|j| {
            let u = j as f64 / (n - 1) as f64;
            let [x, z] = de_boor(&ctrl, &knots, degree, u);
            [x, 0.0, z]
        })
        .collect())
}

pub(crate) fn clamped_knots(n_ctrl: usize, degree: usize) -> Vec<f64> {
    let interior = n_ctrl - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

fn de_boor(ctrl: &[[f64; 2]], knots: &[f64], p: usize, u: f64) -> [f64; 2] {
    let n = ctrl.len();
    // knot span k with knots[k] <= u < knots[k+1]; the closed right end uses the last span
    let k = if u >= knots[n] { n - 1 } else { (p..n).rev().find(|&k| knots[k] <= u).unwrap_or(p) };
    let mut d: Vec<[f64; 2]> = (0..=p).map(|j| ctrl[j + k - p]).collect();
    for r in 1..=p {
        for j in (r..=p).rev() {
            let lo = knots[j + k - p];
            let hi = knots[j + 1 + k - r];
            let alpha = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
            for c in 0..2 {
                d[j][c] = (1.0 - alpha) * d[j - 1][c] + alpha * d[j][c];
            }
        }
    }
    d[p]
}

/// Yaw-only camera poses whose forward axis follows the trajectory tangent.
///
/// Interior tangents are central differences. End tangents mirror the
/// neighbouring central tangent across the end chord, which is exact for
/// uniformly sampled circular arcs and straight lines.
pub fn poses_from_trajectory(points: &[[f64; 3]]) -> Result<Vec<CameraPose>> {
    let n = points.len();
    if n < 2 {
        bail!(InvalidArgument, "need at least 2 trajectory points, got {n}");
    }
    let planar: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[2]]).collect();
    for i in 1..n {
        let d = sub2(planar[i], planar[i - 1]);
        if norm2(d) < 1e-12 {
            bail!(Degenerate, "zero-length tangent at frame {i}: point coincides with frame {}", i - 1);
        }
    }
    let mut tangents = vec![[0.0; 2]; n];
    for i in 1..n.saturating_sub(1) {
        let d = sub2(planar[i + 1], planar[i - 1]);
        if norm2(d) < 1e-12 {
            bail!(Degenerate, "zero-length tangent at frame {i}");
        }
        tangents[i] = d;
    }
    if n == 2 {
        let d = sub2(planar[1], planar[0]);
        tangents[0] = d;
        tangents[1] = d;
    } else {
        tangents[0] = reflect(tangents[1], sub2(planar[1], planar[0]));
        tangents[n - 1] = reflect(tangents[n - 2], sub2(planar[n - 1], planar[n - 2]));
    }
    let yaws: Vec<f64> = tangents.iter().map(|t| t[0].atan2(t[1])).collect();
    Ok((0..n).map(|i| CameraPose::relative(points[0], yaws[0], points[i], yaws[i])).collect())
}

fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm2(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Mirror `t` across the line spanned by `chord`.
fn reflect(t: [f64; 2], chord: [f64; 2]) -> [f64; 2] {
    let len = norm2(chord);
    let c = [chord[0] / len, chord[1] / len];
    let dot = t[0] * c[0] + t[1] * c[1];
    [2.0 * dot * c[0] - t[0], 2.0 * dot * c[1] - t[1]]
}

/// Reprojects source pixel `(u, v)` assumed at depth `d`. Returns the target
/// pixel position and transformed depth, or `None` when the point lands behind
/// the camera.
pub fn project_pixel(pose: &CameraPose, intr: &Intrinsics, d: f64, u: f64, v: f64) -> Option<(f64, f64, f64)> {
    let ray = [(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d];
    let p = pose.apply(ray);
    if p[2] <= 0.0 {
        return None;
    }
    Some((intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy, p[2]))
}

/// Per-pixel hole flags, `true` where the warp produced no value.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMask {
    pub height: usize,
    pub width: usize,
    pub holes: Vec<bool>,
}

impl HoleMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, holes: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.holes[y * self.width + x]
    }
}

/// Uniform-depth forward warp with nearest-pixel splatting and a z-buffer.
pub fn warp_frame(frame: &Frame, pose: &CameraPose, intr: &Intrinsics, d: f64) -> Result<(Frame, HoleMask)> {
    if !(d > 0.0) {
        bail!(InvalidArgument, "depth must be positive, got {d}");
    }
    let (h, w) = (frame.height, frame.width);
    let mut out = Frame::new(h, w);
    let mut zbuf = vec![f64::INFINITY; h * w];
    for v in 0..h {
        for u in 0..w {
            let Some((tu, tv, z)) = project_pixel(pose, intr, d, u as f64, v as f64) else { continue };
            let (ru, rv) = (tu.round(), tv.round());
            if !(ru >= 0.0 && rv >= 0.0 && ru < w as f64 && rv < h as f64) {
                continue;
            }
            let (x, y) = (ru as usize, rv as usize);
            let k = y * w + x;
            if z < zbuf[k] {
                zbuf[k] = z;
                out.set_pixel(y, x, frame.pixel(v, u));
            }
        }
    }
    let holes = zbuf.iter().map(|z| !z.is_finite()).collect();
    Ok((out, HoleMask { height: h, width: w, holes }))
}

pub const INPAINT_TOLERANCE: f64 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 2000;

/// Fills holes by Jacobi iteration of the discrete Laplace equation, with
/// known pixels as Dirichlet data and the image border as a reflecting edge.
pub fn inpaint(frame: &Frame, mask: &HoleMask) -> Result<Frame> {
    let (h, w) = (frame.height, frame.width);
    if mask.height != h || mask.width != w {
        bail!(ShapeMismatch, "mask {}x{} vs frame {h}x{w}", mask.height, mask.width);
    }
    let holes: Vec<usize> = (0..h * w).filter(|&k| mask.holes[k]).collect();
    if holes.is_empty() {
        return Ok(frame.clone());
    }
    if holes.len() == h * w {
        bail!(Degenerate, "cannot inpaint a fully masked {h}x{w} frame");
    }
    let mut cur = frame.clone();
    for ch in 0..3 {
        let known: Vec<f64> = (0..h * w).filter(|&k| !mask.holes[k]).map(|k| frame.data[k * 3 + ch]).collect();
        let mean = known.iter().sum::<f64>() / known.len() as f64;
        for &k in &holes {
            cur.data[k * 3 + ch] = mean;
        }
    }
    let neighbours: Vec<Vec<usize>> = holes
        .iter()
        .map(|&k| {
            let (y, x) = (k / w, k % w);
            let mut n = Vec::with_capacity(4);
            if y > 0 {
                n.push(k - w);
            }
            if y + 1 < h {
                n.push(k + w);
            }
            if x > 0 {
                n.push(k - 1);
            }
            if x + 1 < w {
                n.push(k + 1);
            }
            n
        })
        .collect();
    let mut next = vec![0.0; holes.len() * 3];
    for _ in 0..INPAINT_MAX_ITERS {
        let mut max_change: f64 = 0.0;
        for (i, nb) in neighbours.iter().enumerate() {
            for ch in 0..3 {
                let s: f64 = nb.iter().map(|&k| cur.data[k * 3 + ch]).sum();
                next[i * 3 + ch] = s / nb.len() as f64;
            }
        }
        for (i, &k) in holes.iter().enumerate() {
            for ch in 0..3 {
                let old = cur.data[k * 3 + ch];
                max_change = max_change.max((next[i * 3 + ch] - old).abs());
                cur.data[k * 3 + ch] = next[i * 3 + ch];
            }
        }
        if max_change < INPAINT_TOLERANCE {
            break;
        }
    }
    Ok(cur)
}

/// One reprojected and inpainted frame of a warp sequence.
#[derive(Clone, Debug)]
pub struct WarpedFrame {
    pub frame: Frame,
    pub mask: HoleMask,
    pub pose: CameraPose,
}

/// Warps `frame0` along the trajectory, one output per trajectory frame.
pub fn warp_sequence(frame0: &Frame, spec: &TrajectorySpec, intr: &Intrinsics, d: f64) -> Result<Vec<WarpedFrame>> {
    let points = interp_trajectory(spec)?;
    let poses = poses_from_trajectory(&points)?;
    warp_with_poses(frame0, &poses, intr, d)
}

pub fn warp_with_poses(frame0: &Frame, poses: &[CameraPose], intr: &Intrinsics, d: f64) -> Result<Vec<WarpedFrame>> {
    poses
        .par_iter()
        .map(|pose| {
            let (warped, mask) = warp_frame(frame0, pose, intr, d)?;
            let filled = inpaint(&warped, &mask)?;
            Ok(WarpedFrame { frame: filled, mask, pose: *pose })
        })
        .collect()
}
