//! Hard z-buffered attribute rasterization plus a soft silhouette, with
//! analytic vector-Jacobian products.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::math;

/// Soft-silhouette terms below `sigmoid(-SOFT_CUTOFF)` are dropped.
pub const SOFT_CUTOFF: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    pub width: usize,
    pub height: usize,
    /// Soft-mask sharpness in squared normalized units, where half the image
    /// width is one unit (the NDC scale along x).
    pub sigma: f64,
    /// Faces with a vertex at depth <= near are skipped.
    pub near: f64,
    /// Append a soft mask channel.
    pub mask: bool,
    /// Propagate attribute gradients into screen positions through the
    /// barycentric weights.
    pub bary_grad: bool,
}

impl RasterSettings {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Per-pixel result of the hard pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    /// Covering face, `usize::MAX` for background.
    pub face: Vec<usize>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn covered(&self, p: usize) -> bool {
        self.face[p] != usize::MAX
    }
}

#[inline]
fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn xy(s: &[f64], v: usize) -> [f64; 2] {
    [s[v * 3], s[v * 3 + 1]]
}

/// Edge functions of `q` against triangle `p`, and twice the signed area.
#[inline]
fn edge_functions(p: [[f64; 2]; 3], q: [f64; 2]) -> ([f64; 3], f64) {
    let e0 = cross2(sub2(p[1], q), sub2(p[2], q));
    let e1 = cross2(sub2(p[2], q), sub2(p[0], q));
    let e2 = cross2(sub2(p[0], q), sub2(p[1], q));
    let a = cross2(sub2(p[1], p[0]), sub2(p[2], p[0]));
    ([e0, e1, e2], a)
}

fn face_usable(screen: &[f64], f: &[usize; 3], near: f64) -> bool {
    f.iter().all(|&v| {
        let d = screen[v * 3 + 2];
        d > near && screen[v * 3].is_finite() && screen[v * 3 + 1].is_finite()
    })
}

/// Inclusive pixel index range whose centers lie in `[lo, hi]`.
fn pixel_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).floor().min(n as f64 - 1.0);
    if a > b {
        None
    } else {
        Some((a as usize, b as usize))
    }
}

/// Front-most face per pixel with screen-space barycentrics.
pub fn rasterize_hard(screen: &[f64], faces: &[[usize; 3]], s: &RasterSettings) -> Fragments {
    let np = s.pixels();
    let mut out = Fragments { face: vec![usize::MAX; np], bary: vec![[0.0; 3]; np], depth: vec![f64::INFINITY; np] };
    for (fi, f) in faces.iter().enumerate() {
        if !face_usable(screen, f, s.near) {
            continue;
        }
        let p = [xy(screen, f[0]), xy(screen, f[1]), xy(screen, f[2])];
        let minx = p[0][0].min(p[1][0]).min(p[2][0]);
        let maxx = p[0][0].max(p[1][0]).max(p[2][0]);
        let miny = p[0][1].min(p[1][1]).min(p[2][1]);
        let maxy = p[0][1].max(p[1][1]).max(p[2][1]);
        let (Some((x0, x1)), Some((y0, y1))) = (pixel_range(minx, maxx, s.width), pixel_range(miny, maxy, s.height)) else {
            continue;
        };
        let z = [screen[f[0] * 3 + 2], screen[f[1] * 3 + 2], screen[f[2] * 3 + 2]];
        for j in y0..=y1 {
            for i in x0..=x1 {
                let q = [i as f64 + 0.5, j as f64 + 0.5];
                let (e, a) = edge_functions(p, q);
                if a == 0.0 {
                    continue;
                }
                let (b1, b2) = (e[1] / a, e[2] / a);
                let b = [1.0 - b1 - b2, b1, b2];
                if e[0] / a < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let d = b[0] * z[0] + b[1] * z[1] + b[2] * z[2];
                let px = j * s.width + i;
                if d < out.depth[px] {
                    out.depth[px] = d;
                    out.face[px] = fi;
                    out.bary[px] = b;
                }
            }
        }
    }
    out
}

/// Squared distance from `q` to segment `ab`, with the segment parameter of
/// the closest point and the offset `q - c`.
#[inline]
fn segment_dist2(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let ab = sub2(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let r = [q[0] - a[0] - t * ab[0], q[1] - a[1] - t * ab[1]];
    (r[0] * r[0] + r[1] * r[1], t, r)
}

/// Soft coverage of one face at one pixel, all in normalized units.
struct SoftTerm {
    /// `sgn * d2 / sigma`
    x: f64,
    sign: f64,
    edge: usize,
    t: f64,
    r: [f64; 2],
}

fn soft_term(p: [[f64; 2]; 3], q: [f64; 2], sigma: f64) -> Option<SoftTerm> {
    let (e, a) = edge_functions(p, q);
    if a == 0.0 {
        return None;
    }
    let inside = e.iter().all(|&v| v / a >= 0.0);
    let mut best = (f64::INFINITY, 0usize, 0.0, [0.0; 2]);
    for k in 0..3 {
        let (d2, t, r) = segment_dist2(q, p[k], p[(k + 1) % 3]);
        if d2 < best.0 {
            best = (d2, k, t, r);
        }
    }
    let sign = if inside { 1.0 } else { -1.0 };
    let x = sign * best.0 / sigma;
    if x < -SOFT_CUTOFF {
        return None;
    }
    Some(SoftTerm { x, sign, edge: best.1, t: best.2, r: best.3 })
}

/// Visits every (pixel, face) pair whose soft term survives the cutoff.
fn for_each_soft(screen: &[f64], faces: &[[usize; 3]], s: &RasterSettings, mut visit: impl FnMut(usize, usize, &SoftTerm)) {
    let w = 0.5 * s.width as f64;
    let reach = (SOFT_CUTOFF * s.sigma).sqrt() * w;
    for (fi, f) in faces.iter().enumerate() {
        if !face_usable(screen, f, s.near) {
            continue;
        }
        let p = [xy(screen, f[0]), xy(screen, f[1]), xy(screen, f[2])];
        let pn = [[p[0][0] / w, p[0][1] / w], [p[1][0] / w, p[1][1] / w], [p[2][0] / w, p[2][1] / w]];
        let minx = p[0][0].min(p[1][0]).min(p[2][0]) - reach;
        let maxx = p[0][0].max(p[1][0]).max(p[2][0]) + reach;
        let miny = p[0][1].min(p[1][1]).min(p[2][1]) - reach;
        let maxy = p[0][1].max(p[1][1]).max(p[2][1]) + reach;
        let (Some((x0, x1)), Some((y0, y1))) = (pixel_range(minx, maxx, s.width), pixel_range(miny, maxy, s.height)) else {
            continue;
        };
        for j in y0..=y1 {
            for i in x0..=x1 {
                let q = [(i as f64 + 0.5) / w, (j as f64 + 0.5) / w];
                if let Some(term) = soft_term(pn, q, s.sigma) {
                    visit(j * s.width + i, fi, &term);
                }
            }
        }
    }
}

/// Product of `(1 - p_f)` split into its nonzero part and a count of
/// exactly-zero factors, so leave-one-out products stay exact.
#[derive(Debug, Clone)]
struct MaskStats {
    prod_nonzero: Vec<f64>,
    zeros: Vec<u32>,
}

fn soft_mask_stats(screen: &[f64], faces: &[[usize; 3]], s: &RasterSettings) -> MaskStats {
    let np = s.pixels();
    let mut st = MaskStats { prod_nonzero: vec![1.0; np], zeros: vec![0; np] };
    for_each_soft(screen, faces, s, |px, _, term| {
        let q = 1.0 - math::sigmoid(term.x);
        if q == 0.0 {
            st.zeros[px] += 1;
        } else {
            st.prod_nonzero[px] *= q;
        }
    });
    st
}

/// Soft silhouette `1 - prod_f (1 - sigmoid(sgn d_f^2 / sigma))`.
pub fn soft_mask(screen: &[f64], faces: &[[usize; 3]], s: &RasterSettings) -> Vec<f64> {
    let st = soft_mask_stats(screen, faces, s);
    st.prod_nonzero.iter().zip(&st.zeros).map(|(&p, &z)| if z > 0 { 1.0 } else { 1.0 - p }).collect()
}

fn validate(screen: &Tensor, attrs: &Tensor, faces: &[[usize; 3]], background: &[f64], s: &RasterSettings) -> Result<()> {
    let n = screen.rows();
    if screen.cols() != 3 || attrs.rows() != n || background.len() != attrs.cols() {
        return Err(Error::ShapeMismatch(format!(
            "rasterize: screen {:?}, attrs {:?}, {} background values",
            screen.shape(),
            attrs.shape(),
            background.len()
        )));
    }
    if faces.iter().flatten().any(|&v| v >= n) {
        return Err(Error::InvalidMesh("face index out of range".into()));
    }
    if !(s.sigma > 0.0) || s.width == 0 || s.height == 0 {
        return Err(Error::BadConfig(format!("raster settings {s:?}")));
    }
    Ok(())
}

/// Rasterizes per-vertex attributes (`n x c`) at screen positions
/// (`n x 3`, pixels and depth). Output is `(H*W) x (c [+ 1])`, row-major by
/// pixel, with the soft mask as the last channel when enabled. Uncovered
/// pixels take `background`.
pub fn rasterize_var<'a>(
    tape: &mut Tape<'a>,
    screen: Var,
    attrs: Var,
    faces: &'a [[usize; 3]],
    background: &[f64],
    settings: &RasterSettings,
) -> Result<Var> {
    let (ts, ta) = (tape.value(screen), tape.value(attrs));
    validate(ts, ta, faces, background, settings)?;
    let c = ta.cols();
    let sd = ts.data();
    let frags = rasterize_hard(sd, faces, settings);
    let oc = c + settings.mask as usize;
    let np = settings.pixels();
    let mut out = vec![0.0; np * oc];
    let ad = ta.data();
    for px in 0..np {
        let row = &mut out[px * oc..px * oc + c];
        if frags.covered(px) {
            let f = faces[frags.face[px]];
            let b = frags.bary[px];
            // written relative to the first corner so constant attributes
            // come back exactly
            for ch in 0..c {
                let a0 = ad[f[0] * c + ch];
                row[ch] = a0 + b[1] * (ad[f[1] * c + ch] - a0) + b[2] * (ad[f[2] * c + ch] - a0);
            }
        } else {
            row.copy_from_slice(background);
        }
    }
    let stats = if settings.mask {
        let st = soft_mask_stats(sd, faces, settings);
        for px in 0..np {
            out[px * oc + c] = if st.zeros[px] > 0 { 1.0 } else { 1.0 - st.prod_nonzero[px] };
        }
        Some(st)
    } else {
        None
    };
    let op = RasterOp { faces, settings: *settings, frags, stats, c };
    tape.custom(&[screen, attrs], Tensor::new(&[np, oc], out)?, Box::new(op))
}

struct RasterOp<'a> {
    faces: &'a [[usize; 3]],
    settings: RasterSettings,
    frags: Fragments,
    stats: Option<MaskStats>,
    c: usize,
}

impl CustomOp for RasterOp<'_> {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (screen, attrs) = (inputs[0], inputs[1]);
        let sd = screen.data();
        let ad = attrs.data();
        let c = self.c;
        let s = &self.settings;
        let oc = c + s.mask as usize;
        let g = grad.data();
        let mut gs = vec![0.0; screen.numel()];
        let mut ga = vec![0.0; attrs.numel()];
        for px in 0..s.pixels() {
            if !self.frags.covered(px) {
                continue;
            }
            let f = self.faces[self.frags.face[px]];
            let b = self.frags.bary[px];
            let gp = &g[px * oc..px * oc + c];
            if needs[1] {
                for k in 0..3 {
                    for ch in 0..c {
                        ga[f[k] * c + ch] += b[k] * gp[ch];
                    }
                }
            }
            if needs[0] && s.bary_grad {
                // dL/db_k with b_0 eliminated
                let mut gb = [0.0; 3];
                for k in 1..3 {
                    gb[k] = (0..c).map(|ch| gp[ch] * (ad[f[k] * c + ch] - ad[f[0] * c + ch])).sum();
                }
                let p = [xy(sd, f[0]), xy(sd, f[1]), xy(sd, f[2])];
                let q = [(px % s.width) as f64 + 0.5, (px / s.width) as f64 + 0.5];
                let (_, area) = edge_functions(p, q);
                // b_k = e_k / A, so db_k = (de_k - b_k dA) / A. Accumulate
                // the cotangents of e_k and A, then map to vertex positions.
                let ge = [gb[0] / area, gb[1] / area, gb[2] / area];
                let g_area = -(gb[0] * b[0] + gb[1] * b[1] + gb[2] * b[2]) / area;
                let mut gv = [[0.0; 2]; 3];
                // e_k = cross2(p_{k+1} - q, p_{k+2} - q)
                for k in 0..3 {
                    let (i1, i2) = ((k + 1) % 3, (k + 2) % 3);
                    let u = sub2(p[i1], q);
                    let v = sub2(p[i2], q);
                    gv[i1][0] += ge[k] * v[1];
                    gv[i1][1] -= ge[k] * v[0];
                    gv[i2][0] -= ge[k] * u[1];
                    gv[i2][1] += ge[k] * u[0];
                }
                // A = cross2(p1 - p0, p2 - p0)
                let u = sub2(p[1], p[0]);
                let v = sub2(p[2], p[0]);
                let d1 = [g_area * v[1], -g_area * v[0]];
                let d2 = [-g_area * u[1], g_area * u[0]];
                gv[1][0] += d1[0];
                gv[1][1] += d1[1];
                gv[2][0] += d2[0];
                gv[2][1] += d2[1];
                gv[0][0] -= d1[0] + d2[0];
                gv[0][1] -= d1[1] + d2[1];
                for k in 0..3 {
                    gs[f[k] * 3] += gv[k][0];
                    gs[f[k] * 3 + 1] += gv[k][1];
                }
            }
        }
        if let (Some(st), true) = (&self.stats, needs[0]) {
            let w = 0.5 * s.width as f64;
            for_each_soft(sd, self.faces, s, |px, fi, term| {
                let gm = g[px * oc + c];
                if gm == 0.0 || st.zeros[px] > 0 {
                    return;
                }
                let prob = math::sigmoid(term.x);
                let q = 1.0 - prob;
                // d mask / d p_f = prod_{g != f} (1 - p_g)
                let others = st.prod_nonzero[px] / q;
                let dd2 = gm * others * prob * q * term.sign / s.sigma;
                let f = self.faces[fi];
                let (a, b) = (f[term.edge], f[(term.edge + 1) % 3]);
                // d(d2)/da = -2 r (1 - t), d(d2)/db = -2 r t in normalized
                // units; 1/w converts to pixel coordinates.
                let ka = -2.0 * (1.0 - term.t) * dd2 / w;
                let kb = -2.0 * term.t * dd2 / w;
                gs[a * 3] += ka * term.r[0];
                gs[a * 3 + 1] += ka * term.r[1];
                gs[b * 3] += kb * term.r[0];
                gs[b * 3 + 1] += kb * term.r[1];
            });
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(screen.shape(), gs)).transpose()?,
            needs[1].then(|| Tensor::new(attrs.shape(), ga)).transpose()?,
        ])
    }
}
