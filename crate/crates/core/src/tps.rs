//! Thin-plate-spline mapping from the projector's patch plane onto the
//! captured surface image, plus its reverse and the pull-warp operators built
//! from it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::SparseLinear;
use crate::error::{Error, Result};
use crate::image::{bilinear_taps, ImageBuffer, Point2};

const COINCIDENT_EPS: f64 = 1e-9;

/// Radial basis `r² ln r`, with the limit value 0 at `r = 0`.
pub fn tps_kernel(r: f64) -> Result<f64> {
    if r < 0.0 || r.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "TPS kernel distance must be nonnegative, got {r}"
        )));
    }
    Ok(kernel(r))
}

#[inline]
fn kernel(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Corresponding projector-plane / captured-image point pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointSet {
    source: Vec<Point2>,
    target: Vec<Point2>,
}

impl ControlPointSet {
    pub fn new(source: Vec<Point2>, target: Vec<Point2>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::DegenerateControls(format!(
                "{} source points but {} targets",
                source.len(),
                target.len()
            )));
        }
        if source.len() < 4 {
            return Err(Error::DegenerateControls(format!(
                "need at least 4 pairs, got {}",
                source.len()
            )));
        }
        if let Some(p) = source.iter().chain(&target).find(|p| !p.is_finite()) {
            return Err(Error::DegenerateControls(format!(
                "non-finite coordinate ({}, {})",
                p.x, p.y
            )));
        }
        check_point_layout(&source)?;
        Ok(Self { source, target })
    }

    pub fn source(&self) -> &[Point2] {
        &self.source
    }

    pub fn target(&self) -> &[Point2] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn swapped(&self) -> Result<Self> {
        Self::new(self.target.clone(), self.source.clone())
    }

    /// Parses the `sx sy tx ty` per-line format; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut source = Vec::new();
        let mut target = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected 4 values `sx sy tx ty`, found {}", fields.len()),
                ));
            }
            let mut vals = [0.0; 4];
            for (v, f) in vals.iter_mut().zip(&fields) {
                *v = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(origin, i + 1, format!("bad number `{f}`")))?;
            }
            source.push(Point2::new(vals[0], vals[1]));
            target.push(Point2::new(vals[2], vals[3]));
        }
        Self::new(source, target)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# sx sy tx ty\n");
        for (s, t) in self.source.iter().zip(&self.target) {
            writeln!(out, "{} {} {} {}", s.x, s.y, t.x, t.y).unwrap();
        }
        out
    }
}

fn check_point_layout(points: &[Point2]) -> Result<()> {
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].distance(&points[j]) <= COINCIDENT_EPS {
                return Err(Error::DegenerateControls(format!(
                    "points {i} and {j} coincide at ({}, {})",
                    points[i].x, points[i].y
                )));
            }
        }
    }
    let p0 = points[0];
    let far = points
        .iter()
        .max_by(|a, b| a.distance(&p0).total_cmp(&b.distance(&p0)))
        .copied()
        .unwrap();
    let span = far.distance(&p0);
    let (dx, dy) = (far.x - p0.x, far.y - p0.y);
    let spread = points
        .iter()
        .map(|p| ((p.x - p0.x) * dy - (p.y - p0.y) * dx).abs() / span)
        .fold(0.0, f64::max);
    if spread <= 1e-9 * span.max(1.0) {
        return Err(Error::DegenerateControls("all points are collinear".into()));
    }
    Ok(())
}

/// A fitted thin-plate spline: affine part plus radial weights per output
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsModel {
    /// `[a0, a1, a2]` per output coordinate, for `a0 + a1·x + a2·y`.
    pub affine: [[f64; 3]; 2],
    /// Radial weights per output coordinate, one per control anchor.
    pub weights: [Vec<f64>; 2],
    pub controls: Vec<Point2>,
    pub regularization: f64,
    reverse: Option<Box<TpsModel>>,
}

/// Fits the forward spline and, when the targets allow it, the reverse one.
pub fn fit_tps(cps: &ControlPointSet, regularization: f64) -> Result<TpsModel> {
    let mut forward = fit_one_way(&cps.source, &cps.target, regularization)?;
    forward.reverse = cps
        .swapped()
        .ok()
        .and_then(|rev| fit_one_way(&rev.source, &rev.target, regularization).ok())
        .map(Box::new);
    Ok(forward)
}

fn fit_one_way(source: &[Point2], target: &[Point2], regularization: f64) -> Result<TpsModel> {
    if !(regularization >= 0.0) || !regularization.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "regularization must be a nonnegative real, got {regularization}"
        )));
    }
    let n = source.len();
    let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = kernel(source[i].distance(&source[j]));
        }
        l[(i, i)] += regularization;
        let row = [1.0, source[i].x, source[i].y];
        for (k, v) in row.iter().enumerate() {
            l[(i, n + k)] = *v;
            l[(n + k, i)] = *v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for (i, t) in target.iter().enumerate() {
        rhs[(i, 0)] = t.x;
        rhs[(i, 1)] = t.y;
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("LU factorization found a zero pivot".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("solution is not finite".into()));
    }
    let column = |c: usize| -> DVector<f64> { sol.column(c).into_owned() };
    let (sx, sy) = (column(0), column(1));
    Ok(TpsModel {
        affine: [
            [sx[n], sx[n + 1], sx[n + 2]],
            [sy[n], sy[n + 1], sy[n + 2]],
        ],
        weights: [sx.rows(0, n).iter().copied().collect(), sy.rows(0, n).iter().copied().collect()],
        controls: source.to_vec(),
        regularization,
        reverse: None,
    })
}

impl TpsModel {
    /// The model mapping target-image points back to the projector plane.
    pub fn reverse(&self) -> Option<&TpsModel> {
        self.reverse.as_deref()
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        apply_tps(self, p)
    }

    /// Largest `|w_i|` across both output coordinates.
    pub fn max_abs_weight(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|w| w.abs())
            .fold(0.0, f64::max)
    }

    /// `[Σw, Σw·x, Σw·y]` per output coordinate; zero for a valid solve.
    pub fn side_conditions(&self) -> [[f64; 3]; 2] {
        let mut out = [[0.0; 3]; 2];
        for (k, ws) in self.weights.iter().enumerate() {
            for (w, c) in ws.iter().zip(&self.controls) {
                out[k][0] += w;
                out[k][1] += w * c.x;
                out[k][2] += w * c.y;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# projforge tps model\n");
        write_block(&mut out, "forward", self);
        if let Some(rev) = &self.reverse {
            write_block(&mut out, "reverse", rev);
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();
        let mut forward = read_block(&mut lines, "forward", origin)?;
        if lines.peek().is_some() {
            forward.reverse = Some(Box::new(read_block(&mut lines, "reverse", origin)?));
        }
        Ok(forward)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn write_block(out: &mut String, name: &str, m: &TpsModel) {
    writeln!(out, "{name} {} {}", m.controls.len(), m.regularization).unwrap();
    for a in &m.affine {
        writeln!(out, "affine {} {} {}", a[0], a[1], a[2]).unwrap();
    }
    for (i, c) in m.controls.iter().enumerate() {
        writeln!(out, "anchor {} {} {} {}", c.x, c.y, m.weights[0][i], m.weights[1][i]).unwrap();
    }
}

fn read_block<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    name: &str,
    origin: &Path,
) -> Result<TpsModel> {
    let mut next = |expect: &str, count: usize| -> Result<(usize, Vec<f64>)> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 0, format!("unexpected end of file, wanted `{expect}`")))?;
        let mut fields = line.split_whitespace();
        if fields.next() != Some(expect) {
            return Err(Error::parse(origin, no, format!("expected `{expect}`")));
        }
        let vals = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(origin, no, format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != count {
            return Err(Error::parse(origin, no, format!("expected {count} values")));
        }
        Ok((no, vals))
    };
    let (_, head) = next(name, 2)?;
    let n = head[0] as usize;
    let mut affine = [[0.0; 3]; 2];
    for a in &mut affine {
        let (_, v) = next("affine", 3)?;
        a.copy_from_slice(&v);
    }
    let mut controls = Vec::with_capacity(n);
    let mut weights = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for _ in 0..n {
        let (_, v) = next("anchor", 4)?;
        controls.push(Point2::new(v[0], v[1]));
        weights[0].push(v[2]);
        weights[1].push(v[3]);
    }
    Ok(TpsModel {
        affine,
        weights,
        controls,
        regularization: head[1],
        reverse: None,
    })
}

/// `f(x, y) + Σ w_i φ(‖p − c_i‖)` per output coordinate.
pub fn apply_tps(model: &TpsModel, p: Point2) -> Point2 {
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let a = model.affine[k];
        *o = a[0] + a[1] * p.x + a[2] * p.y;
    }
    for (i, c) in model.controls.iter().enumerate() {
        let phi = kernel(p.distance(c));
        out[0] += model.weights[0][i] * phi;
        out[1] += model.weights[1][i] * phi;
    }
    Point2::new(out[0], out[1])
}

/// Fixed linear map from source-image pixels to warped-image pixels: four
/// bilinear taps per output pixel.
#[derive(Debug, Clone)]
pub struct WarpOperator {
    pub out_height: usize,
    pub out_width: usize,
    pub src_height: usize,
    pub src_width: usize,
    taps: Vec<[(usize, f64); 4]>,
    linear: Arc<SparseLinear>,
}

impl WarpOperator {
    /// Builds the pull map: `sample_at(q)` gives the source position for each
    /// output pixel centre `q`.
    pub fn from_sampler(
        src_height: usize,
        src_width: usize,
        out_height: usize,
        out_width: usize,
        sample_at: impl Fn(Point2) -> Point2,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_height * out_width);
        for y in 0..out_height {
            for x in 0..out_width {
                let p = sample_at(Point2::new(x as f64, y as f64));
                taps.push(bilinear_taps(src_height, src_width, p));
            }
        }
        let linear = Arc::new(SparseLinear::from_rows(
            src_height * src_width,
            taps.iter().map(|t| t.to_vec()).collect(),
        ));
        Self {
            out_height,
            out_width,
            src_height,
            src_width,
            taps,
            linear,
        }
    }

    pub fn taps(&self, row: usize) -> [(usize, f64); 4] {
        self.taps[row]
    }

    pub fn linear(&self) -> Arc<SparseLinear> {
        Arc::clone(&self.linear)
    }

    pub fn apply(&self, src: &ImageBuffer) -> Result<ImageBuffer> {
        if src.dims() != (self.src_height, self.src_width) {
            return Err(Error::Dimension(format!(
                "warp expects {}x{} source, got {}x{}",
                self.src_height,
                self.src_width,
                src.height(),
                src.width()
            )));
        }
        let data = self.linear.apply(src.data(), 3);
        ImageBuffer::from_clamped(self.out_height, self.out_width, data)
    }

    /// Debug dump: per row, little-endian `u32` row, four `u32` columns,
    /// four `f64` weights.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.taps.len() * 52);
        for (row, taps) in self.taps.iter().enumerate() {
            buf.extend_from_slice(&(row as u32).to_le_bytes());
            for (col, _) in taps {
                buf.extend_from_slice(&(*col as u32).to_le_bytes());
            }
            for (_, w) in taps {
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Builds the pull-warp operator for `model` into an `out_height × out_width`
/// target image.
pub fn warp_operator(
    model: &TpsModel,
    src_height: usize,
    src_width: usize,
    out_height: usize,
    out_width: usize,
) -> Result<WarpOperator> {
    let reverse = model.reverse().ok_or(Error::ReverseUnavailable)?;
    Ok(WarpOperator::from_sampler(
        src_height,
        src_width,
        out_height,
        out_width,
        |q| apply_tps(reverse, q),
    ))
}

pub fn warp_image(
    model: &TpsModel,
    src: &ImageBuffer,
    out_height: usize,
    out_width: usize,
) -> Result<(ImageBuffer, WarpOperator)> {
    let op = warp_operator(model, src.height(), src.width(), out_height, out_width)?;
    let out = op.apply(src)?;
    Ok((out, op))
}

/// Warps a patch-shape image (1 inside the footprint) into the target image;
/// the result is the blend mask.
pub fn warp_mask(
    model: &TpsModel,
    patch_shape: &ImageBuffer,
    out_height: usize,
    out_width: usize,
) -> Result<ImageBuffer> {
    let data = patch_shape.data();
    if data.chunks_exact(3).any(|p| p[0] != p[1] || p[1] != p[2]) {
        return Err(Error::InvalidImage(
            "patch shape channels must be equal".into(),
        ));
    }
    warp_image(model, patch_shape, out_height, out_width).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::sample_bilinear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Vec<Point2> {
        vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(0.0, 10.0),
            Point2::new(10.0, 10.0),
        ]
    }

    #[test]
    fn kernel_values() {
        assert_eq!(tps_kernel(0.0).unwrap(), 0.0);
        assert_eq!(tps_kernel(1.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((tps_kernel(e).unwrap() - e * e).abs() < 1e-12);
        assert!((e * e - 7.389056).abs() < 1e-6);
        assert!(tps_kernel(-1.0).is_err());
    }

    #[test]
    fn rejects_degenerate_controls() {
        let line: Vec<Point2> = (0..5).map(|i| Point2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(
            ControlPointSet::new(line.clone(), line),
            Err(Error::DegenerateControls(_))
        ));
        let mut dup = square();
        dup[3] = dup[0];
        assert!(ControlPointSet::new(dup, square()).is_err());
        assert!(ControlPointSet::new(square()[..3].to_vec(), square()[..3].to_vec()).is_err());
        assert!(ControlPointSet::new(square(), square()[..3].to_vec()).is_err());
    }

    #[test]
    fn identity_fit() {
        let cps = ControlPointSet::new(square(), square()).unwrap();
        let m = fit_tps(&cps, 0.0).unwrap();
        assert!(m.max_abs_weight() < 1e-9);
        assert!((m.affine[0][1] - 1.0).abs() < 1e-9 && m.affine[0][2].abs() < 1e-9);
        assert!((m.affine[1][2] - 1.0).abs() < 1e-9 && m.affine[1][1].abs() < 1e-9);
        let p = Point2::new(3.7, -2.2);
        let q = apply_tps(&m, p);
        assert!((q.x - p.x).abs() < 1e-9 && (q.y - p.y).abs() < 1e-9);
    }

    #[test]
    fn affine_targets_have_zero_weights() {
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let map = |p: &Point2| Point2::new(c * p.x - s * p.y + 4.0, s * p.x + c * p.y - 1.5);
        let src = vec![
            Point2::new(0.0, 0.0),
            Point2::new(8.0, 1.0),
            Point2::new(2.0, 9.0),
            Point2::new(7.0, 7.0),
            Point2::new(4.0, 3.0),
        ];
        let dst = src.iter().map(map).collect();
        let m = fit_tps(&ControlPointSet::new(src, dst).unwrap(), 0.0).unwrap();
        assert!(m.max_abs_weight() < 1e-8);
        let want = [[4.0, c, -s], [-1.5, s, c]];
        for k in 0..2 {
            for j in 0..3 {
                assert!((m.affine[k][j] - want[k][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn displaced_corner_interpolates() {
        let mut dst = square();
        dst[3].x += 5.0;
        let m = fit_tps(&ControlPointSet::new(square(), dst.clone()).unwrap(), 0.0).unwrap();
        let q = apply_tps(&m, square()[3]);
        assert!((q.x - 15.0).abs() < 1e-6 && (q.y - 10.0).abs() < 1e-6);

        // independent summation at the centroid
        let p = Point2::new(5.0, 5.0);
        let mut want = [0.0; 2];
        for k in 0..2 {
            want[k] = m.affine[k][0] + m.affine[k][1] * p.x + m.affine[k][2] * p.y;
            for (i, c) in square().iter().enumerate() {
                let r = ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt();
                want[k] += m.weights[k][i] * r * r * r.ln();
            }
        }
        let got = apply_tps(&m, p);
        assert!((got.x - want[0]).abs() < 1e-10 && (got.y - want[1]).abs() < 1e-10);

        let sides = m.side_conditions();
        assert!(sides.iter().flatten().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn regularization_smooths() {
        let mut dst = square();
        dst[3].x += 5.0;
        let cps = ControlPointSet::new(square(), dst).unwrap();
        let exact = fit_tps(&cps, 0.0).unwrap();
        let smooth = fit_tps(&cps, 10.0).unwrap();
        assert!(smooth.max_abs_weight() < exact.max_abs_weight());
        assert!(fit_tps(&cps, -1.0).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = ImageBuffer::from_fn(6, 7, |_, _| [rng.random(), rng.random(), rng.random()]);
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(6.0, 0.0),
            Point2::new(0.0, 5.0),
            Point2::new(6.0, 5.0),
            Point2::new(3.0, 2.0),
        ];
        let m = fit_tps(&ControlPointSet::new(pts.clone(), pts).unwrap(), 0.0).unwrap();
        let (out, op) = warp_image(&m, &src, 6, 7).unwrap();
        assert_eq!(out, src);
        for r in 0..42 {
            assert_eq!(op.linear().row_sum(r), 1.0);
        }
        // padded output: the extra column is zero fill
        let (padded, _) = warp_image(&m, &src, 6, 8).unwrap();
        for y in 0..6 {
            assert_eq!(padded.pixel(7, y), [0.0; 3]);
            assert_eq!(padded.pixel(3, y), src.pixel(3, y));
        }
    }

    #[test]
    fn translation_moves_hot_pixel() {
        let dst: Vec<Point2> = square().iter().map(|p| Point2::new(p.x + 3.0, p.y)).collect();
        let m = fit_tps(&ControlPointSet::new(square(), dst).unwrap(), 0.0).unwrap();
        let src = ImageBuffer::filled(8, 8, 0.0).with_pixel(2, 4, [1.0; 3]).unwrap();
        let (out, _) = warp_image(&m, &src, 8, 8).unwrap();
        assert_eq!(out.pixel(5, 4), [1.0; 3]);
        let total: f64 = out.data().iter().sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn warp_matches_brute_force() {
        let src_pts = square();
        let dst = vec![
            Point2::new(1.0, 2.0),
            Point2::new(12.0, 0.5),
            Point2::new(0.0, 11.0),
            Point2::new(13.0, 12.5),
        ];
        let mut s = src_pts.clone();
        s.push(Point2::new(5.0, 5.0));
        let mut d = dst;
        d.push(Point2::new(6.5, 6.0));
        let m = fit_tps(&ControlPointSet::new(s, d).unwrap(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = ImageBuffer::from_fn(11, 11, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (out, _) = warp_image(&m, &src, 14, 15).unwrap();
        let rev = m.reverse().unwrap();
        for y in 0..14 {
            for x in 0..15 {
                let p = apply_tps(rev, Point2::new(x as f64, y as f64));
                let want = sample_bilinear(&src, p);
                let got = out.pixel(x, y);
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn masks_identity_and_empty() {
        let pts = square();
        let m = fit_tps(&ControlPointSet::new(pts.clone(), pts).unwrap(), 0.0).unwrap();
        let ones = ImageBuffer::filled(4, 6, 1.0);
        assert_eq!(warp_mask(&m, &ones, 4, 6).unwrap(), ones);
        let zeros = ImageBuffer::filled(4, 6, 0.0);
        assert_eq!(warp_mask(&m, &zeros, 4, 6).unwrap(), zeros);
        let colored = ImageBuffer::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(warp_mask(&m, &colored, 1, 1).is_err());
    }

    #[test]
    fn collinear_targets_leave_no_reverse() {
        let dst: Vec<Point2> = (0..4).map(|i| Point2::new(i as f64, i as f64)).collect();
        let m = fit_tps(&ControlPointSet::new(square(), dst).unwrap(), 0.0).unwrap();
        assert!(m.reverse().is_none());
        let img = ImageBuffer::filled(3, 3, 0.5);
        assert!(matches!(warp_image(&m, &img, 3, 3), Err(Error::ReverseUnavailable)));
    }

    #[test]
    fn parse_and_text_round_trip() {
        let text = "# header\n0 0 1 1\n10 0 11 1 # trailing\n\n0 10 1 11\n10 10 11 11\n";
        let cps = ControlPointSet::parse(text, Path::new("c.txt")).unwrap();
        assert_eq!(cps.len(), 4);
        let bad = "0 0 1 1\n10 0 11\n";
        match ControlPointSet::parse(bad, Path::new("c.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let m = fit_tps(&cps, 0.0).unwrap();
        let back = TpsModel::from_text(&m.to_text(), Path::new("m.txt")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn dump_has_fixed_record_size() {
        let pts = square();
        let m = fit_tps(&ControlPointSet::new(pts.clone(), pts).unwrap(), 0.0).unwrap();
        let (_, op) = warp_image(&m, &ImageBuffer::filled(3, 4, 0.2), 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("warp.bin");
        op.write_dump(&path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 12 * 52);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn warp_is_linear(seed in 0u64..300, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src: Vec<Point2> = square();
                let dst: Vec<Point2> = src.iter().map(|p| Point2::new(p.x + rng.random_range(-1.5..1.5), p.y + rng.random_range(-1.5..1.5))).collect();
                let m = fit_tps(&ControlPointSet::new(src, dst).unwrap(), 0.0).unwrap();
                let op = warp_operator(&m, 9, 9, 10, 10).unwrap();
                let i1: Vec<f64> = (0..243).map(|_| rng.random()).collect();
                let i2: Vec<f64> = (0..243).map(|_| rng.random()).collect();
                let mix: Vec<f64> = i1.iter().zip(&i2).map(|(p, q)| a * p + b * q).collect();
                let lin = op.linear();
                let lhs = lin.apply(&mix, 3);
                let w1 = lin.apply(&i1, 3);
                let w2 = lin.apply(&i2, 3);
                for k in 0..lhs.len() {
                    prop_assert!((lhs[k] - (a * w1[k] + b * w2[k])).abs() < 1e-10);
                }
                for r in 0..100 {
                    let s = lin.row_sum(r);
                    prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn interpolation_exactness(seed in 0u64..300) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let src: Vec<Point2> = (0..9).map(|i| Point2::new((i % 3) as f64 * 10.0 + rng.random_range(-2.0..2.0), (i / 3) as f64 * 10.0 + rng.random_range(-2.0..2.0))).collect();
                let dst: Vec<Point2> = src.iter().map(|p| Point2::new(p.x + rng.random_range(-3.0..3.0), p.y + rng.random_range(-3.0..3.0))).collect();
                let m = fit_tps(&ControlPointSet::new(src.clone(), dst.clone()).unwrap(), 0.0).unwrap();
                for (s, t) in src.iter().zip(&dst) {
                    let q = apply_tps(&m, *s);
                    prop_assert!(q.distance(t) < 1e-6);
                }
                for side in m.side_conditions().iter().flatten() {
                    prop_assert!(side.abs() < 1e-8);
                }
            }
        }
    }
}
