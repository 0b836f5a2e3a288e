//! Scene assembly: warp the patch onto the object, color-map the lit
//! region, then blend the object over a background.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, SparseLinear, Tape, Var};
use crate::color::ColorModel;
use crate::error::{Error, Result};
use crate::image::{bilinear_taps, ImageBuffer, Point2};
use crate::tps::{warp_operator, TpsModel, WarpOperator};

/// A benign object image, its footprint, a background, and where the
/// object's top-left corner sits in the background (`x`, `y`).
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub object_img: ImageBuffer,
    pub object_mask: ImageBuffer,
    pub background: ImageBuffer,
    pub placement: (usize, usize),
}

impl SceneSpec {
    pub fn new(
        object_img: ImageBuffer,
        object_mask: ImageBuffer,
        background: ImageBuffer,
        placement: (usize, usize),
    ) -> Result<Self> {
        let scene = Self {
            object_img,
            object_mask,
            background,
            placement,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.object_img.same_dims(&self.object_mask) {
            return Err(Error::Dimension(format!(
                "object {:?} and mask {:?} differ",
                self.object_img.dims(),
                self.object_mask.dims()
            )));
        }
        check_placement(self.object_img.dims(), self.background.dims(), self.placement)
    }
}

fn check_placement(object: (usize, usize), background: (usize, usize), at: (usize, usize)) -> Result<()> {
    let (oh, ow) = object;
    let (bh, bw) = background;
    if at.0 + ow > bw || at.1 + oh > bh {
        return Err(Error::Placement(format!(
            "{ow}x{oh} object at ({}, {}) does not fit a {bw}x{bh} background",
            at.0, at.1
        )));
    }
    Ok(())
}

/// Geometric and color models for one object view, plus the patch footprint
/// on the projector plane.
#[derive(Debug, Clone)]
pub struct ProjectionOperands {
    pub tps: TpsModel,
    pub color: ColorModel,
    pub patch_shape: ImageBuffer,
}

/// Everything about projecting onto a fixed object image that does not
/// depend on the patch contents.
#[derive(Debug, Clone)]
pub struct ProjectionPlan {
    color: ColorModel,
    warp: WarpOperator,
    mask: ImageBuffer,
    gate: Arc<Vec<f64>>,
    surface: Vec<f64>,
    keep: Vec<f64>,
    patch_dims: (usize, usize),
}

impl ProjectionPlan {
    pub fn new(ops: &ProjectionOperands, x: &ImageBuffer) -> Result<Self> {
        let (h, w) = x.dims();
        let (ph, pw) = ops.patch_shape.dims();
        let shape = ops.patch_shape.data();
        if shape.chunks_exact(3).any(|p| p[0] != p[1] || p[1] != p[2]) {
            return Err(Error::InvalidImage("patch shape channels must be equal".into()));
        }
        let warp = warp_operator(&ops.tps, ph, pw, h, w)?;
        let mask = warp.apply(&ops.patch_shape)?;
        let m = mask.data();
        let gate: Vec<f64> = m.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let surface = m.iter().zip(x.data()).map(|(m, x)| m * x).collect();
        let keep = m.iter().zip(x.data()).map(|(m, x)| (1.0 - m) * x).collect();
        Ok(Self {
            color: ops.color.clone(),
            warp,
            mask,
            gate: Arc::new(gate),
            surface,
            keep,
            patch_dims: (ph, pw),
        })
    }

    /// The warped footprint M in object coordinates.
    pub fn mask(&self) -> &ImageBuffer {
        &self.mask
    }

    pub fn warp(&self) -> &WarpOperator {
        &self.warp
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        self.patch_dims
    }

    pub fn object_dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn footprint_is_empty(&self) -> bool {
        self.gate.iter().all(|&g| g == 0.0)
    }

    /// Records the attacked object for a patch `delta` (1×ph×pw×3) already on
    /// the tape. The final clamp only bites where M is fractional.
    pub fn record(&self, tape: &mut Tape, delta: Var) -> Var {
        let (h, w) = self.mask.dims();
        let warped = tape.sparse(delta, self.warp.linear(), h, w);
        let surface = tape.constant(Shape::image(h, w, 3), self.surface.clone());
        let lit = self.color.map_tape(tape, surface, warped, Arc::clone(&self.gate));
        let blended = tape.add_const(lit, &self.keep);
        tape.clamp(blended, 0.0, 1.0)
    }

    pub fn render(&self, delta: &ImageBuffer) -> Result<ImageBuffer> {
        if delta.dims() != self.patch_dims {
            return Err(patch_mismatch(delta.dims(), self.patch_dims));
        }
        let mut tape = Tape::new();
        let (ph, pw) = self.patch_dims;
        let d = tape.constant(Shape::image(ph, pw, 3), delta.data().to_vec());
        let out = self.record(&mut tape, d);
        let (h, w) = self.mask.dims();
        ImageBuffer::from_clamped(h, w, tape.value(out).to_vec())
    }
}

fn patch_mismatch(got: (usize, usize), want: (usize, usize)) -> Error {
    Error::Dimension(format!(
        "patch is {}x{} but the patch shape is {}x{}",
        got.1, got.0, want.1, want.0
    ))
}

/// Tape holding a projection, with handles to the patch input and the
/// attacked object.
#[derive(Debug)]
pub struct ProjectionTrace {
    pub tape: Tape,
    pub delta: Var,
    pub output: Var,
}

/// Projects `delta` onto `x`: `(1-M)·x + C(M·x, warp(delta))` where `C` is
/// gated to the footprint.
pub fn project_patch(
    ops: &ProjectionOperands,
    x: &ImageBuffer,
    delta: &ImageBuffer,
) -> Result<(ImageBuffer, ProjectionTrace)> {
    if delta.dims() != ops.patch_shape.dims() {
        return Err(patch_mismatch(delta.dims(), ops.patch_shape.dims()));
    }
    let plan = ProjectionPlan::new(ops, x)?;
    let mut tape = Tape::new();
    let (ph, pw) = delta.dims();
    let d = tape.input(Shape::image(ph, pw, 3), delta.data().to_vec());
    let out = plan.record(&mut tape, d);
    let (h, w) = x.dims();
    let img = ImageBuffer::from_clamped(h, w, tape.value(out).to_vec())?;
    Ok((
        img,
        ProjectionTrace {
            tape,
            delta: d,
            output: out,
        },
    ))
}

/// A random-looking change applied to the patched object before blending:
/// scale and rotation about the object centre, a shift in pixels, a
/// brightness offset, and seeded Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTransform {
    pub scale: f64,
    pub rotation_deg: f64,
    pub shift: [f64; 2],
    pub brightness: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for ObjectTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ObjectTransform {
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation_deg: 0.0,
            shift: [0.0, 0.0],
            brightness: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation_deg == 0.0 && self.shift == [0.0, 0.0]
    }

    pub fn is_photometric_identity(&self) -> bool {
        self.brightness == 0.0 && self.noise_sigma == 0.0
    }
}

/// Fixed placement of a (transformed) object into one background.
#[derive(Debug, Clone)]
pub struct ScenePlan {
    placement: Arc<SparseLinear>,
    alpha: Arc<Vec<f64>>,
    base: Vec<f64>,
    photometric: Option<Vec<f64>>,
    dims: (usize, usize),
    object_dims: (usize, usize),
}

impl ScenePlan {
    pub fn new(scene: &SceneSpec, t: &ObjectTransform) -> Result<Self> {
        scene.validate()?;
        if !(t.scale.is_finite() && t.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("transform scale {} must be positive", t.scale)));
        }
        if !(t.noise_sigma.is_finite() && t.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise sigma {} must be nonnegative", t.noise_sigma)));
        }
        let (oh, ow) = scene.object_img.dims();
        let (bh, bw) = scene.background.dims();
        let (px, py) = (scene.placement.0 as f64, scene.placement.1 as f64);
        let mut rows = Vec::with_capacity(bh * bw);
        if t.is_geometric_identity() {
            for y in 0..bh {
                for x in 0..bw {
                    let inside = x >= scene.placement.0
                        && x < scene.placement.0 + ow
                        && y >= scene.placement.1
                        && y < scene.placement.1 + oh;
                    rows.push(if inside {
                        vec![((y - scene.placement.1) * ow + x - scene.placement.0, 1.0)]
                    } else {
                        Vec::new()
                    });
                }
            }
        } else {
            let (cx, cy) = ((ow as f64 - 1.0) / 2.0, (oh as f64 - 1.0) / 2.0);
            let (s, c) = t.rotation_deg.to_radians().sin_cos();
            for y in 0..bh {
                for x in 0..bw {
                    let dx = x as f64 - px - cx - t.shift[0];
                    let dy = y as f64 - py - cy - t.shift[1];
                    let src = Point2::new((c * dx + s * dy) / t.scale + cx, (-s * dx + c * dy) / t.scale + cy);
                    rows.push(
                        bilinear_taps(oh, ow, src)
                            .into_iter()
                            .filter(|&(_, w)| w != 0.0)
                            .collect(),
                    );
                }
            }
        }
        let placement = SparseLinear::from_rows(oh * ow, rows);
        let alpha = placement.apply(scene.object_mask.data(), 3);
        let base = alpha
            .iter()
            .zip(scene.background.data())
            .map(|(a, b)| (1.0 - a) * b)
            .collect();
        let photometric = if t.is_photometric_identity() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
            let noise = Normal::new(0.0, t.noise_sigma.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            Some(
                (0..bh * bw * 3)
                    .map(|_| {
                        let n = if t.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        t.brightness + n
                    })
                    .collect(),
            )
        };
        Ok(Self {
            placement: Arc::new(placement),
            alpha: Arc::new(alpha),
            base,
            photometric,
            dims: (bh, bw),
            object_dims: (oh, ow),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// Placed object opacity per background pixel and channel.
    pub fn coverage(&self) -> &[f64] {
        &self.alpha
    }

    /// Records the composed scene for an object image (1×oh×ow×3) on the tape.
    pub fn record(&self, tape: &mut Tape, object: Var) -> Var {
        let (bh, bw) = self.dims;
        let mut t = tape.sparse(object, Arc::clone(&self.placement), bh, bw);
        if let Some(ph) = &self.photometric {
            t = tape.add_const(t, ph);
            t = tape.clamp(t, 0.0, 1.0);
        }
        let t = tape.mul_const(t, Arc::clone(&self.alpha));
        tape.add_const(t, &self.base)
    }

    pub fn render(&self, object: &ImageBuffer) -> Result<ImageBuffer> {
        if object.dims() != self.object_dims {
            return Err(Error::Dimension(format!(
                "object is {:?}, scene expects {:?}",
                object.dims(),
                self.object_dims
            )));
        }
        let mut tape = Tape::new();
        let (oh, ow) = self.object_dims;
        let o = tape.constant(Shape::image(oh, ow, 3), object.data().to_vec());
        let out = self.record(&mut tape, o);
        let (bh, bw) = self.dims;
        ImageBuffer::from_clamped(bh, bw, tape.value(out).to_vec())
    }
}

/// Alpha-blends `attacked_object` over the background at the scene placement.
pub fn compose_scene(scene: &SceneSpec, attacked_object: &ImageBuffer) -> Result<ImageBuffer> {
    ScenePlan::new(scene, &ObjectTransform::identity())?.render(attacked_object)
}
