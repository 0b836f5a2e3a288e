//! Procedural stand-ins for captured data: a side-view toy car drawn from a
//! few viewing angles, street-like backgrounds, distractor objects, and the
//! checkerboard control lattice for each view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::Rgb;
use crate::compositor::{ObjectTransform, ScenePlan, SceneSpec};
use crate::detector::{Annotation, LabeledScene};
use crate::error::Result;
use crate::image::{quantize, ImageBuffer, Point2};
use crate::tps::ControlPointSet;

pub const SCENE_SIZE: usize = 48;
pub const OBJECT_HEIGHT: usize = 24;
pub const OBJECT_WIDTH: usize = 36;
/// Projector image side length.
pub const PATCH_SIZE: usize = 30;
/// Top-left corner of the object in every scene.
pub const PLACEMENT: (usize, usize) = (6, 12);
pub const VIEW_ANGLES: [f64; 5] = [-20.0, -10.0, 0.0, 10.0, 20.0];
/// Body color of the attacked car.
pub const FIXTURE_BODY: Rgb = [0.72, 0.14, 0.12];
/// Side length of the checkerboard control lattice.
pub const LATTICE: usize = 5;

const PALETTE: [Rgb; 6] = [
    [0.72, 0.14, 0.12],
    [0.15, 0.25, 0.65],
    [0.85, 0.85, 0.82],
    [0.45, 0.47, 0.5],
    [0.2, 0.5, 0.25],
    [0.85, 0.7, 0.15],
];

/// Rounds every value to the nearest 8-bit level, as a saved file would.
pub fn quantized(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    let data = img.data().iter().map(|&v| quantize(v) as f64 / 255.0).collect();
    ImageBuffer::new(h, w, data).expect("quantized values are in range")
}

fn scale(c: Rgb, k: f64) -> Rgb {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Side view of a car facing right, turned by `angle_deg` (roughly ±25°).
/// Returns the image and its binary footprint.
pub fn render_car(body: Rgb, angle_deg: f64) -> (ImageBuffer, ImageBuffer) {
    let t = (angle_deg / 20.0).clamp(-1.5, 1.5);
    let mut mask = vec![0.0; OBJECT_HEIGHT * OBJECT_WIDTH * 3];
    let img = ImageBuffer::from_fn(OBJECT_HEIGHT, OBJECT_WIDTH, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let paint = car_pixel(body, t, px, py);
        if paint.is_some() {
            let i = (y * OBJECT_WIDTH + x) * 3;
            mask[i..i + 3].fill(1.0);
        }
        paint.unwrap_or([0.0; 3])
    });
    let mask = ImageBuffer::new(OBJECT_HEIGHT, OBJECT_WIDTH, mask).unwrap();
    (quantized(&img), mask)
}

fn car_pixel(body: Rgb, t: f64, px: f64, py: f64) -> Option<Rgb> {
    for cx in [9.5, 26.5] {
        let d = ((px - cx - 0.5 * t).powi(2) + (py - 19.5).powi(2)).sqrt();
        if d < 4.3 {
            return Some(if d < 1.8 { [0.6, 0.6, 0.62] } else { [0.07, 0.07, 0.08] });
        }
    }
    let face = 5.0 * t.abs();
    if (9.0..18.5).contains(&py) && (1.0..35.0).contains(&px) {
        let corner = !(2.5..=33.5).contains(&px) && !(10.0..=17.5).contains(&py);
        if corner {
            return None;
        }
        let shade = 1.05 - 0.25 * (py - 9.0) / 9.5;
        let mut c = scale(body, shade);
        if (16.5..17.5).contains(&py) {
            c = scale(body, 0.5);
        }
        if (18.0..18.8).contains(&px) && py < 16.5 {
            c = scale(body, 0.8);
        }
        if (t > 0.0 && px > 35.0 - face) || (t < 0.0 && px < 1.0 + face) {
            c = scale(c, 0.65);
        }
        if (10.5..12.5).contains(&py) {
            if px > 33.0 {
                c = [0.95, 0.92, 0.7];
            } else if px < 3.0 {
                c = [0.55, 0.05, 0.05];
            }
        }
        return Some(c);
    }
    if (3.0..9.0).contains(&py) {
        let k = (9.0 - py) / 6.0;
        let (left, right) = (8.0 + 4.5 * k + 1.5 * t, 28.0 - 3.5 * k + 1.5 * t);
        if px >= left && px < right {
            let glass = (4.0..8.6).contains(&py) && px >= left + 1.0 && px < right - 1.0;
            let pillar = (px - 18.0 - 1.5 * t).abs() < 0.6;
            return Some(if glass && !pillar { [0.25, 0.35, 0.45] } else { scale(body, 1.05) });
        }
    }
    None
}

/// Traffic cone, `14 × 10`.
pub fn render_cone() -> (ImageBuffer, ImageBuffer) {
    let (h, w) = (14, 10);
    let mut mask = vec![0.0; h * w * 3];
    let img = ImageBuffer::from_fn(h, w, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let half = if py > 12.0 { 5.0 } else { 0.8 + 3.4 * py / 12.0 };
        if (px - 5.0).abs() >= half {
            return [0.0; 3];
        }
        let i = (y * w + x) * 3;
        mask[i..i + 3].fill(1.0);
        if py > 12.0 {
            [0.15, 0.15, 0.15]
        } else if (5.0..7.5).contains(&py) {
            [0.95, 0.95, 0.95]
        } else {
            [0.95, 0.45, 0.1]
        }
    });
    (quantized(&img), ImageBuffer::new(h, w, mask).unwrap())
}

/// A random sign, box or bush: a plain ellipse or rectangle with optional
/// stripes.
pub fn render_clutter(rng: &mut impl Rng) -> (ImageBuffer, ImageBuffer) {
    let h = rng.random_range(8..18);
    let w = rng.random_range(6..16);
    let round = rng.random_bool(0.5);
    let base: Rgb = [rng.random(), rng.random(), rng.random()];
    let stripe: Rgb = [rng.random(), rng.random(), rng.random()];
    let period = rng.random_range(2..5);
    let striped = rng.random_bool(0.4);
    let mut mask = vec![0.0; h * w * 3];
    let img = ImageBuffer::from_fn(h, w, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / w as f64 - 0.5, (y as f64 + 0.5) / h as f64 - 0.5);
        if round && u * u + v * v > 0.25 {
            return [0.0; 3];
        }
        let i = (y * w + x) * 3;
        mask[i..i + 3].fill(1.0);
        if striped && (y / period) % 2 == 1 {
            stripe
        } else {
            base
        }
    });
    (quantized(&img), ImageBuffer::new(h, w, mask).unwrap())
}

/// Street-like backdrop: sky, buildings, road with a lane stripe, bushes.
pub fn background(seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SCENE_SIZE;
    let horizon = rng.random_range(14..26) as f64;
    let sky: Rgb = [rng.random_range(0.45..0.7), rng.random_range(0.6..0.8), rng.random_range(0.75..0.95)];
    let road = rng.random_range(0.25..0.5);
    let lane_y = horizon + rng.random_range(8.0..18.0);
    let lane: Rgb = if rng.random_bool(0.5) { [0.9, 0.9, 0.9] } else { [0.85, 0.75, 0.2] };
    let buildings: Vec<(f64, f64, f64, Rgb)> = (0..rng.random_range(2..6))
        .map(|_| {
            let x0 = rng.random_range(0.0..n as f64 - 6.0);
            let width = rng.random_range(6.0..18.0);
            let top = horizon - rng.random_range(4.0..14.0);
            let g = rng.random_range(0.3..0.75);
            (x0, width, top, [g * rng.random_range(0.8..1.2), g, g * rng.random_range(0.8..1.2)])
        })
        .collect();
    let bushes: Vec<(f64, f64, f64, Rgb)> = (0..rng.random_range(2..7))
        .map(|_| {
            let c = [rng.random_range(0.1..0.3), rng.random_range(0.3..0.55), rng.random_range(0.1..0.25)];
            (rng.random_range(0.0..n as f64), horizon + rng.random_range(-2.0..3.0), rng.random_range(1.5..4.0), c)
        })
        .collect();
    let noise: Vec<f64> = (0..n * n * 3).map(|_| rng.random_range(-0.02..0.02)).collect();
    let img = ImageBuffer::from_fn(n, n, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = if py < horizon {
            scale(sky, 0.9 + 0.2 * py / horizon)
        } else {
            let dash = ((px / 6.0) as usize).is_multiple_of(2);
            if (py - lane_y).abs() < 0.8 && dash {
                lane
            } else {
                [road, road, road * 1.05]
            }
        };
        for &(x0, width, top, col) in &buildings {
            if px >= x0 && px < x0 + width && py >= top && py < horizon {
                let window = ((px - x0) as usize) % 3 == 1 && ((py - top) as usize) % 3 == 1;
                c = if window { scale(col, 0.6) } else { col };
            }
        }
        for &(bx, by, r, col) in &bushes {
            if (px - bx).powi(2) + (py - by).powi(2) < r * r {
                c = col;
            }
        }
        let i = (y * n + x) * 3;
        [c[0] + noise[i], c[1] + noise[i + 1], c[2] + noise[i + 2]]
    });
    quantized(&img)
}

/// Where projector pixel `(u, v)` lands on the car image for a view: a
/// curved panel over the body and cabin, shifted and narrowed as the car
/// turns.
pub fn surface_point(angle_deg: f64, u: f64, v: f64) -> Point2 {
    let t = angle_deg / 20.0;
    let last = (PATCH_SIZE - 1) as f64;
    let (s, r) = (u / last, v / last);
    let centre = 17.5 + 1.5 * t;
    let half = 13.5 * (1.0 - 0.12 * t.abs());
    let x = centre + (2.0 * s - 1.0) * (half + 0.6 * (std::f64::consts::PI * r).sin());
    let y = 4.0 + 13.0 * r + 1.2 * (std::f64::consts::PI * s).sin() + 0.8 * t * (s - 0.5);
    Point2::new(x, y)
}

/// Checkerboard corners on the projector plane and where they were
/// "captured" on the car for this view.
pub fn view_controls(angle_deg: f64) -> ControlPointSet {
    let last = (PATCH_SIZE - 1) as f64;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for j in 0..LATTICE {
        for i in 0..LATTICE {
            let (u, v) = (last * i as f64 / (LATTICE - 1) as f64, last * j as f64 / (LATTICE - 1) as f64);
            src.push(Point2::new(u, v));
            dst.push(surface_point(angle_deg, u, v));
        }
    }
    ControlPointSet::new(src, dst).expect("lattice is well spread")
}

/// Bounding box of the pixels whose coverage exceeds one half.
pub fn coverage_box(coverage: &[f64], width: usize) -> Option<[f64; 4]> {
    let mut bounds: Option<[usize; 4]> = None;
    for (i, c) in coverage.chunks_exact(3).enumerate() {
        if c[0] > 0.5 {
            let (x, y) = (i % width, i / width);
            let b = bounds.get_or_insert([x, y, x, y]);
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
    }
    bounds.map(|b| [b[0] as f64, b[1] as f64, (b[2] + 1) as f64, (b[3] + 1) as f64])
}

fn random_transform(rng: &mut ChaCha8Rng, scale: (f64, f64), shift: f64, rotation: f64) -> ObjectTransform {
    ObjectTransform {
        scale: rng.random_range(scale.0..scale.1),
        rotation_deg: rng.random_range(-rotation..rotation),
        shift: [rng.random_range(-shift..shift), rng.random_range(-shift..shift)],
        brightness: rng.random_range(-0.1..0.1),
        noise_sigma: rng.random_range(0.0..0.03),
        noise_seed: rng.random(),
    }
}

fn place(
    bg: &ImageBuffer,
    obj: &ImageBuffer,
    mask: &ImageBuffer,
    at: (usize, usize),
    t: &ObjectTransform,
) -> Result<(ImageBuffer, Option<[f64; 4]>)> {
    let spec = SceneSpec::new(obj.clone(), mask.clone(), bg.clone(), at)?;
    let plan = ScenePlan::new(&spec, t)?;
    let out = plan.render(obj)?;
    Ok((out, coverage_box(plan.coverage(), bg.width())))
}

/// Labeled training or held-out scenes: about 60% hold one car in a random
/// color, view and pose, the rest hold a cone, clutter, or nothing.
pub fn detector_scenes(count: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut image = background(rng.random());
        let mut objects = Vec::new();
        let kind: f64 = rng.random();
        if kind < 0.6 {
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            let body = base.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            let (obj, mask) = render_car(body, rng.random_range(-25.0..25.0));
            let t = random_transform(&mut rng, (0.55, 1.25), 8.0, 8.0);
            let (img, bbox) = place(&image, &obj, &mask, PLACEMENT, &t)?;
            image = img;
            if let Some(bbox) = bbox {
                objects.push(Annotation { label: "car".into(), bbox });
            }
        } else if kind < 0.92 {
            let (label, (obj, mask)) = if kind < 0.78 {
                ("cone", render_cone())
            } else {
                ("other", render_clutter(&mut rng))
            };
            let (oh, ow) = obj.dims();
            let at = (rng.random_range(0..SCENE_SIZE - ow), rng.random_range(0..SCENE_SIZE - oh));
            let t = random_transform(&mut rng, (0.8, 1.3), 3.0, 10.0);
            let (img, bbox) = place(&image, &obj, &mask, at, &t)?;
            image = img;
            if let Some(bbox) = bbox {
                objects.push(Annotation { label: label.into(), bbox });
            }
        }
        out.push(LabeledScene {
            image: quantized(&image),
            objects,
        });
    }
    Ok(out)
}

/// Small pose and lighting wobble used for evaluation frames; `scale`
/// multiplies the drawn scale.
pub fn frame_jitter(rng: &mut ChaCha8Rng, scale: f64) -> ObjectTransform {
    ObjectTransform {
        scale: scale * rng.random_range(0.94..1.06),
        rotation_deg: rng.random_range(-3.0..3.0),
        shift: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        brightness: rng.random_range(-0.04..0.04),
        noise_sigma: 0.01,
        noise_seed: rng.random(),
    }
}
