//! Projector-to-surface color model: a 6→h→h→3 rectifier network that
//! predicts the captured color of a surface pixel from its unlit color and
//! the projected color.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::optim::Adam;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorSample {
    pub surface: Rgb,
    pub projected: Rgb,
    pub observed: Rgb,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColorDataset {
    pub samples: Vec<ColorSample>,
    pub provenance: String,
}

impl ColorDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.provenance.is_empty() {
            writeln!(out, "# {}", self.provenance).unwrap();
        }
        for s in &self.samples {
            let v = [s.surface, s.projected, s.observed].concat();
            let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    /// Parses `Sr Sg Sb Pr Pg Pb Or Og Ob` lines. The first comment line, if
    /// any, becomes the provenance.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        let mut provenance = String::new();
        for (i, raw) in text.lines().enumerate() {
            let trimmed = raw.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if provenance.is_empty() {
                    provenance = comment.trim().to_string();
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let vals = trimmed
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| (0.0..=1.0).contains(v))
                        .ok_or_else(|| Error::parse(origin, i + 1, format!("bad value `{f}`; expected a real in [0, 1]")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 9 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected 9 values, found {}", vals.len()),
                ));
            }
            samples.push(ColorSample {
                surface: [vals[0], vals[1], vals[2]],
                projected: [vals[3], vals[4], vals[5]],
                observed: [vals[6], vals[7], vals[8]],
            });
        }
        Ok(Self {
            samples,
            provenance,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Synthetic stand-in for a capture session: how a projected color shows up
/// on a surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptureLaw {
    /// `O = clamp(a·S + b·P + c)`.
    Linear { surface: f64, projected: f64, bias: f64 },
    /// `O = clamp(S + gain·P·(floor + (1 − floor)·S))`: projector light adds
    /// to the ambient-lit surface, scaled by reflectance. Higher ambient light
    /// means lower `gain`.
    Projector { gain: f64, floor: f64 },
}

impl CaptureLaw {
    pub const SEPARABLE: CaptureLaw = CaptureLaw::Linear {
        surface: 0.3,
        projected: 0.6,
        bias: 0.05,
    };

    pub fn by_name(name: &str) -> Option<CaptureLaw> {
        Some(match name {
            "separable" => Self::SEPARABLE,
            "ambient-low" => Self::ambient(0),
            "ambient-mid" => Self::ambient(1),
            "ambient-high" => Self::ambient(2),
            _ => return None,
        })
    }

    /// Projector laws for rising ambient levels (low, mid, high).
    pub fn ambient(level: usize) -> CaptureLaw {
        const GAINS: [f64; 3] = [0.9, 0.55, 0.3];
        CaptureLaw::Projector {
            gain: GAINS[level.min(2)],
            floor: 0.3,
        }
    }

    pub fn observe(&self, surface: Rgb, projected: Rgb) -> Rgb {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v = match *self {
                CaptureLaw::Linear {
                    surface: a,
                    projected: b,
                    bias,
                } => a * surface[c] + b * projected[c] + bias,
                CaptureLaw::Projector { gain, floor } => {
                    surface[c] + gain * projected[c] * (floor + (1.0 - floor) * surface[c])
                }
            };
            out[c] = v.clamp(0.0, 1.0);
        }
        out
    }

    /// `count` samples with uniformly random surface and projected colors.
    pub fn synthesize_random(&self, count: usize, seed: u64) -> ColorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..count)
            .map(|_| {
                let surface: Rgb = [rng.random(), rng.random(), rng.random()];
                let projected: Rgb = [rng.random(), rng.random(), rng.random()];
                ColorSample {
                    surface,
                    projected,
                    observed: self.observe(surface, projected),
                }
            })
            .collect();
        ColorDataset {
            samples,
            provenance: format!("synthetic random capture, law {self:?}, seed {seed}"),
        }
    }

    /// The projected-color sweep: a `levels³` RGB grid per surface color.
    pub fn synthesize_sweep(&self, surfaces: &[Rgb], levels: usize) -> ColorDataset {
        let step = 1.0 / (levels.max(2) - 1) as f64;
        let mut samples = Vec::with_capacity(surfaces.len() * levels.pow(3));
        for &surface in surfaces {
            for r in 0..levels {
                for g in 0..levels {
                    for b in 0..levels {
                        let projected = [r as f64 * step, g as f64 * step, b as f64 * step];
                        samples.push(ColorSample {
                            surface,
                            projected,
                            observed: self.observe(surface, projected),
                        });
                    }
                }
            }
        }
        ColorDataset {
            samples,
            provenance: format!(
                "synthetic {levels}x{levels}x{levels} sweep over {} surface colors, law {self:?}",
                surfaces.len()
            ),
        }
    }
}

/// Weights of the 6→h→h→3 network. Matrices are row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorModel {
    hidden: usize,
    seed: u64,
    params: Vec<f64>,
}

const INPUT: usize = 6;
const OUTPUT: usize = 3;

impl ColorModel {
    pub fn zeros(hidden: usize) -> Self {
        assert!(hidden > 0, "hidden width must be positive");
        Self {
            hidden,
            seed: 0,
            params: vec![0.0; Self::param_count(hidden)],
        }
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut model = Self::zeros(hidden);
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = model.layout();
        for (idx, (start, len, fan_in)) in layout.iter().enumerate() {
            if idx % 2 == 1 {
                continue;
            }
            let bound = (6.0 / *fan_in as f64).sqrt();
            for p in &mut model.params[*start..start + len] {
                *p = rng.random_range(-bound..bound);
            }
        }
        model
    }

    /// Network computing `O = a·S + b·P + c` exactly for inputs in `[0, 1]`
    /// (before the output clamp). Needs `hidden ≥ 6`.
    pub fn affine_law(surface_gain: Rgb, projected_gain: Rgb, bias: Rgb, hidden: usize) -> Self {
        assert!(hidden >= INPUT, "hidden width must be at least 6");
        let mut m = Self::zeros(hidden);
        let l = m.layout();
        for i in 0..INPUT {
            m.params[l[0].0 + i * INPUT + i] = 1.0;
            m.params[l[2].0 + i * hidden + i] = 1.0;
        }
        for c in 0..OUTPUT {
            m.params[l[4].0 + c * hidden + c] = surface_gain[c];
            m.params[l[4].0 + c * hidden + 3 + c] = projected_gain[c];
            m.params[l[5].0 + c] = bias[c];
        }
        m
    }

    fn param_count(h: usize) -> usize {
        h * INPUT + h + h * h + h + OUTPUT * h + OUTPUT
    }

    /// `(offset, length, fan_in)` for w1, b1, w2, b2, w3, b3.
    fn layout(&self) -> [(usize, usize, usize); 6] {
        let h = self.hidden;
        let sizes = [
            (h * INPUT, INPUT),
            (h, INPUT),
            (h * h, h),
            (h, h),
            (OUTPUT * h, h),
            (OUTPUT, h),
        ];
        let mut out = [(0, 0, 0); 6];
        let mut off = 0;
        for (o, (len, fan)) in out.iter_mut().zip(sizes) {
            *o = (off, len, fan);
            off += len;
        }
        out
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn slice(&self, k: usize) -> &[f64] {
        let (o, l, _) = self.layout()[k];
        &self.params[o..o + l]
    }

    /// Unclamped forward pass for one pixel.
    fn forward_raw(&self, surface: Rgb, projected: Rgb) -> Rgb {
        let h = self.hidden;
        let x = [
            surface[0], surface[1], surface[2], projected[0], projected[1], projected[2],
        ];
        let dense = |w: &[f64], b: &[f64], input: &[f64], relu: bool| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bias)| {
                    let v = bias + w[o * input.len()..(o + 1) * input.len()]
                        .iter()
                        .zip(input)
                        .map(|(p, q)| p * q)
                        .sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let h1 = dense(self.slice(0), self.slice(1), &x, true);
        let h2 = dense(self.slice(2), self.slice(3), &h1, true);
        debug_assert_eq!(h2.len(), h);
        let o = dense(self.slice(4), self.slice(5), &h2, false);
        [o[0], o[1], o[2]]
    }

    /// Records the network on `tape` for `n` positions of 6-channel input.
    /// `params` are the six parameter nodes (w1, b1, w2, b2, w3, b3).
    fn forward_tape_with(tape: &mut Tape, input: Var, params: &[Var; 6], clamp: bool) -> Var {
        let a1 = tape.affine(input, params[0], params[1]);
        let h1 = tape.relu(a1);
        let a2 = tape.affine(h1, params[2], params[3]);
        let h2 = tape.relu(a2);
        let out = tape.affine(h2, params[4], params[5]);
        if clamp {
            tape.clamp(out, 0.0, 1.0)
        } else {
            out
        }
    }

    fn constant_params(&self, tape: &mut Tape) -> [Var; 6] {
        let mut vars = [Var::from_index(0); 6];
        for (k, v) in vars.iter_mut().enumerate() {
            let s = self.slice(k).to_vec();
            *v = tape.constant(Shape::vector(s.len()), s);
        }
        vars
    }

    /// Inference on the tape: clamped output, weights held constant.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Var {
        let params = self.constant_params(tape);
        Self::forward_tape_with(tape, input, &params, true)
    }

    /// Records the color-mapped overlay on the tape: per-pixel prediction from
    /// `surface` (constant, H×W×3) and `projected` (H×W×3), multiplied by
    /// `gate` (1 where the mask is positive, 0 elsewhere).
    pub fn map_tape(&self, tape: &mut Tape, surface: Var, projected: Var, gate: Arc<Vec<f64>>) -> Var {
        let input = tape.concat(surface, projected);
        let out = self.forward_tape(tape, input);
        tape.mul_const(out, gate)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# projforge color model\n");
        writeln!(out, "layers {} {} {} {}", INPUT, self.hidden, self.hidden, OUTPUT).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        let names = ["w1", "b1", "w2", "b2", "w3", "b3"];
        for (k, (o, l, fan)) in self.layout().iter().enumerate() {
            let chunk = if k % 2 == 0 { *fan } else { *l };
            for row in self.params[*o..o + l].chunks(chunk) {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{} {}", names[k], vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut hidden = None;
        let mut seed = 0;
        let mut params = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap();
            let nums: Vec<&str> = fields.collect();
            let bad = |f: &str| Error::parse(origin, i + 1, format!("bad number `{f}`"));
            match key {
                "layers" => {
                    let dims = nums
                        .iter()
                        .map(|f| f.parse::<usize>().map_err(|_| bad(f)))
                        .collect::<Result<Vec<_>>>()?;
                    if dims.len() != 4 || dims[0] != INPUT || dims[3] != OUTPUT || dims[1] != dims[2] || dims[1] == 0 {
                        return Err(Error::parse(origin, i + 1, "expected `layers 6 h h 3`"));
                    }
                    hidden = Some(dims[1]);
                }
                "seed" => {
                    seed = nums
                        .first()
                        .ok_or_else(|| Error::parse(origin, i + 1, "missing seed"))?
                        .parse()
                        .map_err(|_| bad(nums[0]))?;
                }
                "w1" | "b1" | "w2" | "b2" | "w3" | "b3" => {
                    for f in nums {
                        params.push(f.parse::<f64>().map_err(|_| bad(f))?);
                    }
                }
                other => return Err(Error::parse(origin, i + 1, format!("unknown key `{other}`"))),
            }
        }
        let hidden = hidden.ok_or_else(|| Error::parse(origin, 0, "missing `layers` line"))?;
        if params.len() != Self::param_count(hidden) {
            return Err(Error::parse(
                origin,
                0,
                format!(
                    "expected {} parameters, found {}",
                    Self::param_count(hidden),
                    params.len()
                ),
            ));
        }
        Ok(Self {
            hidden,
            seed,
            params,
        })
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

/// Clamped prediction of the captured color.
pub fn predict_color(model: &ColorModel, surface: Rgb, projected: Rgb) -> Rgb {
    model.forward_raw(surface, projected).map(|v| v.clamp(0.0, 1.0))
}

/// `∂ predict_color / ∂ projected` as `jac[out][in]`, by reverse mode.
pub fn predict_color_jacobian(model: &ColorModel, surface: Rgb, projected: Rgb) -> [[f64; 3]; 3] {
    let mut jac = [[0.0; 3]; 3];
    for (out, row) in jac.iter_mut().enumerate() {
        let mut tape = Tape::new();
        let s = tape.constant(Shape::vector(3), surface.to_vec());
        let p = tape.input(Shape::vector(3), projected.to_vec());
        let x = tape.concat(s, p);
        let y = model.forward_tape(&mut tape, x);
        let mut pick = vec![0.0; 3];
        pick[out] = 1.0;
        let picked = tape.mul_const(y, Arc::new(pick));
        let total = tape.sum(picked);
        let g = tape.backward(total).expect("scalar output");
        row.copy_from_slice(&g.wrt(p));
    }
    jac
}

/// Per-pixel prediction where `mask > 0`, zero elsewhere.
pub fn apply_color_map(
    model: &ColorModel,
    surface_img: &ImageBuffer,
    projected_img: &ImageBuffer,
    mask: &ImageBuffer,
) -> Result<ImageBuffer> {
    if !surface_img.same_dims(projected_img) || !surface_img.same_dims(mask) {
        return Err(Error::Dimension(format!(
            "color map inputs differ: surface {:?}, projected {:?}, mask {:?}",
            surface_img.dims(),
            projected_img.dims(),
            mask.dims()
        )));
    }
    let (h, w) = surface_img.dims();
    Ok(ImageBuffer::from_fn(h, w, |x, y| {
        if mask.luma(x, y) > 0.0 {
            predict_color(model, surface_img.pixel(x, y), projected_img.pixel(x, y))
        } else {
            [0.0; 3]
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ColorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 600,
            step_size: 3e-3,
            batch_size: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorTrainReport {
    /// Mean L1 of the clamped model over the whole dataset after training.
    pub final_loss: f64,
    /// Mean training-batch L1 per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean over samples of the channel-summed absolute error of clamped
/// predictions.
pub fn mean_l1(model: &ColorModel, data: &ColorDataset) -> f64 {
    let total: f64 = data
        .samples
        .iter()
        .map(|s| {
            let p = predict_color(model, s.surface, s.projected);
            (0..3).map(|c| (p[c] - s.observed[c]).abs()).sum::<f64>()
        })
        .sum();
    total / data.len().max(1) as f64
}

/// L1 of the best constant predictor (per-channel median).
pub fn constant_baseline_l1(data: &ColorDataset) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let mut vals: Vec<f64> = data.samples.iter().map(|s| s.observed[c]).collect();
        vals.sort_by(f64::total_cmp);
        let median = vals[vals.len() / 2];
        total += vals.iter().map(|v| (v - median).abs()).sum::<f64>();
    }
    total / data.len().max(1) as f64
}

pub fn train_color_model(
    data: &ColorDataset,
    config: &ColorTrainConfig,
) -> Result<(ColorModel, ColorTrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.hidden == 0 || config.batch_size == 0 || !(config.step_size > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "color training needs positive hidden width, batch size and step size: {config:?}"
        )));
    }
    let mut model = ColorModel::random(config.hidden, config.seed);
    let layout = model.layout();
    let mut opt = Adam::new(model.params.len(), config.step_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c010);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // cosine-annealed step size; the L1 objective does not flatten near
        // its optimum, so a fixed step would keep oscillating
        let progress = epoch as f64 / config.epochs as f64;
        opt.step_size = config.step_size * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let n = batch.len();
            let mut input = Vec::with_capacity(n * INPUT);
            let mut target = Vec::with_capacity(n * OUTPUT);
            for &i in batch {
                let s = &data.samples[i];
                input.extend_from_slice(&s.surface);
                input.extend_from_slice(&s.projected);
                target.extend(s.observed.iter().map(|v| -v));
            }
            let mut tape = Tape::new();
            let x = tape.constant(Shape::new(n, 1, 1, INPUT), input);
            let mut vars = [Var::from_index(0); 6];
            for (k, v) in vars.iter_mut().enumerate() {
                let (o, l, _) = layout[k];
                *v = tape.input(Shape::vector(l), model.params[o..o + l].to_vec());
            }
            let out = ColorModel::forward_tape_with(&mut tape, x, &vars, false);
            let resid = tape.add_const(out, &target);
            let abs = tape.abs(resid);
            let sum = tape.sum(abs);
            let loss = tape.scale(sum, 1.0 / n as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "color model loss became {value} at epoch {epoch}"
                )));
            }
            epoch_total += value * n as f64;
            let grad = tape.backward(loss)?;
            let mut flat = Vec::with_capacity(model.params.len());
            for v in vars {
                flat.extend(grad.wrt(v));
            }
            opt.step(&mut model.params, &flat);
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    let final_loss = mean_l1(&model, data);
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("final loss {final_loss}")));
    }
    Ok((
        model,
        ColorTrainReport {
            final_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckConfig};

    fn additive() -> ColorModel {
        ColorModel::affine_law([1.0; 3], [0.5; 3], [0.0; 3], 8)
    }

    #[test]
    fn zero_model_predicts_black() {
        let m = ColorModel::zeros(32);
        assert_eq!(predict_color(&m, [0.3, 0.6, 0.9], [0.1, 0.2, 0.3]), [0.0; 3]);
    }

    #[test]
    fn hand_built_additive_law() {
        let m = additive();
        let p = predict_color(&m, [0.2; 3], [1.0; 3]);
        assert!(p.iter().all(|v| (v - 0.7).abs() < 1e-6));
        let s = [0.2, 0.4, 0.9];
        assert_eq!(predict_color(&m, s, [0.0; 3]), s);
        // clamp at the top end
        assert_eq!(predict_color(&m, [0.9; 3], [1.0; 3]), [1.0; 3]);
    }

    #[test]
    fn color_map_masking() {
        let m = additive();
        let surface = ImageBuffer::from_fn(3, 4, |x, y| [x as f64 * 0.1, y as f64 * 0.2, 0.3]);
        let projected = ImageBuffer::from_fn(3, 4, |x, _| [0.2, x as f64 * 0.25, 0.8]);
        let zero = ImageBuffer::filled(3, 4, 0.0);
        assert_eq!(apply_color_map(&m, &surface, &projected, &zero).unwrap(), zero);

        let ones = ImageBuffer::filled(3, 4, 1.0);
        let out = apply_color_map(&m, &surface, &projected, &ones).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let (s, p) = (surface.pixel(x, y), projected.pixel(x, y));
                for c in 0..3 {
                    let want = (s[c] + 0.5 * p[c]).clamp(0.0, 1.0);
                    assert!((out.pixel(x, y)[c] - want).abs() < 1e-6);
                }
            }
        }

        let single = zero.with_pixel(2, 1, [1.0; 3]).unwrap();
        let out = apply_color_map(&m, &surface, &projected, &single).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let nonzero = out.pixel(x, y).iter().any(|v| *v != 0.0);
                assert_eq!(nonzero, (x, y) == (2, 1));
            }
        }
        let wrong = ImageBuffer::filled(2, 4, 1.0);
        assert!(matches!(
            apply_color_map(&m, &surface, &projected, &wrong),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn projected_gradient_matches_finite_differences() {
        let model = ColorModel::random(16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let surface: Rgb = [rng.random(), rng.random(), rng.random()];
            let projected: Rgb = [rng.random(), rng.random(), rng.random()];
            let m = model.clone();
            let report = check_gradients(
                move |t, v| {
                    let s = t.constant(Shape::vector(3), surface.to_vec());
                    let x = t.concat(s, v[0]);
                    let y = m.forward_tape(t, x);
                    let w = t.mul_const(y, Arc::new(vec![0.7, -1.3, 0.4]));
                    t.sum(w)
                },
                &[(Shape::vector(3), projected.to_vec())],
                &GradCheckConfig {
                    seed: trial,
                    ..Default::default()
                },
            );
            assert!(report.passed(), "trial {trial}: {}", report.worst_relative_error);
        }
        // the tape jacobian agrees with the plain forward pass
        let (s, p) = ([0.3, 0.5, 0.2], [0.6, 0.1, 0.8]);
        let jac = predict_color_jacobian(&model, s, p);
        let h = 1e-6;
        for i in 0..3 {
            let (mut up, mut dn) = (p, p);
            up[i] += h;
            dn[i] -= h;
            let (a, b) = (predict_color(&model, s, up), predict_color(&model, s, dn));
            for o in 0..3 {
                assert!((jac[o][i] - (a[o] - b[o]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_point_fit() {
        let sample = ColorSample {
            surface: [0.2, 0.5, 0.7],
            projected: [0.9, 0.1, 0.4],
            observed: [0.6, 0.35, 0.8],
        };
        let data = ColorDataset {
            samples: vec![sample; 16],
            provenance: "repeated".into(),
        };
        let cfg = ColorTrainConfig {
            epochs: 2000,
            batch_size: 16,
            step_size: 1e-3,
            ..Default::default()
        };
        let (_, report) = train_color_model(&data, &cfg).unwrap();
        assert!(report.final_loss <= 1e-3, "{}", report.final_loss);
    }

    #[test]
    fn empty_dataset_and_bad_config() {
        assert!(matches!(
            train_color_model(&ColorDataset::default(), &ColorTrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let data = CaptureLaw::SEPARABLE.synthesize_random(4, 1);
        let cfg = ColorTrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train_color_model(&data, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = CaptureLaw::SEPARABLE.synthesize_random(32, 1);
        let cfg = ColorTrainConfig {
            step_size: f64::MAX,
            epochs: 3,
            ..Default::default()
        };
        assert!(matches!(train_color_model(&data, &cfg), Err(Error::Diverged(_))));
    }

    #[test]
    fn training_is_deterministic_and_smoothly_decreasing() {
        let data = CaptureLaw::SEPARABLE.synthesize_random(512, 7);
        let cfg = ColorTrainConfig {
            epochs: 300,
            ..Default::default()
        };
        let (a, ra) = train_color_model(&data, &cfg).unwrap();
        let (b, _) = train_color_model(&data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.to_text(), b.to_text());
        let windows: Vec<f64> = ra
            .epoch_losses
            .chunks(50)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0], "{windows:?}");
        }
    }

    #[test]
    fn model_and_dataset_text_round_trip() {
        let m = ColorModel::random(5, 9);
        let back = ColorModel::from_text(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        let d = CaptureLaw::ambient(1).synthesize_sweep(&[[0.2, 0.3, 0.4]], 3);
        assert_eq!(d.len(), 27);
        let back = ColorDataset::parse(&d.to_text(), Path::new("d")).unwrap();
        assert_eq!(back, d);
        assert!(ColorDataset::parse("0 0 0 0 0 0 0 0\n", Path::new("d")).is_err());
    }

    #[test]
    fn ambient_laws_shrink_gamut() {
        let s = [0.3, 0.3, 0.5];
        let p = [1.0; 3];
        let gains: Vec<f64> = (0..3)
            .map(|lvl| CaptureLaw::ambient(lvl).observe(s, p)[0] - s[0])
            .collect();
        assert!(gains[0] > gains[1] && gains[1] > gains[2]);
        assert_eq!(CaptureLaw::ambient(2).observe(s, [0.0; 3]), s);
    }
}
