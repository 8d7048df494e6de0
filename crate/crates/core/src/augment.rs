//! Stochastic view generation: the weak pipeline (crop + flip) for the
//! teacher path, the contrastive pipeline (crop/flip/jitter/grayscale/
//! blur) for the student path, and the multi-crop ladder.
//!
//! All randomness is captured in an explicit [`AugmentDraw`] so a view
//! can be re-rendered bit-for-bit and so pipelines can be compared under
//! shared draws. Internal arithmetic is f64 regardless of the output
//! scalar type, which keeps renders identical across precisions up to
//! the final cast.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Aspect-ratio range of the random resized crop (3/4 to 4/3).
const CROP_ASPECT: (f64, f64) = (0.75, 4.0 / 3.0);
/// Blur standard deviation is drawn uniformly from this range.
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);
/// Luma weights used for grayscale conversion and saturation blending.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Crop + flip only; drives the teacher path.
    Weak,
    /// Full crop/flip/jitter/grayscale/blur pipeline; student path.
    Contrastive,
    /// Contrastive pipeline rendered at several smaller sides.
    MulticropStudent,
}

/// Color distortion stage: `strength` scales the torchvision-style
/// jitter factors (brightness = contrast = saturation = 0.8·strength,
/// hue = 0.2·strength), fired with probability `prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterSpec {
    pub strength: f64,
    pub prob: f64,
}

impl ColorJitterSpec {
    #[must_use]
    pub fn brightness(&self) -> f64 {
        0.8 * self.strength
    }
    #[must_use]
    pub fn contrast(&self) -> f64 {
        0.8 * self.strength
    }
    #[must_use]
    pub fn saturation(&self) -> f64 {
        0.8 * self.strength
    }
    #[must_use]
    pub fn hue(&self) -> f64 {
        0.2 * self.strength
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    /// Lower bound of the crop area fraction.
    pub crop_ratio_low: f64,
    /// Upper bound of the crop area fraction.
    pub crop_ratio_high: f64,
    pub flip_prob: f64,
    pub color_jitter: Option<ColorJitterSpec>,
    pub grayscale_prob: Option<f64>,
    pub blur_prob: Option<f64>,
    /// Side of the rendered square view, pixels.
    pub output_side: usize,
    /// Sub-seed separating this policy's random stream from others.
    pub rng_seed: u64,
    /// Per-channel standardization constants from the dataset manifest.
    pub normalization: NormStats,
}

impl AugmentationPolicy {
    /// Crop + flip pipeline (teacher path).
    #[must_use]
    pub fn weak(output_side: usize, normalization: NormStats) -> Self {
        AugmentationPolicy {
            kind: PolicyKind::Weak,
            crop_ratio_low: 0.2,
            crop_ratio_high: 1.0,
            flip_prob: 0.5,
            color_jitter: None,
            grayscale_prob: None,
            blur_prob: None,
            output_side,
            rng_seed: 1,
            normalization,
        }
    }

    /// Full pipeline (student path): jitter strength 0.5 at p=0.8,
    /// grayscale p=0.2, blur p=0.5.
    #[must_use]
    pub fn contrastive(output_side: usize, normalization: NormStats) -> Self {
        AugmentationPolicy {
            kind: PolicyKind::Contrastive,
            crop_ratio_low: 0.2,
            crop_ratio_high: 1.0,
            flip_prob: 0.5,
            color_jitter: Some(ColorJitterSpec {
                strength: 0.5,
                prob: 0.8,
            }),
            grayscale_prob: Some(0.2),
            blur_prob: Some(0.5),
            output_side,
            rng_seed: 2,
            normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(self.crop_ratio_low > 0.0
            && self.crop_ratio_low <= self.crop_ratio_high
            && self.crop_ratio_high <= 1.0)
        {
            return cfg(format!(
                "crop ratio bounds must satisfy 0 < low <= high <= 1, got ({}, {})",
                self.crop_ratio_low, self.crop_ratio_high
            ));
        }
        let probs = [
            ("flip_prob", Some(self.flip_prob)),
            ("color_jitter.prob", self.color_jitter.map(|j| j.prob)),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ];
        for (name, p) in probs {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return cfg(format!("{name} must be in [0, 1], got {p}"));
                }
            }
        }
        if let Some(j) = &self.color_jitter {
            if j.strength < 0.0 {
                return cfg(format!("jitter strength must be >= 0, got {}", j.strength));
            }
        }
        if self.kind == PolicyKind::Weak
            && (self.color_jitter.is_some()
                || self.grayscale_prob.is_some()
                || self.blur_prob.is_some())
        {
            return cfg("weak policy must not carry jitter/grayscale/blur stages".into());
        }
        if self.output_side == 0 {
            return cfg("output_side must be positive".into());
        }
        for c in 0..3 {
            if self.normalization.std[c] <= 0.0 || !self.normalization.std[c].is_finite() {
                return cfg(format!(
                    "normalization std must be positive and finite, got {}",
                    self.normalization.std[c]
                ));
            }
        }
        Ok(())
    }
}

/// Crop window in source-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropDraw {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Sampled color-distortion parameters: `order` permutes the four ops
/// (0=brightness, 1=contrast, 2=saturation, 3=hue).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub order: [u8; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Every random choice of one view, fixed before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub crop: CropDraw,
    pub flip: bool,
    pub jitter: Option<JitterDraw>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub out_side: usize,
}

impl AugmentDraw {
    /// A draw that renders the full image deterministically: full-frame
    /// crop, no flip, no optional stages.
    #[must_use]
    pub fn identity(src_h: usize, src_w: usize, out_side: usize) -> Self {
        AugmentDraw {
            crop: CropDraw {
                top: 0,
                left: 0,
                height: src_h,
                width: src_w,
            },
            flip: false,
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            out_side,
        }
    }
}

/// Random-resized-crop sampler: up to ten attempts drawing an area
/// fraction in `[low, high]` and a log-uniform aspect ratio in
/// [3/4, 4/3]; attempts whose rounded integer window leaves the bounds
/// are rejected so the realized area fraction always stays inside them.
/// Falls back to the centered maximal square.
fn draw_crop(
    src_h: usize,
    src_w: usize,
    low: f64,
    high: f64,
    rng: &mut ChaCha8Rng,
) -> CropDraw {
    let area = (src_h * src_w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(low..=high);
        let log_ratio = rng.gen_range(CROP_ASPECT.0.ln()..=CROP_ASPECT.1.ln());
        let aspect = log_ratio.exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > src_w || h > src_h {
            continue;
        }
        let realized = (w * h) as f64 / area;
        if realized < low || realized > high {
            continue;
        }
        let top = rng.gen_range(0..=src_h - h);
        let left = rng.gen_range(0..=src_w - w);
        return CropDraw {
            top,
            left,
            height: h,
            width: w,
        };
    }
    let side = src_h.min(src_w);
    CropDraw {
        top: (src_h - side) / 2,
        left: (src_w - side) / 2,
        height: side,
        width: side,
    }
}

/// Samples every random choice for one view of a `src_h`×`src_w` image.
pub fn draw_augment(
    policy: &AugmentationPolicy,
    src_h: usize,
    src_w: usize,
    rng: &mut ChaCha8Rng,
) -> AugmentDraw {
    let crop = draw_crop(
        src_h,
        src_w,
        policy.crop_ratio_low,
        policy.crop_ratio_high,
        rng,
    );
    let flip = rng.gen::<f64>() < policy.flip_prob;
    let jitter = policy.color_jitter.as_ref().and_then(|spec| {
        if rng.gen::<f64>() < spec.prob {
            let mut order = [0u8, 1, 2, 3];
            // Fisher-Yates over the four ops.
            for i in (1..4).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let uniform_around_one = |rng: &mut ChaCha8Rng, x: f64| {
                let lo = (1.0 - x).max(0.0);
                rng.gen_range(lo..=1.0 + x)
            };
            Some(JitterDraw {
                order,
                brightness: uniform_around_one(rng, spec.brightness()),
                contrast: uniform_around_one(rng, spec.contrast()),
                saturation: uniform_around_one(rng, spec.saturation()),
                hue: rng.gen_range(-spec.hue()..=spec.hue()),
            })
        } else {
            None
        }
    });
    let grayscale = policy
        .grayscale_prob
        .is_some_and(|p| rng.gen::<f64>() < p);
    let blur_sigma = policy.blur_prob.and_then(|p| {
        if rng.gen::<f64>() < p {
            Some(rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1))
        } else {
            None
        }
    });
    AugmentDraw {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        out_side: policy.output_side,
    }
}

/// HWC f64 working image in [0, 1] (clamped after each distortion op).
struct WorkImage {
    side: usize,
    buf: Vec<f64>,
}

impl WorkImage {
    fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.buf[(y * self.side + x) * 3 + c]
    }
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.buf[(y * self.side + x) * 3 + c] = v;
    }
    fn luma_at(&self, y: usize, x: usize) -> f64 {
        LUMA[0] * self.get(y, x, 0) + LUMA[1] * self.get(y, x, 1) + LUMA[2] * self.get(y, x, 2)
    }
}

/// Fused crop + bilinear resize from u8 HWC source into a [0,1] f64
/// working image. Sampling uses half-pixel centers, so a same-size crop
/// reproduces the source exactly.
fn crop_resize(pixels: &[u8], src_w: usize, crop: CropDraw, out_side: usize) -> WorkImage {
    let mut buf = vec![0.0f64; out_side * out_side * 3];
    let scale_y = crop.height as f64 / out_side as f64;
    let scale_x = crop.width as f64 / out_side as f64;
    let src = |y: usize, x: usize, c: usize| -> f64 {
        f64::from(pixels[((crop.top + y) * src_w + crop.left + x) * 3 + c]) / 255.0
    };
    for dy in 0..out_side {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, crop.height as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop.height - 1);
        let wy = sy - y0 as f64;
        for dx in 0..out_side {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, crop.width as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop.width - 1);
            let wx = sx - x0 as f64;
            for c in 0..3 {
                let top = (1.0 - wx) * src(y0, x0, c) + wx * src(y0, x1, c);
                let bot = (1.0 - wx) * src(y1, x0, c) + wx * src(y1, x1, c);
                buf[(dy * out_side + dx) * 3 + c] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    WorkImage {
        side: out_side,
        buf,
    }
}

fn flip_horizontal(img: &mut WorkImage) {
    let side = img.side;
    for y in 0..side {
        for x in 0..side / 2 {
            for c in 0..3 {
                let a = img.get(y, x, c);
                let b = img.get(y, side - 1 - x, c);
                img.set(y, x, c, b);
                img.set(y, side - 1 - x, c, a);
            }
        }
    }
}

fn clamp_unit(img: &mut WorkImage) {
    for v in &mut img.buf {
        *v = v.clamp(0.0, 1.0);
    }
}

fn adjust_brightness(img: &mut WorkImage, factor: f64) {
    for v in &mut img.buf {
        *v *= factor;
    }
    clamp_unit(img);
}

/// Blend toward the scalar mean of the grayscale image.
fn adjust_contrast(img: &mut WorkImage, factor: f64) {
    let side = img.side;
    let mut mean = 0.0;
    for y in 0..side {
        for x in 0..side {
            mean += img.luma_at(y, x);
        }
    }
    mean /= (side * side) as f64;
    for v in &mut img.buf {
        *v = factor * *v + (1.0 - factor) * mean;
    }
    clamp_unit(img);
}

/// Blend each pixel toward its own grayscale value.
fn adjust_saturation(img: &mut WorkImage, factor: f64) {
    let side = img.side;
    for y in 0..side {
        for x in 0..side {
            let g = img.luma_at(y, x);
            for c in 0..3 {
                let v = factor * img.get(y, x, c) + (1.0 - factor) * g;
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    (h.rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns (shift in [-0.5, 0.5]).
fn adjust_hue(img: &mut WorkImage, shift: f64) {
    let side = img.side;
    for y in 0..side {
        for x in 0..side {
            let (h, s, v) = rgb_to_hsv(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            img.set(y, x, 0, r.clamp(0.0, 1.0));
            img.set(y, x, 1, g.clamp(0.0, 1.0));
            img.set(y, x, 2, b.clamp(0.0, 1.0));
        }
    }
}

fn to_grayscale(img: &mut WorkImage) {
    let side = img.side;
    for y in 0..side {
        for x in 0..side {
            let g = img.luma_at(y, x);
            for c in 0..3 {
                img.set(y, x, c, g);
            }
        }
    }
}

/// Odd kernel side: 10% of the image side rounded up, bumped to odd.
#[must_use]
pub fn blur_kernel_side(image_side: usize) -> usize {
    let k = image_side.div_ceil(10);
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with reflect padding (edge not repeated).
fn gaussian_blur(img: &mut WorkImage, sigma: f64) {
    let side = img.side;
    let k = blur_kernel_side(side);
    if k <= 1 || side < 2 {
        return;
    }
    let half = (k / 2) as i64;
    let mut kernel = Vec::with_capacity(k);
    let mut sum = 0.0;
    for i in 0..k {
        let d = i as f64 - half as f64;
        let w = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let reflect = |i: i64| -> usize {
        let n = side as i64;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i as usize
    };
    // Horizontal pass.
    let mut tmp = vec![0.0f64; img.buf.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, w) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + i as i64 - half);
                    acc += w * img.get(y, sx, c);
                }
                tmp[(y * side + x) * 3 + c] = acc;
            }
        }
    }
    // Vertical pass.
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, w) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + i as i64 - half);
                    acc += w * tmp[(sy * side + x) * 3 + c];
                }
                img.set(y, x, c, acc);
            }
        }
    }
}

/// Renders one view from an explicit draw. The policy contributes only
/// the standardization constants; every stochastic stage comes from the
/// draw, so two policies sharing constants render identical views from
/// identical draws.
pub fn render_view<S: Scalar>(
    pixels: &[u8],
    src_h: usize,
    src_w: usize,
    policy: &AugmentationPolicy,
    draw: &AugmentDraw,
) -> Result<Array3<S>> {
    if pixels.len() != src_h * src_w * 3 {
        return Err(Error::Shape(format!(
            "image buffer holds {} bytes, expected {}x{}x3",
            pixels.len(),
            src_h,
            src_w
        )));
    }
    let c = &draw.crop;
    if c.height == 0
        || c.width == 0
        || c.top + c.height > src_h
        || c.left + c.width > src_w
    {
        return Err(Error::Shape(format!(
            "crop {c:?} exceeds a {src_h}x{src_w} image"
        )));
    }
    let mut img = crop_resize(pixels, src_w, draw.crop, draw.out_side);
    if draw.flip {
        flip_horizontal(&mut img);
    }
    if let Some(j) = &draw.jitter {
        for op in j.order {
            match op {
                0 => adjust_brightness(&mut img, j.brightness),
                1 => adjust_contrast(&mut img, j.contrast),
                2 => adjust_saturation(&mut img, j.saturation),
                _ => adjust_hue(&mut img, j.hue),
            }
        }
    }
    if draw.grayscale {
        to_grayscale(&mut img);
    }
    if let Some(sigma) = draw.blur_sigma {
        gaussian_blur(&mut img, sigma);
    }
    let stats = &policy.normalization;
    let side = draw.out_side;
    let mut out = Array3::<S>::zeros((3, side, side));
    for ch in 0..3 {
        let mean = stats.mean[ch];
        let std = stats.std[ch];
        for y in 0..side {
            for x in 0..side {
                out[[ch, y, x]] = S::cast((img.get(y, x, ch) - mean) / std);
            }
        }
    }
    Ok(out)
}

/// Draw + render under the weak pipeline.
pub fn weak_augment<S: Scalar>(
    pixels: &[u8],
    src_h: usize,
    src_w: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<S>> {
    if policy.kind != PolicyKind::Weak {
        return Err(Error::Config(format!(
            "weak_augment requires a weak policy, got {:?}",
            policy.kind
        )));
    }
    let draw = draw_augment(policy, src_h, src_w, rng);
    render_view(pixels, src_h, src_w, policy, &draw)
}

/// Draw + render under the contrastive pipeline.
pub fn contrastive_augment<S: Scalar>(
    pixels: &[u8],
    src_h: usize,
    src_w: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<S>> {
    if policy.kind == PolicyKind::Weak {
        return Err(Error::Config(
            "contrastive_augment requires a contrastive or multi-crop policy".into(),
        ));
    }
    let draw = draw_augment(policy, src_h, src_w, rng);
    render_view(pixels, src_h, src_w, policy, &draw)
}

/// One teacher view plus one student view per crop side, all from the
/// same source image.
#[derive(Debug, Clone)]
pub struct ViewPair<S: Scalar> {
    pub teacher_view: Array3<S>,
    pub student_views: Vec<Array3<S>>,
    pub source_id: u32,
}

/// Random stream for one (policy, crop slot, epoch, sample) view.
/// Distinct policy sub-seeds keep teacher and student streams apart.
#[must_use]
pub fn view_rng(
    seed: u64,
    policy_seed: u64,
    crop_index: u64,
    epoch: u64,
    sample_id: u32,
) -> ChaCha8Rng {
    derive_rng(
        seed,
        "augment-view",
        &[policy_seed, crop_index, epoch, u64::from(sample_id)],
    )
}

/// Generates the teacher view (canonical side) and the student crop
/// ladder. `crop_sides` must be nonempty; its first entry is the
/// canonical side used for the teacher view.
#[allow(clippy::too_many_arguments)]
pub fn make_view_pair<S: Scalar>(
    pixels: &[u8],
    src_h: usize,
    src_w: usize,
    source_id: u32,
    teacher_policy: &AugmentationPolicy,
    student_policy: &AugmentationPolicy,
    crop_sides: &[usize],
    seed: u64,
    epoch: u64,
) -> Result<ViewPair<S>> {
    if crop_sides.is_empty() {
        return Err(Error::Config("crop_sides must be nonempty".into()));
    }
    let canonical = crop_sides[0];
    let mut teacher = teacher_policy.clone();
    teacher.output_side = canonical;
    // The teacher owns crop slot 0 of its policy stream; student rungs
    // start at slot 1 so the streams stay distinct even when both sides
    // run the same policy (contrastive-teacher ablation).
    let mut rng = view_rng(seed, teacher.rng_seed, 0, epoch, source_id);
    let teacher_view = match teacher.kind {
        PolicyKind::Weak => weak_augment(pixels, src_h, src_w, &teacher, &mut rng)?,
        _ => contrastive_augment(pixels, src_h, src_w, &teacher, &mut rng)?,
    };

    let mut student_views = Vec::with_capacity(crop_sides.len());
    for (ci, &side) in crop_sides.iter().enumerate() {
        let mut pol = student_policy.clone();
        pol.output_side = side;
        let mut rng = view_rng(seed, pol.rng_seed, ci as u64 + 1, epoch, source_id);
        student_views.push(contrastive_augment(pixels, src_h, src_w, &pol, &mut rng)?);
    }
    Ok(ViewPair {
        teacher_view,
        student_views,
        source_id,
    })
}

/// Deterministic evaluation view: full image resized to `out_side`,
/// standardized. Used by feature extraction and nearest-neighbor eval.
pub fn eval_view<S: Scalar>(
    pixels: &[u8],
    src_h: usize,
    src_w: usize,
    out_side: usize,
    stats: &NormStats,
) -> Result<Array3<S>> {
    let policy = AugmentationPolicy::weak(out_side, *stats);
    let draw = AugmentDraw::identity(src_h, src_w, out_side);
    render_view(pixels, src_h, src_w, &policy, &draw)
}

/// Stacks same-shape CHW views into an NCHW batch.
pub fn stack_views<S: Scalar>(views: &[Array3<S>]) -> Result<Array4<S>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero views".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::<S>::zeros((views.len(), c, h, w));
    for (i, v) in views.iter().enumerate() {
        if v.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "view {i} has shape {:?}, expected {:?}",
                v.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(v);
    }
    Ok(out)
}
