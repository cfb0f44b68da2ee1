//! Transform space, sampling, and view generation.
//!
//! A sampled transform is fully described by a [`TransformDescriptor`]:
//! an ordered op list with every stochastic parameter bound. `apply` is a
//! pure function of (descriptor, image), so replaying a stored descriptor
//! reproduces the view bit-exactly.
//!
//! Stream discipline: `generate_views` derives one substream per
//! (instance id, view index) pair, so batch composition and iteration
//! order cannot change which transform an instance sees. Within one
//! descriptor the draw layout is fixed: parameters are drawn whether or
//! not their op's probability gate accepts.

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Area fraction interval for random resized crop, ⊂ (0, 1].
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    /// (brightness, contrast, saturation, hue) strengths.
    pub jitter_strengths: (f64, f64, f64, f64),
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_sigma: (f64, f64),
    pub blur_prob: f64,
    /// (n_ops, magnitude on the 0-30 scale); only the very-strong preset
    /// sets this.
    pub randaugment: Option<(usize, u32)>,
    /// Grid side length; only the very-strong preset sets this.
    pub jigsaw_grid: Option<usize>,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0,1]")));
            }
            Ok(())
        };
        prob("hflip", self.hflip_prob)?;
        prob("jitter", self.jitter_prob)?;
        prob("grayscale", self.grayscale_prob)?;
        prob("blur", self.blur_prob)?;
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (blo, bhi) = self.blur_sigma;
        if !(blo > 0.0 && blo <= bhi) {
            return Err(Error::Config(format!("blur_sigma ({blo}, {bhi}) must satisfy 0 < lo <= hi")));
        }
        let (b, c, s, h) = self.jitter_strengths;
        for (name, v) in [("brightness", b), ("contrast", c), ("saturation", s), ("hue", h)] {
            if v < 0.0 {
                return Err(Error::Config(format!("negative {name} jitter strength {v}")));
            }
        }
        if h > 0.5 {
            return Err(Error::Config(format!("hue strength {h} exceeds 0.5 (half the wheel)")));
        }
        if let Some((n, m)) = self.randaugment {
            if n < 1 || m > 30 {
                return Err(Error::Config(format!("randaugment ({n}, {m}) needs n >= 1, magnitude <= 30")));
            }
        }
        if let Some(g) = self.jigsaw_grid {
            if g < 2 {
                return Err(Error::Config(format!("jigsaw grid {g} must be >= 2")));
            }
        }
        Ok(())
    }

    /// Crop + horizontal flip only; the evaluation-time recipe.
    pub fn linear_eval() -> Self {
        AugmentationConfig {
            crop_scale: (0.2, 1.0),
            hflip_prob: 0.5,
            jitter_strengths: (0.0, 0.0, 0.0, 0.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            blur_prob: 0.0,
            randaugment: None,
            jigsaw_grid: None,
        }
    }
}

/// Named presets, CLI-visible. `strong` widens blur and expands the
/// brightness/contrast/saturation strengths by 0.4 (hue unchanged);
/// `very_strong` additionally enables RandAugment(2, 5) and 4x4 jigsaw.
pub fn preset(name: &str) -> Result<AugmentationConfig> {
    let default = AugmentationConfig {
        crop_scale: (0.2, 1.0),
        hflip_prob: 0.5,
        jitter_strengths: (0.4, 0.4, 0.4, 0.1),
        jitter_prob: 0.8,
        grayscale_prob: 0.2,
        blur_sigma: (0.1, 2.0),
        blur_prob: 0.5,
        randaugment: None,
        jigsaw_grid: None,
    };
    match name {
        "default" => Ok(default),
        "strong" => Ok(AugmentationConfig {
            blur_sigma: (0.2, 3.0),
            jitter_strengths: (0.8, 0.8, 0.8, 0.1),
            ..default
        }),
        "very_strong" => Ok(AugmentationConfig {
            blur_sigma: (0.2, 3.0),
            jitter_strengths: (0.8, 0.8, 0.8, 0.1),
            randaugment: Some((2, 5)),
            jigsaw_grid: Some(4),
            ..default
        }),
        other => Err(Error::Config(format!("unknown augmentation preset '{other}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformOp {
    /// Crop the rect and resize back to the source dimensions (bilinear).
    Crop { top: usize, left: usize, height: usize, width: usize },
    Hflip,
    Brightness { factor: f64 },
    /// Blend with the image's mean gray level.
    Contrast { factor: f64 },
    /// Blend with the per-pixel gray value.
    Saturation { factor: f64 },
    /// Rotate hue by `shift` of a full wheel, in [-0.5, 0.5].
    Hue { shift: f64 },
    Grayscale,
    Blur { sigma: f64 },
    AutoContrast,
    Equalize,
    Rotate { degrees: f64 },
    Solarize { threshold: f64 },
    Posterize { bits: u8 },
    Sharpness { factor: f64 },
    ShearX { factor: f64 },
    ShearY { factor: f64 },
    TranslateX { pixels: f64 },
    TranslateY { pixels: f64 },
    /// Permute grid cells; `perm[i]` is the source cell for slot i.
    Jigsaw { grid: usize, perm: Vec<u16> },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformDescriptor {
    pub ops: Vec<TransformOp>,
}

pub struct ViewBatch {
    /// K tensors of shape [B, C, H, W].
    pub views: Vec<Tensor>,
    /// descriptors[k][b] produced views[k] row b.
    pub descriptors: Vec<Vec<TransformDescriptor>>,
    pub source_ids: Vec<u64>,
}

/// Draw one transform for an image of the given (height, width).
///
/// The rng layout is fixed per config: every op's parameters are drawn
/// even when its probability gate rejects, so one op's acceptance never
/// shifts another op's draws.
pub fn sample_transform(
    cfg: &AugmentationConfig,
    dims: (usize, usize),
    stream: &StreamKey,
) -> Result<TransformDescriptor> {
    cfg.validate()?;
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("cannot transform empty image {h}x{w}")));
    }
    let mut rng = stream.rng();
    let mut ops = Vec::new();

    // random resized crop: scale, log-aspect, two offsets
    let (slo, shi) = cfg.crop_scale;
    let scale = slo + rng.random::<f64>() * (shi - slo);
    let logar = {
        let (a, b) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        a + rng.random::<f64>() * (b - a)
    };
    let (u_top, u_left) = (rng.random::<f64>(), rng.random::<f64>());
    let area = scale * (h as f64) * (w as f64);
    let ar = logar.exp();
    let mut cw = (area * ar).sqrt().round() as i64;
    let mut ch = (area / ar).sqrt().round() as i64;
    let (top, left) = if cw >= 1 && ch >= 1 && cw <= w as i64 && ch <= h as i64 {
        let top = (u_top * (h as f64 - ch as f64 + 1.0)).floor() as i64;
        let left = (u_left * (w as f64 - cw as f64 + 1.0)).floor() as i64;
        (top.clamp(0, h as i64 - ch), left.clamp(0, w as i64 - cw))
    } else {
        // fallback: largest centered rect with aspect clamped to the
        // sampled bound, as the reference crop implementation does
        let img_ar = w as f64 / h as f64;
        if img_ar < 3.0 / 4.0 {
            cw = w as i64;
            ch = ((w as f64) / (3.0 / 4.0)).round() as i64;
        } else if img_ar > 4.0 / 3.0 {
            ch = h as i64;
            cw = ((h as f64) * (4.0 / 3.0)).round() as i64;
        } else {
            cw = w as i64;
            ch = h as i64;
        }
        ((h as i64 - ch) / 2, (w as i64 - cw) / 2)
    };
    ops.push(TransformOp::Crop {
        top: top as usize,
        left: left as usize,
        height: ch as usize,
        width: cw as usize,
    });

    let flip = rng.random::<f64>() < cfg.hflip_prob;
    if flip {
        ops.push(TransformOp::Hflip);
    }

    // jitter: gate, component order (Fisher-Yates), four factors
    let jitter_on = rng.random::<f64>() < cfg.jitter_prob;
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = (rng.random::<f64>() * (i as f64 + 1.0)).floor() as usize;
        order.swap(i, j.min(i));
    }
    let (sb, sc, ss, sh) = cfg.jitter_strengths;
    let fb = uniform_factor(&mut rng, sb);
    let fc = uniform_factor(&mut rng, sc);
    let fs = uniform_factor(&mut rng, ss);
    let hue = (rng.random::<f64>() * 2.0 - 1.0) * sh;
    if jitter_on {
        for comp in order {
            match comp {
                0 if sb > 0.0 => ops.push(TransformOp::Brightness { factor: fb }),
                1 if sc > 0.0 => ops.push(TransformOp::Contrast { factor: fc }),
                2 if ss > 0.0 => ops.push(TransformOp::Saturation { factor: fs }),
                3 if sh > 0.0 => ops.push(TransformOp::Hue { shift: hue }),
                _ => {}
            }
        }
    }

    if rng.random::<f64>() < cfg.grayscale_prob {
        ops.push(TransformOp::Grayscale);
    }

    let blur_on = rng.random::<f64>() < cfg.blur_prob;
    let (blo, bhi) = cfg.blur_sigma;
    let sigma = blo + rng.random::<f64>() * (bhi - blo);
    if blur_on {
        ops.push(TransformOp::Blur { sigma });
    }

    if let Some((n_ops, mag)) = cfg.randaugment {
        for _ in 0..n_ops {
            let idx = (rng.random::<f64>() * 14.0).floor() as usize;
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            ops.push(randaugment_op(idx.min(13), mag, sign, w));
        }
    }

    if let Some(grid) = cfg.jigsaw_grid {
        let cells = grid * grid;
        let mut perm: Vec<u16> = (0..cells as u16).collect();
        for i in (1..cells).rev() {
            let j = (rng.random::<f64>() * (i as f64 + 1.0)).floor() as usize;
            perm.swap(i, j.min(i));
        }
        ops.push(TransformOp::Jigsaw { grid, perm });
    }

    Ok(TransformDescriptor { ops })
}

fn uniform_factor(rng: &mut impl Rng, strength: f64) -> f64 {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    lo + rng.random::<f64>() * (hi - lo)
}

/// The standard 14-op table at the given magnitude (0-30 scale).
fn randaugment_op(idx: usize, mag: u32, sign: f64, width: usize) -> TransformOp {
    let m = mag as f64 / 30.0;
    match idx {
        0 => TransformOp::Identity,
        1 => TransformOp::AutoContrast,
        2 => TransformOp::Equalize,
        3 => TransformOp::Rotate { degrees: sign * 30.0 * m },
        4 => TransformOp::Solarize { threshold: 1.0 - m },
        5 => TransformOp::Saturation { factor: 1.0 + sign * 0.9 * m },
        6 => TransformOp::Posterize { bits: 8 - (4.0 * m).round() as u8 },
        7 => TransformOp::Contrast { factor: 1.0 + sign * 0.9 * m },
        8 => TransformOp::Brightness { factor: 1.0 + sign * 0.9 * m },
        9 => TransformOp::Sharpness { factor: 1.0 + sign * 0.9 * m },
        10 => TransformOp::ShearX { factor: sign * 0.3 * m },
        11 => TransformOp::ShearY { factor: sign * 0.3 * m },
        12 => TransformOp::TranslateX { pixels: sign * 0.45 * m * width as f64 },
        13 => TransformOp::TranslateY { pixels: sign * 0.45 * m * width as f64 },
        _ => unreachable!(),
    }
}

/// Generate K views of a [B, C, H, W] batch. Substream per (instance id,
/// view index): `stream.tag("instance").index(id).tag("view").index(k)`.
pub fn generate_views(
    images: &Tensor,
    source_ids: &[u64],
    k: usize,
    cfg: &AugmentationConfig,
    stream: &StreamKey,
) -> Result<ViewBatch> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::Input(format!("generate_views expects [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if b == 0 {
        return Err(Error::Input("generate_views: empty batch".into()));
    }
    if k < 1 {
        return Err(Error::Input("generate_views: K must be >= 1".into()));
    }
    if source_ids.len() != b {
        return Err(Error::Input(format!("{} source ids for batch of {b}", source_ids.len())));
    }
    let plane = c * h * w;
    let mut views = Vec::with_capacity(k);
    let mut descriptors = vec![Vec::with_capacity(b); k];
    let mut buffers = vec![vec![0.0f64; b * plane]; k];
    for (bi, &id) in source_ids.iter().enumerate() {
        let img = Tensor::from_vec(&[c, h, w], images.data()[bi * plane..(bi + 1) * plane].to_vec())?;
        let inst = stream.tag("instance").index(id).tag("view");
        for (vi, buf) in buffers.iter_mut().enumerate() {
            let desc = sample_transform(cfg, (h, w), &inst.index(vi as u64))?;
            let out = apply(&desc, &img)?;
            buf[bi * plane..(bi + 1) * plane].copy_from_slice(out.data());
            descriptors[vi].push(desc);
        }
    }
    for buf in buffers {
        views.push(Tensor::from_vec(&[b, c, h, w], buf)?);
    }
    Ok(ViewBatch { views, descriptors, source_ids: source_ids.to_vec() })
}

/// Replay a descriptor on a [C, H, W] image. Pure; bit-exact.
pub fn apply(desc: &TransformDescriptor, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!("apply expects [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = image.data().to_vec();
    for op in &desc.ops {
        img = apply_op(op, img, c, h, w)?;
        // every op maps [0,1] into itself mathematically; interpolation
        // rounding can overshoot by a ulp, so pin the range after each op
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[c, h, w], img)
}

fn apply_op(op: &TransformOp, img: Vec<f64>, c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    match op {
        TransformOp::Crop { top, left, height, width } => {
            if *height == 0 || *width == 0 || top + height > h || left + width > w {
                return Err(Error::Input(format!(
                    "crop rect {top},{left} {height}x{width} exceeds image {h}x{w}"
                )));
            }
            let mut cropped = vec![0.0; c * height * width];
            for ci in 0..c {
                for y in 0..*height {
                    let src = ci * h * w + (top + y) * w + left;
                    let dst = ci * height * width + y * width;
                    cropped[dst..dst + width].copy_from_slice(&img[src..src + *width]);
                }
            }
            Ok(bilinear_resize(&cropped, c, *height, *width, h, w))
        }
        TransformOp::Hflip => {
            let mut out = img;
            for ci in 0..c {
                for y in 0..h {
                    out[ci * h * w + y * w..ci * h * w + (y + 1) * w].reverse();
                }
            }
            Ok(out)
        }
        TransformOp::Brightness { factor } => {
            Ok(img.into_iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect())
        }
        TransformOp::Contrast { factor } => {
            require_rgb(c, "contrast")?;
            let gray = gray_plane(&img, h, w);
            let mean = gray.iter().sum::<f64>() / gray.len() as f64;
            Ok(img
                .into_iter()
                .map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
                .collect())
        }
        TransformOp::Saturation { factor } => {
            require_rgb(c, "saturation")?;
            let gray = gray_plane(&img, h, w);
            let mut out = img;
            for ci in 0..3 {
                for i in 0..h * w {
                    let v = out[ci * h * w + i];
                    out[ci * h * w + i] = (gray[i] + factor * (v - gray[i])).clamp(0.0, 1.0);
                }
            }
            Ok(out)
        }
        TransformOp::Hue { shift } => {
            require_rgb(c, "hue")?;
            let mut out = img;
            for i in 0..h * w {
                let (r, g, b) = (out[i], out[h * w + i], out[2 * h * w + i]);
                let (hh, ss, vv) = rgb_to_hsv(r, g, b);
                let (r2, g2, b2) = hsv_to_rgb((hh + shift).rem_euclid(1.0), ss, vv);
                out[i] = r2.clamp(0.0, 1.0);
                out[h * w + i] = g2.clamp(0.0, 1.0);
                out[2 * h * w + i] = b2.clamp(0.0, 1.0);
            }
            Ok(out)
        }
        TransformOp::Grayscale => {
            require_rgb(c, "grayscale")?;
            let gray = gray_plane(&img, h, w);
            let mut out = img;
            for ci in 0..3 {
                out[ci * h * w..(ci + 1) * h * w].copy_from_slice(&gray);
            }
            Ok(out)
        }
        TransformOp::Blur { sigma } => {
            if *sigma <= 0.0 {
                return Err(Error::Input(format!("blur sigma {sigma} must be positive")));
            }
            Ok(gaussian_blur(&img, c, h, w, *sigma))
        }
        TransformOp::AutoContrast => {
            let mut out = img;
            for ci in 0..c {
                let plane = &mut out[ci * h * w..(ci + 1) * h * w];
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in plane.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if hi > lo {
                    for v in plane.iter_mut() {
                        *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
                    }
                }
            }
            Ok(out)
        }
        TransformOp::Equalize => Ok(equalize(&img, c, h, w)),
        TransformOp::Rotate { degrees } => {
            let rad = degrees.to_radians();
            let (cos, sin) = (rad.cos(), rad.sin());
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            Ok(affine_sample(&img, c, h, w, |ox, oy| {
                let (dx, dy) = (ox - cx, oy - cy);
                (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
            }))
        }
        TransformOp::Solarize { threshold } => {
            Ok(img.into_iter().map(|v| if v >= *threshold { 1.0 - v } else { v }).collect())
        }
        TransformOp::Posterize { bits } => {
            if *bits == 0 || *bits > 8 {
                return Err(Error::Input(format!("posterize bits {bits} outside 1..=8")));
            }
            let keep = 8 - *bits;
            Ok(img
                .into_iter()
                .map(|v| {
                    let q = ((v.clamp(0.0, 1.0) * 255.0).floor() as u8 >> keep) << keep;
                    q as f64 / 255.0
                })
                .collect())
        }
        TransformOp::Sharpness { factor } => Ok(sharpness(&img, c, h, w, *factor)),
        TransformOp::ShearX { factor } => Ok(affine_sample(&img, c, h, w, |ox, oy| {
            (ox - factor * oy, oy)
        })),
        TransformOp::ShearY { factor } => Ok(affine_sample(&img, c, h, w, |ox, oy| {
            (ox, oy - factor * ox)
        })),
        TransformOp::TranslateX { pixels } => {
            Ok(affine_sample(&img, c, h, w, |ox, oy| (ox - pixels, oy)))
        }
        TransformOp::TranslateY { pixels } => {
            Ok(affine_sample(&img, c, h, w, |ox, oy| (ox, oy - pixels)))
        }
        TransformOp::Jigsaw { grid, perm } => {
            let g = *grid;
            if g < 2 || h % g != 0 || w % g != 0 {
                return Err(Error::Input(format!("jigsaw grid {g} does not divide image {h}x{w}")));
            }
            if perm.len() != g * g {
                return Err(Error::Input(format!(
                    "jigsaw permutation has {} entries for a {g}x{g} grid",
                    perm.len()
                )));
            }
            let mut seen = vec![false; g * g];
            for &p in perm {
                let p = p as usize;
                if p >= g * g || seen[p] {
                    return Err(Error::Input("jigsaw permutation is not a permutation".into()));
                }
                seen[p] = true;
            }
            let (ch_, cw_) = (h / g, w / g);
            let mut out = vec![0.0; img.len()];
            for ci in 0..c {
                for slot in 0..g * g {
                    let src = perm[slot] as usize;
                    let (sy, sx) = (src / g * ch_, src % g * cw_);
                    let (dy, dx) = (slot / g * ch_, slot % g * cw_);
                    for y in 0..ch_ {
                        let s = ci * h * w + (sy + y) * w + sx;
                        let d = ci * h * w + (dy + y) * w + dx;
                        out[d..d + cw_].copy_from_slice(&img[s..s + cw_]);
                    }
                }
            }
            Ok(out)
        }
        TransformOp::Identity => Ok(img),
    }
}

fn require_rgb(c: usize, what: &str) -> Result<()> {
    if c != 3 {
        return Err(Error::Input(format!("{what} needs a 3-channel image, got {c} channels")));
    }
    Ok(())
}

/// ITU-R 601 luma.
fn gray_plane(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    (0..n)
        .map(|i| 0.299 * img[i] + 0.587 * img[n + i] + 0.114 * img[2 * n + i])
        .collect()
}

fn bilinear_at(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    // zero fill outside the source extent
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Resize with the half-pixel-center convention; src == dst is the bitwise
/// identity.
fn bilinear_resize(src: &[f64], c: usize, sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * dh * dw];
    let (ry, rx) = (sh as f64 / dh as f64, sw as f64 / dw as f64);
    for ci in 0..c {
        let plane = &src[ci * sh * sw..(ci + 1) * sh * sw];
        for oy in 0..dh {
            let fy = ((oy as f64 + 0.5) * ry - 0.5).clamp(0.0, sh as f64 - 1.0);
            let y0 = fy.floor();
            let wy = fy - y0;
            let y1 = (y0 + 1.0).min(sh as f64 - 1.0);
            for ox in 0..dw {
                let fx = ((ox as f64 + 0.5) * rx - 0.5).clamp(0.0, sw as f64 - 1.0);
                let x0 = fx.floor();
                let wx = fx - x0;
                let x1 = (x0 + 1.0).min(sw as f64 - 1.0);
                let v00 = plane[y0 as usize * sw + x0 as usize];
                let v01 = plane[y0 as usize * sw + x1 as usize];
                let v10 = plane[y1 as usize * sw + x0 as usize];
                let v11 = plane[y1 as usize * sw + x1 as usize];
                out[ci * dh * dw + oy * dw + ox] =
                    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    out
}

/// Sample each output pixel at `inv(ox, oy)` in source coordinates.
fn affine_sample(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    inv: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = inv(ox as f64, oy as f64);
                out[ci * h * w + oy * w + ox] = bilinear_at(plane, h, w, sx, sy);
            }
        }
    }
    out
}

fn gaussian_blur(img: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * r + 1);
    for i in -(r as i64)..=(r as i64) {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let clamp = |v: i64, n: usize| -> usize { v.clamp(0, n as i64 - 1) as usize };
    let mut tmp = vec![0.0; img.len()];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        let out = &mut tmp[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as i64 + ki as i64 - r as i64, w);
                    acc += kv * plane[y * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
    }
    let mut result = vec![0.0; img.len()];
    for ci in 0..c {
        let plane = &tmp[ci * h * w..(ci + 1) * h * w];
        let out = &mut result[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as i64 + ki as i64 - r as i64, h);
                    acc += kv * plane[sy * w + x];
                }
                out[y * w + x] = acc;
            }
        }
    }
    result
}

/// Histogram equalization per channel on the 256-level quantization,
/// following the classic cumulative-LUT construction.
fn equalize(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        let mut hist = [0u64; 256];
        let q = |v: f64| -> usize { ((v.clamp(0.0, 1.0) * 255.0).floor() as usize).min(255) };
        for &v in plane {
            hist[q(v)] += 1;
        }
        let total: u64 = hist.iter().sum();
        let step = (total - hist[255]) / 255;
        let lut: Vec<u8> = if step == 0 {
            (0..=255).collect()
        } else {
            let mut lut = Vec::with_capacity(256);
            let mut n = step / 2;
            for &count in hist.iter() {
                lut.push(((n / step).min(255)) as u8);
                n += count;
            }
            lut
        };
        for (o, &v) in out[ci * h * w..(ci + 1) * h * w].iter_mut().zip(plane) {
            *o = lut[q(v)] as f64 / 255.0;
        }
    }
    out
}

/// Blend between a 3x3 smoothed image and the original; borders are kept
/// unchanged, as the classic filter does.
fn sharpness(img: &[f64], c: usize, h: usize, w: usize, factor: f64) -> Vec<f64> {
    if h < 3 || w < 3 {
        return img.to_vec();
    }
    let mut out = img.to_vec();
    let k = [1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 1.0, 1.0];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += k[dy * 3 + dx] * plane[(y + dy - 1) * w + (x + dx - 1)];
                    }
                }
                let smooth = acc / 13.0;
                let v = smooth + factor * (plane[y * w + x] - smooth);
                out[ci * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = StreamKey::root(seed).tag("img").rng();
        let v: Vec<f64> = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(&[c, h, w], v).unwrap()
    }

    #[test]
    fn preset_values() {
        let d = preset("default").unwrap();
        assert_eq!(d.blur_sigma, (0.1, 2.0));
        assert_eq!(d.jitter_strengths, (0.4, 0.4, 0.4, 0.1));
        assert_eq!(d.jitter_prob, 0.8);
        assert_eq!(d.grayscale_prob, 0.2);
        assert_eq!(d.blur_prob, 0.5);
        assert!(d.randaugment.is_none() && d.jigsaw_grid.is_none());

        let s = preset("strong").unwrap();
        assert_eq!(s.blur_sigma, (0.2, 3.0));
        assert_eq!(s.jitter_strengths, (0.8, 0.8, 0.8, 0.1));
        assert!(s.randaugment.is_none() && s.jigsaw_grid.is_none());

        let v = preset("very_strong").unwrap();
        assert_eq!(v.blur_sigma, (0.2, 3.0));
        assert_eq!(v.randaugment, Some((2, 5)));
        assert_eq!(v.jigsaw_grid, Some(4));

        assert!(matches!(preset("extreme"), Err(Error::Config(_))));
        for name in ["default", "strong", "very_strong"] {
            preset(name).unwrap().validate().unwrap();
        }
        AugmentationConfig::linear_eval().validate().unwrap();
    }

    #[test]
    fn same_stream_same_descriptor() {
        let cfg = preset("very_strong").unwrap();
        let key = StreamKey::root(99).tag("det");
        let a = sample_transform(&cfg, (16, 16), &key).unwrap();
        let b = sample_transform(&cfg, (16, 16), &key).unwrap();
        assert_eq!(a, b);
        let c = sample_transform(&cfg, (16, 16), &key.index(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_config_replays_as_identity() {
        let cfg = AugmentationConfig {
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            jitter_strengths: (0.0, 0.0, 0.0, 0.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            blur_prob: 0.0,
            randaugment: None,
            jigsaw_grid: None,
        };
        let img = test_image(1, 3, 12, 12);
        for i in 0..20 {
            let d = sample_transform(&cfg, (12, 12), &StreamKey::root(2).index(i)).unwrap();
            let out = apply(&d, &img).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn hflip_frequency_matches_probability() {
        let cfg = preset("default").unwrap();
        let key = StreamKey::root(7).tag("hflip-mc");
        let n = 10_000;
        let mut flips = 0;
        for i in 0..n {
            let d = sample_transform(&cfg, (16, 16), &key.index(i)).unwrap();
            if d.ops.iter().any(|o| matches!(o, TransformOp::Hflip)) {
                flips += 1;
            }
        }
        let freq = flips as f64 / n as f64;
        assert!(
            (freq - cfg.hflip_prob).abs() <= 0.02,
            "hflip frequency {freq} vs configured {}",
            cfg.hflip_prob
        );
    }

    fn crop_top(d: &TransformDescriptor) -> f64 {
        d.ops
            .iter()
            .find_map(|o| match o {
                TransformOp::Crop { top, .. } => Some(*top as f64),
                _ => None,
            })
            .unwrap()
    }

    #[test]
    fn paired_views_have_independent_crops() {
        let cfg = preset("default").unwrap();
        let key = StreamKey::root(8).tag("indep").tag("instance");
        let n = 10_000;
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n as u64 {
            let inst = key.index(i).tag("view");
            xs.push(crop_top(&sample_transform(&cfg, (32, 32), &inst.index(0)).unwrap()));
            ys.push(crop_top(&sample_transform(&cfg, (32, 32), &inst.index(1)).unwrap()));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&xs), mean(&ys));
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            cov += (xs[i] - mx) * (ys[i] - my);
            vx += (xs[i] - mx) * (xs[i] - mx);
            vy += (ys[i] - my) * (ys[i] - my);
        }
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r.abs() < 0.05, "crop offset correlation {r}");
    }

    #[test]
    fn view_batch_shapes_and_replay() {
        let mut rng = StreamKey::root(9).tag("batch").rng();
        let b = 8;
        let data: Vec<f64> = (0..b * 3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        let images = Tensor::from_vec(&[b, 3, 16, 16], data).unwrap();
        let ids: Vec<u64> = (100..100 + b as u64).collect();
        let cfg = preset("very_strong").unwrap();
        let vb = generate_views(&images, &ids, 4, &cfg, &StreamKey::root(9).tag("aug")).unwrap();
        assert_eq!(vb.views.len(), 4);
        assert_eq!(vb.descriptors.len(), 4);
        for v in &vb.views {
            assert_eq!(v.shape(), &[b, 3, 16, 16]);
        }
        for d in &vb.descriptors {
            assert_eq!(d.len(), b);
        }
        assert_eq!(vb.source_ids, ids);

        // replaying every stored descriptor reproduces the view bit-exactly
        let plane = 3 * 16 * 16;
        for (vi, view) in vb.views.iter().enumerate() {
            for bi in 0..b {
                let img = Tensor::from_vec(
                    &[3, 16, 16],
                    images.data()[bi * plane..(bi + 1) * plane].to_vec(),
                )
                .unwrap();
                let replay = apply(&vb.descriptors[vi][bi], &img).unwrap();
                let got = &view.data()[bi * plane..(bi + 1) * plane];
                for (x, y) in replay.data().iter().zip(got) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn batch_position_does_not_change_transforms() {
        let mut rng = StreamKey::root(10).tag("pos").rng();
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        let images = Tensor::from_vec(&[2, 3, 8, 8], data.clone()).unwrap();
        let cfg = preset("default").unwrap();
        let key = StreamKey::root(10).tag("aug");
        let fwd = generate_views(&images, &[5, 6], 2, &cfg, &key).unwrap();
        let mut swapped = data[3 * 8 * 8..].to_vec();
        swapped.extend_from_slice(&data[..3 * 8 * 8]);
        let rev = generate_views(&Tensor::from_vec(&[2, 3, 8, 8], swapped).unwrap(), &[6, 5], 2, &cfg, &key)
            .unwrap();
        for vi in 0..2 {
            assert_eq!(fwd.descriptors[vi][0], rev.descriptors[vi][1]);
            assert_eq!(fwd.descriptors[vi][1], rev.descriptors[vi][0]);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for preset_name in ["default", "strong", "very_strong"] {
            let cfg = preset(preset_name).unwrap();
            let img = test_image(11, 3, 16, 16);
            let key = StreamKey::root(11).tag(preset_name);
            for i in 0..40 {
                let d = sample_transform(&cfg, (16, 16), &key.index(i)).unwrap();
                let out = apply(&d, &img).unwrap();
                for &v in out.data() {
                    assert!((0.0..=1.0).contains(&v), "{preset_name}: pixel {v} out of range");
                }
            }
        }
    }

    #[test]
    fn jigsaw_needs_divisible_grid() {
        let img = test_image(12, 3, 15, 15);
        let d = TransformDescriptor {
            ops: vec![TransformOp::Jigsaw { grid: 4, perm: (0..16).collect() }],
        };
        assert!(matches!(apply(&d, &img), Err(Error::Input(_))));

        let img16 = test_image(12, 3, 16, 16);
        let bad = TransformDescriptor {
            ops: vec![TransformOp::Jigsaw { grid: 4, perm: vec![0; 16] }],
        };
        assert!(matches!(apply(&bad, &img16), Err(Error::Input(_))));
    }

    #[test]
    fn jigsaw_permutes_cells_exactly() {
        let img = test_image(13, 3, 8, 8);
        // swap the two top-left cells of a 2x2 grid
        let d = TransformDescriptor {
            ops: vec![TransformOp::Jigsaw { grid: 2, perm: vec![1, 0, 2, 3] }],
        };
        let out = apply(&d, &img).unwrap();
        let (h, w) = (8, 8);
        for ci in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = out.data()[ci * h * w + y * w + x];
                    let b = img.data()[ci * h * w + y * w + (x + 4)];
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn crop_replay_on_smaller_image_fails() {
        let d = TransformDescriptor {
            ops: vec![TransformOp::Crop { top: 4, left: 4, height: 10, width: 10 }],
        };
        let small = test_image(14, 3, 8, 8);
        assert!(matches!(apply(&d, &small), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = preset("default").unwrap();
        cfg.hflip_prob = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = preset("default").unwrap();
        cfg.crop_scale = (0.0, 1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = preset("default").unwrap();
        cfg.blur_sigma = (2.0, 1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = preset("default").unwrap();
        cfg.jitter_strengths.3 = 0.6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn linear_eval_uses_only_crop_and_flip() {
        let cfg = AugmentationConfig::linear_eval();
        let key = StreamKey::root(15).tag("lineval");
        for i in 0..50 {
            let d = sample_transform(&cfg, (16, 16), &key.index(i)).unwrap();
            for op in &d.ops {
                assert!(
                    matches!(op, TransformOp::Crop { .. } | TransformOp::Hflip),
                    "unexpected op {op:?} in linear-eval transform"
                );
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Tensor::from_vec(&[3, 8, 8], vec![0.37; 3 * 64]).unwrap();
        let d = TransformDescriptor { ops: vec![TransformOp::Blur { sigma: 1.3 }] };
        let out = apply(&d, &img).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_serializes_round_trip() {
        let cfg = preset("very_strong").unwrap();
        let d = sample_transform(&cfg, (16, 16), &StreamKey::root(16)).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: TransformDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
        let img = test_image(16, 3, 16, 16);
        let a = apply(&d, &img).unwrap();
        let b = apply(&back, &img).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sampled_transforms_keep_shape_and_range(seed in 0u64..100_000, hw in 8usize..=20) {
            let cfg = preset("strong").unwrap();
            let img = {
                let mut rng = StreamKey::root(seed).tag("prop-img").rng();
                let v: Vec<f64> = (0..3 * hw * hw).map(|_| rng.random::<f64>()).collect();
                Tensor::from_vec(&[3, hw, hw], v).unwrap()
            };
            let d = sample_transform(&cfg, (hw, hw), &StreamKey::root(seed).tag("prop-t")).unwrap();
            let out = apply(&d, &img).unwrap();
            prop_assert_eq!(out.shape(), &[3, hw, hw]);
            for &v in out.data() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
