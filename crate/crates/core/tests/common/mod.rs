//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsi_pipeline::aggregate::GroupedClass4;
use wsi_pipeline::annotations::TissueClass6;
use wsi_pipeline::classify::{FocalLossConfig, LinearModel};
use wsi_pipeline::ImageBuffer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, channels: u8) -> ImageBuffer {
    let data = (0..w * h * channels as usize).map(|_| rng.random::<u8>()).collect();
    ImageBuffer::new(w, h, channels, data).unwrap()
}

fn oracle_lanczos3(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= 3.0 {
        return 0.0;
    }
    let a = PI * x;
    let b = PI * x / 3.0;
    (a.sin() / a) * (b.sin() / b)
}

/// Direct 2-D Lanczos-3 resampling: every output pixel is the normalized
/// sum over the full 2-D footprint with replicated edges.
pub fn direct_resize(img: &ImageBuffer, out_w: usize, out_h: usize) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels() as usize);
    let rx = w as f64 / out_w as f64;
    let ry = h as f64 / out_h as f64;
    let (sx, sy) = (rx.max(1.0), ry.max(1.0));
    let mut out = vec![0u8; out_w * out_h * c];
    for oy in 0..out_h {
        let cy = (oy as f64 + 0.5) * ry - 0.5;
        let (y0, y1) = ((cy - 3.0 * sy).floor() as i64, (cy + 3.0 * sy).ceil() as i64);
        for ox in 0..out_w {
            let cx = (ox as f64 + 0.5) * rx - 0.5;
            let (x0, x1) = ((cx - 3.0 * sx).floor() as i64, (cx + 3.0 * sx).ceil() as i64);
            let mut acc = vec![0.0; c];
            let mut total = 0.0;
            for y in y0..=y1 {
                let wy = oracle_lanczos3((y as f64 - cy) / sy);
                let yy = y.clamp(0, h as i64 - 1) as usize;
                for x in x0..=x1 {
                    let wgt = wy * oracle_lanczos3((x as f64 - cx) / sx);
                    let xx = x.clamp(0, w as i64 - 1) as usize;
                    total += wgt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * img.pixel(xx, yy)[ch] as f64;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out[(oy * out_w + ox) * c + ch] = (a / total).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::new(out_w, out_h, img.channels(), out).unwrap()
}

pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> i32 {
    assert_eq!((a.width(), a.height(), a.channels()), (b.width(), b.height(), b.channels()));
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as i32 - *y as i32).abs()).max().unwrap_or(0)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

pub fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// A two-stain image built from Beer-Lambert mixing with known unit stain
/// vectors `[H, E]`: pure-H, pure-E and mixed pixels plus a white border.
/// Concentrations keep every channel above ~15, where 8-bit rounding of
/// optical density stays small.
pub struct TwoStainImage {
    pub image: ImageBuffer,
    pub stains: [[f64; 3]; 2],
}

pub fn two_stain_image(seed: u64, size: usize) -> TwoStainImage {
    let mut r = rng(seed);
    let mut jitter = |v: [f64; 3]| unit(v.map(|x: f64| (x + r.random_range(-0.08..0.08)).max(0.05)));
    let h = jitter([0.5626, 0.7201, 0.4062]);
    let e = jitter([0.2159, 0.8012, 0.5581]);
    let mut r = rng(seed ^ 0x5eed);
    let image = ImageBuffer::from_fn(size, size, |x, y| {
        if x < 4 || y < 4 {
            return [255, 255, 255];
        }
        let (ch, ce) = match r.random_range(0..4) {
            0 => (r.random_range(0.6..1.4), 0.0),
            1 => (0.0, r.random_range(0.8..1.4)),
            _ => (r.random_range(0.2..0.9), r.random_range(0.2..0.7)),
        };
        [0, 1, 2].map(|i| {
            let od = ch * h[i] + ce * e[i];
            (255.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
        })
    });
    TwoStainImage { image, stains: [h, e] }
}

/// A random linear model and labeled feature set.
pub struct GradInstance {
    pub model: LinearModel,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<TissueClass6>,
    pub cfg: FocalLossConfig,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(seed);
    let dim = r.random_range(1..6);
    let n = r.random_range(1..9);
    let mut model = LinearModel::zeros(dim);
    model.weights.iter_mut().flatten().for_each(|w| *w = r.random_range(-1.0..1.0));
    model.bias.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
    let xs = (0..n).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let ys = (0..n).map(|_| TissueClass6::from_code(r.random_range(0..6)).unwrap()).collect();
    let mut alpha = [0.0; 6];
    alpha.iter_mut().for_each(|a| *a = r.random_range(0.1..3.0));
    let cfg = FocalLossConfig { gamma: r.random_range(0.0..5.0), alpha };
    GradInstance { model, xs, ys, cfg }
}

/// Central finite-difference gradient of `f` over every weight and bias.
pub fn numeric_gradient(model: &LinearModel, f: impl Fn(&LinearModel) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::new();
    let dim = model.dim();
    for k in 0..6 {
        for i in 0..=dim {
            let bump = |d: f64| {
                let mut m = model.clone();
                if i < dim {
                    m.weights[k][i] += d;
                } else {
                    m.bias[k] += d;
                }
                f(&m)
            };
            out.push((bump(h) - bump(-h)) / (2.0 * h));
        }
    }
    out
}

/// Flattens a gradient model in the same order as [`numeric_gradient`].
pub fn flatten_gradient(g: &LinearModel) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..6 {
        out.extend_from_slice(&g.weights[k]);
        out.push(g.bias[k]);
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        return diff;
    }
    diff / (na + nb)
}

/// Plain mean cross-entropy via log-sum-exp.
pub fn cross_entropy(model: &LinearModel, xs: &[Vec<f64>], ys: &[TissueClass6]) -> f64 {
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let z: Vec<f64> =
            (0..6).map(|k| model.bias[k] + model.weights[k].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y.code()];
    }
    total / xs.len() as f64
}

/// Published per-class rows at 400 and 600 µm: (class, φ, accuracy,
/// sensitivity, specificity).
pub const PUBLISHED_ROWS: [(GroupedClass4, u32, f64, f64, f64); 6] = [
    (GroupedClass4::Hp, 400, 0.90, 0.80, 0.99),
    (GroupedClass4::Hp, 600, 0.92, 0.85, 0.99),
    (GroupedClass4::Lg, 400, 0.76, 0.73, 0.78),
    (GroupedClass4::Lg, 600, 0.71, 0.83, 0.59),
    (GroupedClass4::Hg, 400, 0.83, 0.78, 0.88),
    (GroupedClass4::Hg, 600, 0.70, 0.46, 0.93),
];

/// Row-normalized gray-scale slide confusion matrix at 600 µm, rows and
/// columns in HP, NORM, HG, LG order.
pub const GRAY_600_ROWS: [[f64; 4]; 4] =
    [[0.85, 0.0, 0.05, 0.1], [0.12, 0.75, 0.0, 0.12], [0.02, 0.0, 0.63, 0.35], [0.03, 0.09, 0.18, 0.7]];

/// Test-slide counts per grouped class (HP, NORM, HG, LG).
pub const TEST_SLIDES_4: [u64; 4] = [12, 5, 16, 39];

/// Integer counts per row by largest-remainder rounding of `fraction · n`,
/// so each row sums to its class count.
pub fn reconstruct_counts(rows: &[[f64; 4]; 4], totals: &[u64; 4]) -> [[u64; 4]; 4] {
    let mut counts = [[0u64; 4]; 4];
    for (r, row) in rows.iter().enumerate() {
        let exact: Vec<f64> = row.iter().map(|f| f * totals[r] as f64).collect();
        let mut cells: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = totals[r] - cells.iter().sum::<u64>();
        for &j in order.iter().take(missing as usize) {
            cells[j] += 1;
        }
        counts[r].copy_from_slice(&cells);
    }
    counts
}

/// Per-class slide and RoI counts of the published split: (train slides,
/// test slides, train RoIs, validation RoIs, test RoIs) in class-code order.
pub const PUBLISHED_SPLIT: [(usize, usize, usize, usize, usize); 6] = [
    (50, 12, 133, 5, 20),
    (25, 5, 98, 5, 9),
    (26, 8, 113, 5, 27),
    (203, 29, 695, 5, 77),
    (36, 8, 240, 5, 19),
    (45, 10, 208, 5, 32),
];
