//! Synthetic filled ellipses and polygons on a contrasting noisy background.

use rand::{Rng, RngCore};

use crate::imagecore::{erode, BinaryMask, ImageRgb};

use super::rng_from;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSample {
    pub image: ImageRgb,
    pub mask: BinaryMask,
}

const NOISE: i32 = 24;
const MIN_COLOR_GAP: i32 = 180;
const ERODE_MARGIN: usize = 2;

fn ellipse(rng: &mut impl Rng, w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    let aspect = rng.random_range(0.6..1.0);
    let (a, b) = (r, r * aspect);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    BinaryMask::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn polygon(rng: &mut impl Rng, w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    let k = rng.random_range(3..=7);
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&t| {
            let rr = r * rng.random_range(0.7..1.0);
            (cx + rr * t.cos(), cy + rr * t.sin())
        })
        .collect();
    BinaryMask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64, y as f64);
        let mut inside = false;
        let mut j = verts.len() - 1;
        for i in 0..verts.len() {
            let (xi, yi) = verts[i];
            let (xj, yj) = verts[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    })
}

fn acceptable(mask: &BinaryMask) -> bool {
    let (w, h) = mask.dims();
    let touches_border = mask.pixels().any(|(x, y)| x == 0 || y == 0 || x + 1 == w || y + 1 == h);
    !touches_border && mask.get(w / 2, h / 2) && !erode(mask, ERODE_MARGIN).is_empty()
}

fn random_color(rng: &mut impl Rng) -> [i32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0..256))
}

fn render(rng: &mut impl Rng, mask: &BinaryMask) -> ImageRgb {
    let fg = random_color(rng);
    let bg = loop {
        let c = random_color(rng);
        let gap: i32 = c.iter().zip(&fg).map(|(a, b)| (a - b).abs()).sum();
        if gap >= MIN_COLOR_GAP {
            break c;
        }
    };
    let (w, h) = mask.dims();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let base = if mask.get(x, y) { fg } else { bg };
            for c in base {
                let v = c + rng.random_range(-NOISE..=NOISE);
                data.push(v.clamp(0, 255) as u8);
            }
        }
    }
    ImageRgb::new(w, h, data).expect("buffer sized from mask")
}

fn one_sample(sample_seed: u64, width: usize, height: usize) -> ShapeSample {
    let mut rng = rng_from(sample_seed);
    let s = width.min(height) as f64;
    loop {
        let jitter = s / 16.0;
        let cx = width as f64 / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = height as f64 / 2.0 + rng.random_range(-jitter..=jitter);
        let r = s * rng.random_range(0.24..0.38);
        let mask = if rng.random_bool(0.5) {
            ellipse(&mut rng, width, height, cx, cy, r)
        } else {
            polygon(&mut rng, width, height, cx, cy, r)
        };
        if acceptable(&mask) {
            let image = render(&mut rng, &mask);
            return ShapeSample { image, mask };
        }
    }
}

/// Generates `count` image/mask pairs.
///
/// Every mask contains the image centre, stays clear of the image border and
/// survives a 2-pixel erosion. Sizes below 16 pixels are raised to 16.
pub fn gen_shapes_dataset(count: usize, width: usize, height: usize, rng_seed: u64) -> Vec<ShapeSample> {
    let (width, height) = (width.max(16), height.max(16));
    let mut master = rng_from(rng_seed);
    (0..count)
        .map(|_| one_sample(master.next_u64(), width, height))
        .collect()
}
