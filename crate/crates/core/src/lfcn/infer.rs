//! Click-driven inference on images of arbitrary size.

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, ImageRgb};
use crate::interaction::{compute_voronoi, split_by_polarity, Seed};
use crate::scalar::Scalar;

use super::{encode_input, predict_mask, Network, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<T> {
    /// `(1, H, W)` foreground probabilities.
    pub prob: Tensor<T>,
    pub mask: BinaryMask,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

// Edge replication keeps padded pixels looking like their neighbours.
fn pad_image(image: &ImageRgb, pw: usize, ph: usize) -> ImageRgb {
    let (w, h) = image.dims();
    if (w, h) == (pw, ph) {
        return image.clone();
    }
    let mut data = Vec::with_capacity(pw * ph * 3);
    for y in 0..ph {
        for x in 0..pw {
            data.extend_from_slice(&image.pixel(x.min(w - 1), y.min(h - 1)));
        }
    }
    ImageRgb::new(pw, ph, data).expect("padded size is non-zero")
}

/// Runs `net` on `image` with the given clicks and thresholds the result.
///
/// The image is padded on the right and bottom up to the network's input
/// multiple; click maps are computed on the padded grid and the output is
/// cropped back.
pub fn segment<T: Scalar>(
    net: &Network<T>,
    image: &ImageRgb,
    seeds: &[Seed],
    threshold: f64,
) -> Result<Segmentation<T>> {
    let (w, h) = image.dims();
    if let Some(s) = seeds.iter().find(|s| !s.in_bounds(w, h)) {
        return Err(Error::SeedOutOfBounds {
            x: s.x,
            y: s.y,
            width: w,
            height: h,
        });
    }
    let m = net.config().input_multiple();
    let (pw, ph) = (round_up(w, m), round_up(h, m));
    let padded = pad_image(image, pw, ph);
    let (pos, neg) = split_by_polarity(seeds);
    let input = encode_input(
        &padded,
        &compute_voronoi(&pos, pw, ph)?,
        &compute_voronoi(&neg, pw, ph)?,
    )?;
    let full = net.forward(&input)?;
    let prob = if (pw, ph) == (w, h) {
        full
    } else {
        let src = full.data();
        let data = (0..h).flat_map(|y| src[y * pw..y * pw + w].iter().copied()).collect();
        Tensor::from_vec(&[1, h, w], data)?
    };
    let mask = predict_mask(&prob, threshold)?;
    Ok(Segmentation { prob, mask })
}
