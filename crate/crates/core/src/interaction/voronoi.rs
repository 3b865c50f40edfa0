use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Seed;

/// Value every pixel takes when a polarity has no seeds; also the truncation
/// point applied before scaling distances into `[0, 1]` for the network.
pub const VORONOI_SATURATION: f64 = 255.0;

/// Per-pixel Euclidean distance to the nearest seed of one polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> VoronoiMap<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    /// Distances truncated at the saturation constant and scaled into `[0, 1]`.
    pub fn normalized(&self) -> impl Iterator<Item = T> + '_ {
        let sat = T::from_f64_lossy(VORONOI_SATURATION);
        self.values.iter().map(move |&v| v.min(sat) / sat)
    }

    /// 8-bit preview, one gray level per pixel of distance.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| v.to_f64_lossy().round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Lower envelope of parabolas for one line. `f` holds squared distances
/// (`None` = no site), `out` receives the transformed values.
fn envelope_1d<T: Scalar>(f: &[Option<T>], out: &mut [Option<T>], v: &mut Vec<usize>, z: &mut Vec<T>) {
    v.clear();
    z.clear();
    let sq = |q: usize| T::from_usize_lossy(q * q);
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        let qt = T::from_usize_lossy(q);
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(T::neg_infinity());
                break;
            };
            let fp = f[p].expect("envelope holds sites only");
            let pt = T::from_usize_lossy(p);
            let s = ((fq + sq(q)) - (fp + sq(p))) / (T::from_f64_lossy(2.0) * (qt - pt));
            if s <= *z.last().expect("parallel to v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qt = T::from_usize_lossy(q);
        while k + 1 < v.len() && z[k + 1] < qt {
            k += 1;
        }
        let p = v[k];
        let d = qt - T::from_usize_lossy(p);
        *o = Some(d * d + f[p].expect("site"));
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site,
/// computed with one column pass and one row pass of the parabola envelope.
/// Returns `None` everywhere when there are no sites.
pub fn squared_distance_transform<T: Scalar>(
    width: usize,
    height: usize,
    is_site: impl Fn(usize, usize) -> bool,
) -> Vec<Option<T>> {
    let mut grid: Vec<Option<T>> = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            grid.push(is_site(x, y).then(T::zero));
        }
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![None; height];
    let mut col_out = vec![None; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        envelope_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![None; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        envelope_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Distance map for one polarity's seed set; all pixels saturate when the set is empty.
pub fn compute_voronoi<T: Scalar>(seeds: &[Seed], width: usize, height: usize) -> Result<VoronoiMap<T>> {
    let mut site = vec![false; width * height];
    for s in seeds {
        if !s.in_bounds(width, height) {
            return Err(Error::SeedOutOfBounds {
                x: s.x,
                y: s.y,
                width,
                height,
            });
        }
        site[s.y * width + s.x] = true;
    }
    let sat = T::from_f64_lossy(VORONOI_SATURATION);
    let values = squared_distance_transform::<T>(width, height, |x, y| site[y * width + x])
        .into_iter()
        .map(|d| d.map_or(sat, |d| d.sqrt()))
        .collect();
    Ok(VoronoiMap { width, height, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_force(seeds: &[Seed], w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let d = seeds
                    .iter()
                    .map(|s| {
                        let dx = s.x as f64 - x as f64;
                        let dy = s.y as f64 - y as f64;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                out.push(d);
            }
        }
        out
    }

    #[test]
    fn single_seed_3x3() {
        let m = compute_voronoi::<f64>(&[Seed::positive(1, 1)], 3, 3).unwrap();
        let r2 = 2f64.sqrt();
        assert_eq!(m.values(), &[r2, 1.0, r2, 1.0, 0.0, 1.0, r2, 1.0, r2]);
    }

    #[test]
    fn two_seeds_in_a_row() {
        let seeds = [Seed::negative(0, 0), Seed::negative(2, 0)];
        let m = compute_voronoi::<f64>(&seeds, 3, 1).unwrap();
        assert_eq!(m.values(), brute_force(&seeds, 3, 1).as_slice());
        assert_eq!(m.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_set_saturates() {
        let m = compute_voronoi::<f32>(&[], 4, 2).unwrap();
        assert!(m.values().iter().all(|&v| v == 255.0));
        assert!(m.normalized().all(|v| v == 1.0));
    }

    #[test]
    fn out_of_bounds_seed() {
        assert!(matches!(
            compute_voronoi::<f64>(&[Seed::positive(3, 0)], 3, 3),
            Err(Error::SeedOutOfBounds { .. })
        ));
    }

    #[test]
    fn random_sets_match_brute_force() {
        let mut rng = super::super::rng_from(7);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let n = rng.random_range(1..=20);
            let seeds: Vec<_> = (0..n)
                .map(|_| Seed::positive(rng.random_range(0..w), rng.random_range(0..h)))
                .collect();
            let got = compute_voronoi::<f64>(&seeds, w, h).unwrap();
            for (a, b) in got.values().iter().zip(brute_force(&seeds, w, h)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
