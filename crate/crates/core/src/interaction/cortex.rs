//! Morphological cortex detection: the ring of pixels at an exact chessboard
//! distance from a region, walked into an ordered path, then sampled uniformly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imagecore::{dilate, subtract, BinaryMask};

use super::{rng_from, Seed};

/// Clockwise on screen, starting east; the walk breaks ties in this order.
const NEIGHBOURS: [(isize, isize); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// A run of ring pixels in which consecutive entries are 8-neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CortexPath {
    pub level: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl CortexPath {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// True when the last pixel is an 8-neighbour of the first.
    pub fn is_closed(&self) -> bool {
        match (self.pixels.first(), self.pixels.last()) {
            (Some(a), Some(b)) if self.pixels.len() > 2 => a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1,
            _ => false,
        }
    }
}

/// The full traversal of one ring. A single connected ring usually yields one
/// path; clipped or multi-component rings yield several, in discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cortex {
    pub level: usize,
    pub paths: Vec<CortexPath>,
}

impl Cortex {
    pub fn len(&self) -> usize {
        self.paths.iter().map(CortexPath::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All paths concatenated into the 1-D array seeds are drawn from.
    pub fn flattened(&self) -> Vec<(usize, usize)> {
        self.paths.iter().flat_map(|p| p.pixels.iter().copied()).collect()
    }
}

/// Ring of pixels at chessboard distance exactly `level` from `mask`.
pub fn cortex_ring(mask: &BinaryMask, level: usize) -> Result<BinaryMask> {
    if level == 0 {
        return Err(Error::InvalidArgument("cortex level must be at least 1".into()));
    }
    let inner = dilate(mask, level - 1);
    subtract(&dilate(&inner, 1), &inner)
}

struct Walker<'a> {
    ring: &'a BinaryMask,
    visited: Vec<bool>,
}

impl Walker<'_> {
    fn neighbours(&self, (x, y): (usize, usize)) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        let (w, h) = self.ring.dims();
        NEIGHBOURS.iter().enumerate().filter_map(move |(i, &(dx, dy))| {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                return None;
            }
            let p = (nx as usize, ny as usize);
            self.ring.get(p.0, p.1).then_some((i, p))
        })
    }

    fn is_visited(&self, p: (usize, usize)) -> bool {
        self.visited[p.1 * self.ring.width() + p.0]
    }

    fn mark(&mut self, p: (usize, usize)) {
        let w = self.ring.width();
        self.visited[p.1 * w + p.0] = true;
    }

    fn open_degree(&self, p: (usize, usize)) -> usize {
        self.neighbours(p).filter(|&(_, q)| !self.is_visited(q)).count()
    }

    /// 8-connected component containing `start`, in breadth-first order.
    fn component(&self, start: (usize, usize)) -> Vec<(usize, usize)> {
        let w = self.ring.width();
        let mut seen = vec![false; self.visited.len()];
        let mut out = vec![start];
        seen[start.1 * w + start.0] = true;
        let mut head = 0;
        while head < out.len() {
            let cur = out[head];
            head += 1;
            for (_, q) in self.neighbours(cur) {
                if !seen[q.1 * w + q.0] {
                    seen[q.1 * w + q.0] = true;
                    out.push(q);
                }
            }
        }
        out.sort_by_key(|&(x, y)| (y, x));
        out
    }

    /// Greedy walk that always steps to the unvisited neighbour with the fewest
    /// onward options, preferring edge neighbours over diagonal ones.
    fn walk(&mut self, start: (usize, usize)) -> Vec<(usize, usize)> {
        let mut path = vec![start];
        self.mark(start);
        let mut cur = start;
        loop {
            let next = self
                .neighbours(cur)
                .filter(|&(_, q)| !self.is_visited(q))
                .min_by_key(|&(i, q)| (self.open_degree(q), i % 2, i))
                .map(|(_, q)| q);
            let Some(q) = next else { break };
            self.mark(q);
            path.push(q);
            cur = q;
        }
        path
    }
}

/// Traverses the ring `dilate(mask, level) - dilate(mask, level - 1)`.
///
/// Every ring pixel appears exactly once across the returned paths.
pub fn extract_cortex(mask: &BinaryMask, level: usize) -> Result<Cortex> {
    if mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let ring = cortex_ring(mask, level)?;
    if ring.is_empty() {
        return Err(Error::EmptyRing { level });
    }
    let mut walker = Walker {
        ring: &ring,
        visited: vec![false; ring.bits().len()],
    };
    let mut paths = Vec::new();
    for p in ring.pixels() {
        if walker.is_visited(p) {
            continue;
        }
        let members = walker.component(p);
        loop {
            // Open arcs start at an endpoint; closed rings start at their first pixel.
            let start = members
                .iter()
                .copied()
                .filter(|&q| !walker.is_visited(q))
                .min_by_key(|&q| walker.open_degree(q));
            let Some(start) = start else { break };
            paths.push(CortexPath {
                level,
                pixels: walker.walk(start),
            });
        }
    }
    Ok(Cortex { level, paths })
}

/// Negative seeds drawn from one cortex level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McdSelection {
    pub level: usize,
    pub path_len: usize,
    pub rotation: usize,
    /// Positions in the flattened cortex array, in selection order.
    pub indices: Vec<usize>,
    pub seeds: Vec<Seed>,
}

/// Picks `n` pixels at stride `L / n` along the flattened cortex, shifted by `rotation`.
pub fn mcd_level(mask: &BinaryMask, n: usize, level: usize, rotation: usize) -> Result<McdSelection> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "need at least one negative seed per level".into(),
        ));
    }
    let cortex = extract_cortex(mask, level)?;
    Ok(select_uniform(&cortex, n, rotation))
}

fn select_uniform(cortex: &Cortex, n: usize, rotation: usize) -> McdSelection {
    let flat = cortex.flattened();
    let len = flat.len();
    let mut indices: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let idx = (i * len / n + rotation) % len;
        // Only repeats when n exceeds the ring length.
        if !indices.contains(&idx) {
            indices.push(idx);
        }
    }
    let seeds = indices.iter().map(|&i| Seed::negative(flat[i].0, flat[i].1)).collect();
    McdSelection {
        level: cortex.level,
        path_len: len,
        rotation,
        indices,
        seeds,
    }
}

/// One uniform selection per level, each with an rng-derived rotation.
pub fn mcd_selections(mask: &BinaryMask, n: usize, levels: &[usize], rng_seed: u64) -> Result<Vec<McdSelection>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "need at least one negative seed per level".into(),
        ));
    }
    let mut rng = rng_from(rng_seed);
    levels
        .iter()
        .map(|&level| {
            let cortex = extract_cortex(mask, level)?;
            let rotation = rng.random_range(0..cortex.len());
            Ok(select_uniform(&cortex, n, rotation))
        })
        .collect()
}

/// Uniformly spaced negative seeds around `mask`, `n` per cortex level.
pub fn mcd_negative_seeds(mask: &BinaryMask, n: usize, levels: &[usize], rng_seed: u64) -> Result<Vec<Seed>> {
    Ok(mcd_selections(mask, n, levels, rng_seed)?
        .into_iter()
        .flat_map(|s| s.seeds)
        .collect())
}
