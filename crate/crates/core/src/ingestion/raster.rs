//! Annotation geometry to pixel masks.
//!
//! Polygons fill by the even-odd rule tested at pixel centers, so a pixel
//! (x, y) is inside when the point (x+0.5, y+0.5) is. Integer-valued
//! polygon coordinates therefore never land on a pixel center and the
//! fill is unambiguous. Multiple rings share one parity test, which makes
//! holes work without any winding convention.

use crate::error::{Error, Result};
use crate::util::BitMask;

/// Rasterizes a set of polygon rings, each a flat `[x0, y0, x1, y1, ..]`
/// list. Rejects rings with fewer than three vertices or odd length.
pub fn rasterize_polygons(rings: &[Vec<f64>], width: usize, height: usize) -> Result<BitMask> {
    if rings.is_empty() {
        return Err(Error::InvalidArgument("polygon annotation with no rings".into()));
    }
    let mut edges: Vec<[f64; 4]> = Vec::new();
    for ring in rings {
        if ring.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "polygon ring with odd coordinate count {}",
                ring.len()
            )));
        }
        let n = ring.len() / 2;
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "polygon ring with {n} vertices"
            )));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let (x0, y0) = (ring[2 * i], ring[2 * i + 1]);
            let (x1, y1) = (ring[2 * j], ring[2 * j + 1]);
            if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
                return Err(Error::InvalidArgument("non-finite polygon coordinate".into()));
            }
            edges.push([x0, y0, x1, y1]);
        }
    }

    let mut mask = BitMask::new(width, height);
    let mut crossings: Vec<f64> = Vec::new();
    for y in 0..height {
        let cy = y as f64 + 0.5;
        crossings.clear();
        for &[x0, y0, x1, y1] in &edges {
            // Half-open vertex rule: an edge covers cy when exactly one
            // endpoint lies strictly above it.
            if (y0 > cy) != (y1 > cy) {
                crossings.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Parity spans: [c0, c1), [c2, c3), ..
        for pair in crossings.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let lo = pair[0];
            let hi = pair[1];
            let x_start = (lo - 0.5).ceil().max(0.0) as usize;
            let x_end = ((hi - 0.5).floor() as isize).min(width as isize - 1);
            let mut x = x_start as isize;
            while x <= x_end {
                let cx = x as f64 + 0.5;
                if cx > lo && cx < hi {
                    mask.set(x as usize, y, true);
                }
                x += 1;
            }
        }
    }
    Ok(mask)
}

/// Fills an axis-aligned `[x, y, w, h]` box. A pixel belongs to the box
/// when its center does, so an integer-aligned w by h box covers exactly
/// w * h pixels.
pub fn rasterize_bbox(bbox: [f64; 4], width: usize, height: usize) -> Result<BitMask> {
    let [bx, by, bw, bh] = bbox;
    if !(bx.is_finite() && by.is_finite() && bw.is_finite() && bh.is_finite()) {
        return Err(Error::InvalidArgument("non-finite bbox".into()));
    }
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate bbox with size {bw}x{bh}"
        )));
    }
    let x0 = (bx - 0.5).ceil().max(0.0) as usize;
    let y0 = (by - 0.5).ceil().max(0.0) as usize;
    let x1 = ((bx + bw - 0.5).floor() as isize).min(width as isize - 1);
    let y1 = ((by + bh - 0.5).floor() as isize).min(height as isize - 1);
    let mut mask = BitMask::new(width, height);
    let mut y = y0 as isize;
    while y <= y1 {
        let mut x = x0 as isize;
        while x <= x1 {
            mask.set(x as usize, y as usize, true);
            x += 1;
        }
        y += 1;
    }
    Ok(mask)
}

/// Encodes a mask as disjoint axis-aligned rectangles, one polygon ring
/// each. Horizontal runs are merged vertically when they repeat in
/// consecutive rows. Because the rectangles never overlap, even-odd
/// filling their union reproduces the mask bit for bit, which keeps
/// arbitrary masks representable in the polygon schema.
pub fn mask_to_rect_polygons(mask: &BitMask) -> Vec<Vec<f64>> {
    let (w, h) = (mask.width(), mask.height());
    // Open rectangles from the previous row, keyed by (x0, x1).
    let mut open: Vec<(usize, usize, usize)> = Vec::new(); // (x0, x1, y0)
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut emit = |x0: usize, x1: usize, y0: usize, y1: usize| {
        out.push(vec![
            x0 as f64, y0 as f64, x1 as f64, y0 as f64, x1 as f64, y1 as f64, x0 as f64, y1 as f64,
        ]);
    };
    for y in 0..=h {
        let mut runs: Vec<(usize, usize)> = Vec::new(); // [x0, x1)
        if y < h {
            let mut x = 0;
            while x < w {
                if mask.get(x, y) {
                    let start = x;
                    while x < w && mask.get(x, y) {
                        x += 1;
                    }
                    runs.push((start, x));
                } else {
                    x += 1;
                }
            }
        }
        let mut next_open = Vec::with_capacity(runs.len());
        for &(x0, x1) in &runs {
            match open.iter().position(|&(ox0, ox1, _)| ox0 == x0 && ox1 == x1) {
                Some(i) => {
                    next_open.push(open.swap_remove(i));
                }
                None => next_open.push((x0, x1, y)),
            }
        }
        for (x0, x1, y0) in open.drain(..) {
            emit(x0, x1, y0, y);
        }
        open = next_open;
    }
    out
}
