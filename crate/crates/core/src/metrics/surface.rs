//! Surface extraction and surface distances (Hausdorff, mean surface
//! distance) computed through an exact squared Euclidean distance transform.

use super::mask::BinaryMask;
use crate::error::Result;

/// Foreground pixels that touch a 4-neighbour background pixel or the image
/// border, as `(row, col)` in raster order.
pub fn extract_surface(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let on_border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if on_border
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1)
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Squared distance from every pixel to the nearest seed, `None` when there
/// are no seeds. Separable lower-envelope-of-parabolas transform; all
/// arithmetic stays on integers representable in `f64`, so results are exact.
pub fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)]) -> Option<Vec<f64>> {
    if seeds.is_empty() {
        return None;
    }
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = grid[r * w + c];
        }
        lower_envelope(&buf_in[..h], &mut buf_out[..h]);
        for r in 0..h {
            grid[r * w + c] = buf_out[r];
        }
    }
    for r in 0..h {
        buf_in[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&buf_in[..w], &mut buf_out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    Some(grid)
}

// d[q] = min_p (q - p)^2 + f[p] over finite f[p]
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let dp = qf - p as f64;
        *out = dp * dp + f[p];
    }
}

/// Pixel distances from each point of `from` to the nearest point of `to`.
fn directed_distances(from: &[(usize, usize)], to_dt: &[f64], w: usize) -> Vec<f64> {
    from.iter().map(|&(r, c)| to_dt[r * w + c].sqrt()).collect()
}

/// Both directed distance lists (`P→G`, `G→P`) in pixels, or `None` when a
/// surface is empty.
fn surface_distance_lists(pred: &BinaryMask, gt: &BinaryMask) -> Option<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (pred.height(), pred.width());
    let sp = extract_surface(pred);
    let sg = extract_surface(gt);
    let dt_p = squared_distance_transform(h, w, &sp)?;
    let dt_g = squared_distance_transform(h, w, &sg)?;
    Some((directed_distances(&sp, &dt_g, w), directed_distances(&sg, &dt_p, w)))
}

enum Degenerate {
    BothEmpty,
    OneEmpty,
}

fn degenerate(pred: &BinaryMask, gt: &BinaryMask) -> Option<Degenerate> {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => Some(Degenerate::BothEmpty),
        (true, false) | (false, true) => Some(Degenerate::OneEmpty),
        _ => None,
    }
}

/// Symmetric Hausdorff distance between mask surfaces, in microns.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_grid(gt)?;
    match degenerate(pred, gt) {
        Some(Degenerate::BothEmpty) => return Ok(0.0),
        Some(Degenerate::OneEmpty) => return Ok(gt.diagonal_um()),
        None => {}
    }
    let (a, b) = surface_distance_lists(pred, gt).expect("non-empty masks have surfaces");
    let max = a.iter().chain(&b).copied().fold(0.0, f64::max);
    Ok(max * pred.spacing_um())
}

/// Mean of all nearest-surface distances in both directions, in microns.
pub fn mean_surface_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_grid(gt)?;
    match degenerate(pred, gt) {
        Some(Degenerate::BothEmpty) => return Ok(0.0),
        Some(Degenerate::OneEmpty) => return Ok(gt.diagonal_um()),
        None => {}
    }
    let (a, b) = surface_distance_lists(pred, gt).expect("non-empty masks have surfaces");
    // summed per direction so swapping the arguments gives the same bits
    let total = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    Ok(total / (a.len() + b.len()) as f64 * pred.spacing_um())
}
