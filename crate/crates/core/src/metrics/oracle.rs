//! Brute-force surface distances: every pair of surface points is measured
//! directly. Quadratic, used only to cross-check the transform-based path.

use super::mask::BinaryMask;
use super::surface::extract_surface;

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|&q| {
            let dr = p.0 as f64 - q.0 as f64;
            let dc = p.1 as f64 - q.1 as f64;
            (dr * dr + dc * dc).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `(hd_um, msd_um)` with the same empty-mask conventions as the fast path.
pub fn brute_force_surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> (f64, f64) {
    let sp = extract_surface(pred);
    let sg = extract_surface(gt);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return (0.0, 0.0),
        (true, false) | (false, true) => {
            let d = gt.diagonal_um();
            return (d, d);
        }
        _ => {}
    }
    let forward: Vec<f64> = sp.iter().map(|&p| nearest(p, &sg)).collect();
    let backward: Vec<f64> = sg.iter().map(|&p| nearest(p, &sp)).collect();
    let hd = forward.iter().chain(&backward).copied().fold(0.0, f64::max);
    let msd = forward.iter().chain(&backward).sum::<f64>() / (forward.len() + backward.len()) as f64;
    (hd * pred.spacing_um(), msd * pred.spacing_um())
}

/// Dice from explicit set counts.
pub fn brute_force_dice(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let mut p = std::collections::BTreeSet::new();
    let mut g = std::collections::BTreeSet::new();
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            if pred.get(r, c) {
                p.insert((r, c));
            }
            if gt.get(r, c) {
                g.insert((r, c));
            }
        }
    }
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}
