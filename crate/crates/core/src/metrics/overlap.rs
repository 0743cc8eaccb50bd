use super::mask::BinaryMask;
use crate::error::Result;

/// Dice similarity `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        np += p as usize;
        ng += g as usize;
        inter += (p & g) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}
