use std::fmt::Write;

use crate::autodiff::Tensor;
use crate::error::Result;

/// One line per row, comma-separated, full round-trip precision.
pub fn attention_csv(alpha: &Tensor) -> Result<String> {
    let (n, m) = alpha.dims2()?;
    let mut out = String::new();
    for i in 0..n {
        for j in 0..m {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", alpha.at2(i, j)).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary 8-bit PGM, min..max mapped linearly onto 0..255. A constant
/// matrix renders black.
pub fn attention_pgm(alpha: &Tensor) -> Result<Vec<u8>> {
    let (n, m) = alpha.dims2()?;
    let lo = alpha.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alpha.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{m} {n}\n255\n").into_bytes();
    out.extend(alpha.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}
