//! Linear resampling of score vectors and square score maps.

use crate::error::{Error, Result};

/// Pixel alignment used when mapping output samples onto source coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Align {
    /// Output sample `k` reads source coordinate `(k + 0.5)·n/m − 0.5`.
    #[default]
    Centers,
    /// First and last samples of input and output coincide.
    Corners,
}

impl std::str::FromStr for Align {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centers" => Ok(Align::Centers),
            "corners" => Ok(Align::Corners),
            other => Err(Error::Validation(format!("unknown alignment {other:?}"))),
        }
    }
}

fn source_coord(k: usize, n: usize, m: usize, align: Align) -> f64 {
    let x = match align {
        Align::Centers => (k as f64 + 0.5) * n as f64 / m as f64 - 0.5,
        Align::Corners if m == 1 => 0.0,
        Align::Corners => k as f64 * (n - 1) as f64 / (m - 1) as f64,
    };
    x.clamp(0.0, (n - 1) as f64)
}

/// Resamples `v` to length `m` by linear interpolation.
pub fn resize_linear(v: &[f64], m: usize, align: Align) -> Result<Vec<f64>> {
    let n = v.len();
    if n == 0 || m == 0 {
        return Err(Error::contract(format!("resize needs n >= 1 and m >= 1, got {n} -> {m}")));
    }
    if n == m {
        return Ok(v.to_vec());
    }
    Ok((0..m)
        .map(|k| {
            let x = source_coord(k, n, m, align);
            let i0 = x.floor() as usize;
            let frac = x - i0 as f64;
            if i0 + 1 >= n || frac == 0.0 {
                v[i0]
            } else {
                // exact for constant neighbourhoods
                v[i0] + (v[i0 + 1] - v[i0]) * frac
            }
        })
        .collect())
}

/// Resamples a row-major `rows × cols` matrix along its rows (each row becomes
/// length `new_cols`).
fn resize_cols(map: &[f64], rows: usize, cols: usize, new_cols: usize, align: Align) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows * new_cols);
    for r in 0..rows {
        out.extend(resize_linear(&map[r * cols..(r + 1) * cols], new_cols, align)?);
    }
    Ok(out)
}

fn transpose(map: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = map[r * cols + c];
        }
    }
    out
}

/// Resizes a square `d × d` map to `d_new × d_new`, interpolating along rows
/// and then along columns.
pub fn resize_bilinear_map(map: &[f64], d: usize, d_new: usize, align: Align) -> Result<Vec<f64>> {
    if map.len() != d * d {
        return Err(Error::format(format!("map has {} values, expected {d}x{d}", map.len())));
    }
    if d == d_new {
        return Ok(map.to_vec());
    }
    let along_rows = resize_cols(map, d, d, d_new, align)?;
    let t = transpose(&along_rows, d, d_new);
    let both = resize_cols(&t, d_new, d, d_new, align)?;
    Ok(transpose(&both, d_new, d_new))
}

/// Same as [`resize_bilinear_map`] with the axis order swapped.
pub fn resize_bilinear_map_cols_first(map: &[f64], d: usize, d_new: usize, align: Align) -> Result<Vec<f64>> {
    let t = transpose(map, d, d);
    Ok(transpose(&resize_bilinear_map(&t, d, d_new, align)?, d_new, d_new))
}
