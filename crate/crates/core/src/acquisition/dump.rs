use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{AcquisitionError, UncertaintyMap};
use crate::domain::PixelRef;

#[derive(serde::Serialize)]
struct Selected<'a> {
    image: &'a str,
    row: usize,
    col: usize,
    round: u32,
}

/// Writes `H W` on the first line, then one line of space-separated values
/// per row.
pub fn write_uncertainty_grid(path: impl AsRef<Path>, umap: &UncertaintyMap) -> Result<(), AcquisitionError> {
    let mut out = format!("{} {}\n", umap.height, umap.width);
    for row in umap.values.chunks(umap.width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_uncertainty_grid(path: impl AsRef<Path>, image_id: &str) -> Result<UncertaintyMap, AcquisitionError> {
    let text = fs::read_to_string(path)?;
    let bad = |m: &str| AcquisitionError::InvalidConfig(format!("malformed uncertainty grid: {m}"));
    let mut tokens = text.split_whitespace();
    let mut dim = || -> Result<usize, AcquisitionError> {
        tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("header"))
    };
    let (height, width) = (dim()?, dim()?);
    let values: Vec<f64> = text
        .lines()
        .skip(1)
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| bad(t)))
        .collect::<Result<_, _>>()?;
    if values.len() != height * width {
        return Err(bad("value count"));
    }
    Ok(UncertaintyMap { image_id: image_id.to_string(), height, width, values })
}

/// Appends selected coordinates as label-shaped JSON lines without a class.
pub fn write_selection_jsonl(path: impl AsRef<Path>, round: u32, picks: &[PixelRef]) -> Result<(), AcquisitionError> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for p in picks {
        let line = Selected { image: &p.image_id, row: p.row, col: p.col, round };
        writeln!(file, "{}", serde_json::to_string(&line).expect("plain struct serializes"))?;
    }
    Ok(())
}
