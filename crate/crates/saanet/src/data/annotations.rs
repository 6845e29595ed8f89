//! Point-annotation files: one `x,y` or `x,y,box` line per head.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes annotations as CSV. When box sizes are given there must be exactly
/// one per point and each line gains a third column.
pub fn write_annotations(path: &Path, points: &[(f64, f64)], boxes: Option<&[f64]>) -> Result<()> {
    if let Some(b) = boxes {
        if b.len() != points.len() {
            return Err(Error::Contract(format!(
                "{} box sizes for {} points",
                b.len(),
                points.len()
            )));
        }
    }
    let mut text = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        match boxes {
            Some(b) => text.push_str(&format!("{x},{y},{}\n", b[i])),
            None => text.push_str(&format!("{x},{y}\n")),
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a CSV annotation file. Box sizes are returned only when every line
/// carries one; a mix of 2- and 3-column lines is malformed.
pub fn read_annotations(path: &Path) -> Result<(Vec<(f64, f64)>, Option<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut boxes = Vec::new();
    let mut n_columns = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{}: expected x,y[,box], found {} fields",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        match n_columns {
            None => n_columns = Some(fields.len()),
            Some(n) if n != fields.len() => {
                return Err(Error::Parse(format!(
                    "{}:{}: inconsistent column count ({} after {})",
                    path.display(),
                    lineno + 1,
                    fields.len(),
                    n
                )))
            }
            _ => {}
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "{}:{}: malformed {what} value {s:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        points.push((parse(fields[0], "x")?, parse(fields[1], "y")?));
        if fields.len() == 3 {
            boxes.push(parse(fields[2], "box")?);
        }
    }
    Ok((points, (n_columns == Some(3)).then_some(boxes)))
}
