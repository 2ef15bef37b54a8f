//! CSV measure files, round-trip float formatting and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transport::DiscreteMeasure;

/// Relative deviation of the raw weight sum from 1 above which reading warns.
pub const RENORMALIZE_WARN: f64 = 1e-6;

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// A measure read from CSV, with the renormalization warning if one was issued.
#[derive(Debug, Clone)]
pub struct LoadedMeasure {
    pub measure: DiscreteMeasure,
    pub raw_total: f64,
    pub warning: Option<String>,
}

/// Parse `x,weight` (circle) or `x,y,weight` (torus) CSV text.
pub fn parse_measure(text: &str) -> Result<LoadedMeasure> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim: u8 = match cols.as_slice() {
        ["x", "weight"] => 1,
        ["x", "y", "weight"] => 2,
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header must be `x,weight` or `x,y,weight`, got `{header}`"),
            })
        }
    };
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim as usize + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let mut vals = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("`{f}`: {e}"),
            })?;
            if !vals[k].is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value `{f}`"),
                });
            }
        }
        let w = vals[dim as usize];
        if w < 0.0 {
            return Err(Error::NegativeWeight { line: lineno, value: w });
        }
        points.push(if dim == 1 { [vals[0], 0.0] } else { [vals[0], vals[1]] });
        weights.push(w);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let raw_total: f64 = crate::geometry::compensated_sum(weights.iter().copied());
    if !(raw_total > 0.0) {
        return Err(Error::Parse {
            line: 2,
            msg: "weights sum to zero".into(),
        });
    }
    let warning = ((raw_total - 1.0).abs() > RENORMALIZE_WARN).then(|| {
        let msg = format!("weights sum to {raw_total}; renormalized to 1");
        log::warn!("{msg}");
        msg
    });
    // weights already summing to 1 are kept bit-for-bit
    let measure = match DiscreteMeasure::new(dim, points.clone(), weights.clone()) {
        Ok(m) => m,
        Err(_) => DiscreteMeasure::normalized(dim, points, weights)?,
    };
    Ok(LoadedMeasure {
        measure,
        raw_total,
        warning,
    })
}

pub fn read_measure(path: &Path) -> Result<LoadedMeasure> {
    parse_measure(&fs::read_to_string(path)?)
}

pub fn format_measure(mu: &DiscreteMeasure) -> String {
    let mut out = String::from(if mu.dim() == 1 { "x,weight\n" } else { "x,y,weight\n" });
    for (p, w) in mu.points().iter().zip(mu.weights()) {
        if mu.dim() == 1 {
            out.push_str(&format!("{},{}\n", fmt_f64(p[0]), fmt_f64(*w)));
        } else {
            out.push_str(&format!("{},{},{}\n", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*w)));
        }
    }
    out
}

pub fn write_measure(path: &Path, mu: &DiscreteMeasure) -> Result<()> {
    write_atomic(path, format_measure(mu).as_bytes())
}
