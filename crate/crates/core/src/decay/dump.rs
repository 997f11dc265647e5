//! Plain-text and PGM renderings of decay masks.
//!
//! Text blocks start with a header line
//! `# variant=<name> B=<b> N=<n> H=<h> W=<w> alpha=<a>` (per-axis blocks
//! append `axis=<width|height> line=<k>`), followed by one line of
//! space-separated values per matrix row.

use std::fmt::Write as _;
use std::io::{self, Write};

use super::Axis;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskHeader {
    pub variant: String,
    pub batch: usize,
    pub head: usize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    pub axis: Option<(Axis, usize)>,
}

impl MaskHeader {
    pub fn line(&self) -> String {
        let mut s = format!(
            "# variant={} B={} N={} H={} W={} alpha={}",
            self.variant, self.batch, self.head, self.height, self.width, self.alpha
        );
        if let Some((axis, line)) = self.axis {
            let name = match axis {
                Axis::Width => "width",
                Axis::Height => "height",
            };
            let _ = write!(s, " axis={name} line={line}");
        }
        s
    }

    fn parse(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::invalid("parse_mask", format!("not a header: {line}")))?;
        let mut h = MaskHeader {
            variant: String::new(),
            batch: 0,
            head: 0,
            height: 0,
            width: 0,
            alpha: 0.0,
            axis: None,
        };
        let mut axis = None;
        let mut axis_line = None;
        let bad = |k: &str, v: &str| Error::invalid("parse_mask", format!("bad value `{v}` for `{k}`"));
        for kv in body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid("parse_mask", format!("malformed field `{kv}`")))?;
            match k {
                "variant" => h.variant = v.to_string(),
                "B" => h.batch = v.parse().map_err(|_| bad(k, v))?,
                "N" => h.head = v.parse().map_err(|_| bad(k, v))?,
                "H" => h.height = v.parse().map_err(|_| bad(k, v))?,
                "W" => h.width = v.parse().map_err(|_| bad(k, v))?,
                "alpha" => h.alpha = v.parse().map_err(|_| bad(k, v))?,
                "axis" => {
                    axis = Some(match v {
                        "width" => Axis::Width,
                        "height" => Axis::Height,
                        _ => return Err(bad(k, v)),
                    })
                }
                "line" => axis_line = Some(v.parse().map_err(|_| bad(k, v))?),
                _ => return Err(Error::invalid("parse_mask", format!("unknown header key `{k}`"))),
            }
        }
        h.axis = match (axis, axis_line) {
            (Some(a), Some(l)) => Some((a, l)),
            (None, None) => None,
            _ => return Err(Error::invalid("parse_mask", "axis and line must appear together")),
        };
        Ok(h)
    }
}

/// Writes a square matrix (rank-2 tensor) under `header`.
pub fn write_block<T: Scalar>(out: &mut impl Write, header: &MaskHeader, matrix: &Tensor<T>) -> io::Result<()> {
    writeln!(out, "{}", header.line())?;
    let cols = matrix.shape().last().copied().unwrap_or(1);
    let mut row = String::new();
    for chunk in matrix.data().chunks(cols) {
        row.clear();
        for (k, v) in chunk.iter().enumerate() {
            if k > 0 {
                row.push(' ');
            }
            let _ = write!(row, "{v}");
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Parses every block of a dump file back into `(header, matrix)` pairs.
pub fn parse_blocks(text: &str) -> Result<Vec<(MaskHeader, Tensor<f64>)>> {
    let mut blocks = Vec::new();
    let mut current: Option<(MaskHeader, Vec<f64>, usize, usize)> = None;
    let finish = |cur: Option<(MaskHeader, Vec<f64>, usize, usize)>, blocks: &mut Vec<_>| -> Result<()> {
        if let Some((h, data, rows, cols)) = cur {
            if rows == 0 {
                return Err(Error::invalid("parse_mask", "header without rows"));
            }
            blocks.push((h, Tensor::new(vec![rows, cols], data)?));
        }
        Ok(())
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with('#') {
            finish(current.take(), &mut blocks)?;
            current = Some((MaskHeader::parse(line)?, Vec::new(), 0, 0));
            continue;
        }
        let Some((_, data, rows, cols)) = current.as_mut() else {
            return Err(Error::invalid("parse_mask", "values before first header"));
        };
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse().map_err(|_| Error::invalid("parse_mask", format!("bad number `{tok}`")))?);
        }
        let width = data.len() - before;
        if *rows > 0 && width != *cols {
            return Err(Error::invalid("parse_mask", "ragged rows"));
        }
        *cols = width;
        *rows += 1;
    }
    finish(current, &mut blocks)?;
    Ok(blocks)
}

/// 8-bit binary PGM; `[min, 0]` maps linearly onto `[0, 255]`.
pub fn write_pgm<T: Scalar>(out: &mut impl Write, matrix: &Tensor<T>) -> io::Result<()> {
    let (rows, cols) = match matrix.shape() {
        [r, c] => (*r, *c),
        s => return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("pgm needs a matrix, got {s:?}"))),
    };
    let min = matrix.data().iter().fold(0.0f64, |m, v| m.min(v.as_f64()));
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = matrix
        .data()
        .iter()
        .map(|v| {
            if min == 0.0 {
                255
            } else {
                let t = ((v.as_f64() - min) / -min).clamp(0.0, 1.0);
                (t * 255.0).round() as u8
            }
        })
        .collect();
    out.write_all(&pixels)
}
