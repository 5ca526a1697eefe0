//! XYZ structure files.
//!
//! ```text
//! 3
//! energy=-3 return=3
//! X 0.0 0.0 0.0
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::env::{Atom, Canvas};
use crate::error::{Error, Result};
use crate::oracle::ElementTable;
use crate::Vec3;

/// Structure with the values stored in the comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzRecord {
    pub canvas: Canvas,
    pub energy: Option<f64>,
    pub total_return: Option<f64>,
}

pub fn write_xyz(canvas: &Canvas, energy: f64, total_return: f64, table: &ElementTable) -> String {
    let mut out = format!("{}\nenergy={energy} return={total_return}\n", canvas.len());
    for a in canvas.atoms() {
        let p = a.position;
        let _ = writeln!(out, "{} {} {} {}", table.symbol(a.element), p.x, p.y, p.z);
    }
    out
}

pub fn parse_xyz(text: &str, source: &str, table: &ElementTable) -> Result<XyzRecord> {
    let mut lines = text.lines();
    let count: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::parse(source, 1, "expected the atom count"))?;
    let comment = lines.next().ok_or_else(|| Error::parse(source, 2, "missing comment line"))?;
    let mut energy = None;
    let mut total_return = None;
    for field in comment.split_whitespace() {
        let parsed = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::parse(source, 2, format!("bad number `{v}`")))
        };
        match field.split_once('=') {
            Some(("energy", v)) => energy = Some(parsed(v)?),
            Some(("return", v)) => total_return = Some(parsed(v)?),
            _ => {}
        }
    }
    let mut atoms = Vec::with_capacity(count);
    for (k, line) in lines.take(count).enumerate() {
        let n = k + 3;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::parse(source, n, "expected `SYMBOL x y z`"));
        }
        let element = table
            .lookup(fields[0])
            .map_err(|e| Error::parse(source, n, e.to_string()))?;
        let mut xyz = [0.0; 3];
        for (c, f) in xyz.iter_mut().zip(&fields[1..4]) {
            *c = f.parse().map_err(|_| Error::parse(source, n, format!("bad coordinate `{f}`")))?;
        }
        atoms.push(Atom::new(element, Vec3::new(xyz[0], xyz[1], xyz[2])));
    }
    if atoms.len() != count {
        return Err(Error::parse(source, atoms.len() + 3, format!("expected {count} atoms")));
    }
    Ok(XyzRecord {
        canvas: Canvas::from_atoms(atoms),
        energy,
        total_return,
    })
}

pub fn read_xyz(path: &Path, table: &ElementTable) -> Result<XyzRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, &path.display().to_string(), table)
}
