//! Field snapshots: a self-describing little-endian binary layout and a CSV
//! dump for small grids. The binary layout is documented in `docs/FORMATS.md`.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{BoxDomain, StaggeredGrid};

pub const MAGIC: &[u8; 4] = b"RTSF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 3 * 8 + 3 * 8 + 3 * 8 + 8;

/// A field together with its kind tag.
#[derive(Debug, Clone)]
pub enum Snapshot {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl Snapshot {
    pub fn grid(&self) -> &Arc<StaggeredGrid> {
        match self {
            Snapshot::Scalar(s) => s.grid(),
            Snapshot::Vector(v) => v.grid(),
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Snapshot::Scalar(_) => 0,
            Snapshot::Vector(_) => 1,
        }
    }

    fn payload(&self) -> &[f64] {
        match self {
            Snapshot::Scalar(s) => &s.values,
            Snapshot::Vector(v) => &v.data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let grid = self.grid();
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind());
        out.push(grid.dim() as u8);
        out.push(grid.gravity_axis() as u8);
        out.push(0);
        for a in 0..3 {
            out.extend_from_slice(&(grid.cells[a] as u64).to_le_bytes());
        }
        for a in 0..3 {
            let l = grid.domain.lengths.get(a).copied().unwrap_or(0.0);
            out.extend_from_slice(&l.to_le_bytes());
        }
        for a in 0..3 {
            out.extend_from_slice(&grid.h[a].to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic (expected RTSF)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let head = cur.take(4)?;
        let (kind, dim, gaxis) = (head[0], head[1] as usize, head[2] as usize);
        let mut cells = [0usize; 3];
        for c in cells.iter_mut() {
            *c = cur.u64()? as usize;
        }
        let mut lengths = [0.0; 3];
        for l in lengths.iter_mut() {
            *l = cur.f64()?;
        }
        let mut h = [0.0; 3];
        for x in h.iter_mut() {
            *x = cur.f64()?;
        }
        if !(2..=3).contains(&dim) {
            return Err(Error::Snapshot(format!("dimension {dim} out of range")));
        }
        let domain = BoxDomain::new(&lengths[..dim], gaxis)
            .map_err(|e| Error::Snapshot(format!("header: {e}")))?;
        let grid = StaggeredGrid::new(domain, &cells[..dim])
            .map_err(|e| Error::Snapshot(format!("header: {e}")))?;
        if (0..dim).any(|a| (grid.h[a] - h[a]).abs() > 1e-12 * h[a].abs()) {
            return Err(Error::Snapshot("spacing disagrees with lengths/cells".into()));
        }
        let grid = Arc::new(grid);
        let count = cur.u64()? as usize;
        let expected = match kind {
            0 => grid.cell_count(),
            1 => VectorField::layout(&grid)[3],
            k => return Err(Error::Snapshot(format!("unknown field kind {k}"))),
        };
        if count != expected {
            return Err(Error::Snapshot(format!(
                "payload has {count} values, grid needs {expected}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(cur.f64()?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(match kind {
            0 => Snapshot::Scalar(ScalarField::from_values(&grid, values)?),
            _ => Snapshot::Vector(VectorField::from_flat(&grid, values)?),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One row per cell: cell-center coordinates, then the value (scalar) or
    /// the face-averaged components (vector).
    pub fn to_csv(&self) -> String {
        let grid = self.grid();
        let dim = grid.dim();
        let names = ["x", "y", "z"];
        let mut out = String::new();
        let mut header: Vec<String> = names[..dim].iter().map(|s| s.to_string()).collect();
        match self {
            Snapshot::Scalar(_) => header.push("value".into()),
            Snapshot::Vector(_) => header.extend((0..dim).map(|a| format!("u{a}"))),
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for (ci, c) in grid.cell_shape().iter().enumerate() {
            let x = grid.cell_center(c);
            let mut row: Vec<String> = x[..dim].iter().map(|v| format!("{v:.17e}")).collect();
            match self {
                Snapshot::Scalar(s) => row.push(format!("{:.17e}", s.values[ci])),
                Snapshot::Vector(v) => {
                    for a in 0..dim {
                        let fs = grid.face_shape(a);
                        let comp = v.component(a);
                        let lo = fs.index(c);
                        let avg = 0.5 * (comp[lo] + comp[lo + fs.strides()[a]]);
                        row.push(format!("{avg:.17e}"));
                    }
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Snapshot(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
