//! Dense flow between consecutive frames. Block matching is the built-in
//! estimator; externally computed flow can be supplied through a simple
//! binary file format instead.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::Frame;
use crate::slic::Superpixel;

/// Per-pixel displacement field: pixel (x, y) in frame t lands at
/// (x + u, y + v) in frame t+1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zero(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }
}

/// Block-matching flow: per block, the integer displacement within
/// `±search` minimizing the summed absolute LAB difference. Ties prefer the
/// smallest displacement norm, then lexicographic (u, v). Every pixel takes
/// its block's displacement.
pub fn block_matching_flow(
    frame_t: &Frame,
    frame_t1: &Frame,
    block: usize,
    search: usize,
) -> Result<FlowField> {
    if frame_t.width != frame_t1.width || frame_t.height != frame_t1.height {
        return Err(Error::invalid("flow frames differ in size"));
    }
    let (w, h) = (frame_t.width, frame_t.height);
    let mut flow = FlowField::zero(w, h);
    if w == 0 || h == 0 {
        return Ok(flow);
    }
    // Frame smaller than one block: treat the whole frame as a single block.
    let block = block.min(w).min(h).max(1);
    let s = search as i64;

    let mut by = 0;
    while by < h {
        let bh = block.min(h - by);
        let mut bx = 0;
        while bx < w {
            let bw = block.min(w - bx);
            let mut best: Option<(f64, i64, i64)> = None;
            for dv in -s..=s {
                let ty = by as i64 + dv;
                if ty < 0 || ty + bh as i64 > h as i64 {
                    continue;
                }
                for du in -s..=s {
                    let tx = bx as i64 + du;
                    if tx < 0 || tx + bw as i64 > w as i64 {
                        continue;
                    }
                    let mut sad = 0.0f64;
                    for y in 0..bh {
                        for x in 0..bw {
                            let a = frame_t.lab_at(bx + x, by + y);
                            let b = frame_t1.lab_at(tx as usize + x, ty as usize + y);
                            sad += (a[0] as f64 - b[0] as f64).abs()
                                + (a[1] as f64 - b[1] as f64).abs()
                                + (a[2] as f64 - b[2] as f64).abs();
                        }
                    }
                    let better = match best {
                        None => true,
                        Some((bsad, bu, bv)) => {
                            let n = du * du + dv * dv;
                            let bn = bu * bu + bv * bv;
                            sad < bsad
                                || (sad == bsad && (n < bn || (n == bn && (du, dv) < (bu, bv))))
                        }
                    };
                    if better {
                        best = Some((sad, du, dv));
                    }
                }
            }
            let (_, du, dv) = best.expect("(0,0) displacement is always valid");
            for y in by..by + bh {
                for x in bx..bx + bw {
                    flow.u[y * w + x] = du as f32;
                    flow.v[y * w + x] = dv as f32;
                }
            }
            bx += block;
        }
        by += block;
    }
    Ok(flow)
}

/// Arithmetic mean flow over a superpixel's member pixels.
pub fn mean_flow(sp: &Superpixel, flow: &FlowField) -> (f64, f64) {
    assert!(!sp.pixels.is_empty());
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    for &p in &sp.pixels {
        su += flow.u[p as usize] as f64;
        sv += flow.v[p as usize] as f64;
    }
    let n = sp.pixels.len() as f64;
    (su / n, sv / n)
}

/// Write a flow field in the external exchange format:
/// `[width: u32 le][height: u32 le]` then row-major `(u, v)` pairs as
/// little-endian f32.
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + flow.u.len() * 8);
    buf.extend_from_slice(&(flow.width as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for i in 0..flow.u.len() {
        buf.extend_from_slice(&flow.u[i].to_le_bytes());
        buf.extend_from_slice(&flow.v[i].to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&buf).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::parse(path.display().to_string(), "truncated header"));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + width * height * 8;
    if bytes.len() != expect {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {expect} bytes, found {}", bytes.len()),
        ));
    }
    let mut flow = FlowField::zero(width, height);
    for i in 0..width * height {
        let off = 8 + i * 8;
        flow.u[i] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        flow.v[i] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
    }
    Ok(flow)
}

/// Conventional file name for the flow between frames `t` and `t+1`.
pub fn flow_file_name(t: usize) -> String {
    format!("flow_{t:05}.bin")
}
