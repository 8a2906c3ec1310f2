//! Nearest-neighbor patch tokenizer with threshold-gated codebook growth.
//!
//! Codebook file layout (little endian):
//!
//! | offset | type      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | `[u8; 4]` | magic `ITCB`                  |
//! | 4      | `u32`     | version (1)                   |
//! | 8      | `u32`     | code count `K`                |
//! | 12     | `u32`     | patch height `h`              |
//! | 16     | `u32`     | patch width `w`               |
//! | 20     | `u32`     | channels `c`                  |
//! | 24     | `f32`     | growth threshold `tau`        |
//! | 28     | `u32`     | capacity `K_max`              |
//! | 32     | `f32` * K*h*w*c | codes, each row-major `(y, x, c)` |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ItcError, Result};
use crate::frame::{FrameTokens, GridShape};

const MAGIC: &[u8; 4] = b"ITCB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl PatchShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An `h x w x c` patch with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    shape: PatchShape,
    values: Vec<f32>,
}

impl Patch {
    pub fn new(shape: PatchShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(ItcError::Shape {
                expected: format!("{} values", shape.len()),
                got: format!("{}", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> PatchShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Row-major `(y, x, c)` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(ItcError::Shape {
                expected: format!("{height}x{width}x{channels}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    fn patch_grid(&self, ps: PatchShape) -> Result<GridShape> {
        if ps.c != self.channels || ps.h == 0 || ps.w == 0 || !self.height.is_multiple_of(ps.h) || !self.width.is_multiple_of(ps.w) {
            return Err(ItcError::Shape {
                expected: format!("multiple of {}x{}x{}", ps.h, ps.w, ps.c),
                got: format!("{}x{}x{}", self.height, self.width, self.channels),
            });
        }
        Ok(GridShape::new(self.height / ps.h, self.width / ps.w))
    }

    fn extract(&self, ps: PatchShape, row: usize, col: usize) -> Patch {
        let mut values = Vec::with_capacity(ps.len());
        for dy in 0..ps.h {
            let y = row * ps.h + dy;
            let start = (y * self.width + col * ps.w) * self.channels;
            values.extend_from_slice(&self.data[start..start + ps.w * self.channels]);
        }
        Patch { shape: ps, values }
    }

    /// Patches in row-major patch-grid order.
    pub fn patches(&self, ps: PatchShape) -> Result<(GridShape, Vec<Patch>)> {
        let grid = self.patch_grid(ps)?;
        let mut out = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                out.push(self.extract(ps, r, c));
            }
        }
        Ok((grid, out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    shape: PatchShape,
    tau: f32,
    k_max: usize,
    codes: Vec<Vec<f32>>,
    overflow: u64,
}

impl Codebook {
    pub fn new(shape: PatchShape, tau: f32, k_max: usize) -> Self {
        Self {
            shape,
            tau,
            k_max,
            codes: Vec::new(),
            overflow: 0,
        }
    }

    pub fn patch_shape(&self) -> PatchShape {
        self.shape
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Number of far-away patches rejected because the codebook was full.
    pub fn overflow_count(&self) -> u64 {
        self.overflow
    }

    pub fn code(&self, token: u32) -> Option<Patch> {
        self.codes.get(token as usize).map(|v| Patch {
            shape: self.shape,
            values: v.clone(),
        })
    }

    fn check_shape(&self, p: &Patch) -> Result<()> {
        if p.shape != self.shape {
            return Err(ItcError::Shape {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", p.shape),
            });
        }
        Ok(())
    }

    /// Nearest code and its squared distance.
    fn nearest(&self, p: &[f32]) -> Option<(u32, f64)> {
        let mut best: Option<(u32, f64)> = None;
        for (k, code) in self.codes.iter().enumerate() {
            let d = squared_distance(code, p);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((k as u32, d));
            }
        }
        best
    }

    /// SHA-256 of the serialized codebook, hex encoded.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.codes.len() as u32, self.shape.h as u32, self.shape.w as u32, self.shape.c as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.tau.to_le_bytes())?;
        w.write_all(&(self.k_max as u32).to_le_bytes())?;
        for code in &self.codes {
            for v in code {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ItcError::Format("not a codebook file".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != VERSION {
            return Err(ItcError::Format(format!("unsupported codebook version {version}")));
        }
        let k = next_u32(&mut r)? as usize;
        let shape = PatchShape::new(next_u32(&mut r)? as usize, next_u32(&mut r)? as usize, next_u32(&mut r)? as usize);
        let tau = f32::from_bits(next_u32(&mut r)?);
        let k_max = next_u32(&mut r)? as usize;
        let mut codes = Vec::with_capacity(k);
        for _ in 0..k {
            let mut code = Vec::with_capacity(shape.len());
            for _ in 0..shape.len() {
                code.push(f32::from_bits(next_u32(&mut r)?));
            }
            codes.push(code);
        }
        Ok(Self {
            shape,
            tau,
            k_max,
            codes,
            overflow: 0,
        })
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Index of the nearest code; ties go to the lowest index.
pub fn encode_patch(p: &Patch, cb: &Codebook) -> Result<u32> {
    cb.check_shape(p)?;
    cb.nearest(&p.values).map(|(k, _)| k).ok_or(ItcError::EmptyCodebook)
}

/// Appends `p` if it is farther than `tau` from every code and the codebook
/// is below capacity. Returns whether it grew.
pub fn grow_codebook(p: &Patch, cb: &mut Codebook) -> Result<bool> {
    cb.check_shape(p)?;
    let far = cb.nearest(&p.values).is_none_or(|(_, d)| d > f64::from(cb.tau));
    if !far {
        return Ok(false);
    }
    if cb.codes.len() >= cb.k_max {
        cb.overflow += 1;
        return Ok(false);
    }
    cb.codes.push(p.values.clone());
    Ok(true)
}

/// Runs [`grow_codebook`] over every patch of `image`; returns the number added.
pub fn grow_from_image(image: &Image, cb: &mut Codebook) -> Result<usize> {
    let (_, patches) = image.patches(cb.shape)?;
    let mut added = 0;
    for p in &patches {
        added += usize::from(grow_codebook(p, cb)?);
    }
    Ok(added)
}

pub fn encode_frame(image: &Image, cb: &Codebook) -> Result<FrameTokens> {
    let (grid, patches) = image.patches(cb.shape)?;
    let tokens = patches.iter().map(|p| encode_patch(p, cb)).collect::<Result<_>>()?;
    FrameTokens::new(grid, tokens)
}

pub fn decode_frame(tokens: &FrameTokens, cb: &Codebook) -> Result<Image> {
    let ps = cb.shape;
    let grid = tokens.shape();
    let (height, width) = (grid.height * ps.h, grid.width * ps.w);
    let mut data = vec![0.0f32; height * width * ps.c];
    for (idx, &t) in tokens.tokens().iter().enumerate() {
        let code = cb
            .codes
            .get(t as usize)
            .ok_or_else(|| ItcError::Geometry(format!("token {t} outside codebook of size {}", cb.len())))?;
        let (row, col) = (idx / grid.width, idx % grid.width);
        for dy in 0..ps.h {
            let y = row * ps.h + dy;
            let dst = (y * width + col * ps.w) * ps.c;
            let src = dy * ps.w * ps.c;
            data[dst..dst + ps.w * ps.c].copy_from_slice(&code[src..src + ps.w * ps.c]);
        }
    }
    Image::new(height, width, ps.c, data)
}
