//! Per-image region feature files.
//!
//! ```text
//! "XALN" | u32 version | u32 n | u32 d_v | n*d_v f32 features | n*4 f32 boxes
//! ```

use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::encoder::PadMask;
use crate::error::{Error, Result};
use crate::model::{box_problem, RegionSet};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"XALN";
const VERSION: u32 = 1;

pub fn save_region_features(path: &Path, regions: &RegionSet<f32>) -> Result<()> {
    if regions.mask.count_real() != regions.len() {
        return Err(Error::Usage("feature files hold only real regions".into()));
    }
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(regions.len() as u32);
    w.u32(regions.features.cols() as u32);
    w.f32s(regions.features.data().iter().copied());
    w.f32s(regions.boxes.iter().flatten().copied());
    w.save(path)
}

pub fn load_region_features(path: &Path) -> Result<RegionSet<f32>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    if r.bytes(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, not a region feature file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(r.error_at(8, format!("empty region set ({n} x {d})")));
    }
    let features = r.f32s(n * d)?;
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let at = r.offset();
        let b = r.f32s(4)?;
        let b = [b[0], b[1], b[2], b[3]];
        if let Some(msg) = box_problem(&b) {
            return Err(r.error_at(at, format!("region {i}: {msg}")));
        }
        boxes.push(b);
    }
    r.expect_end()?;
    RegionSet::new(Tensor::new(vec![n, d], features)?, boxes, PadMask::all(n))
}
