//! Frame-pair files and dataset manifests.
//!
//! Layout (little-endian): magic `OFP1`, `u32` P count, `u32` Q count, `u32`
//! feature width `c`, then `f32` arrays: P positions (n_P×3), P features
//! (n_P×c), Q positions (n_Q×3), Q features (n_Q×c), ground-truth flow
//! (n_P×3) and occlusion (n_P, each exactly 0 or 1).

use std::fs;
use std::path::{Path, PathBuf};

use ofl_core::geometry::{FlowField, OcclusionMask, Point, PointSet};
use ofl_core::synth::LabeledFramePair;

use crate::bytes::Reader;
use crate::error::{OflError, Result};

pub const MAGIC: &[u8; 4] = b"OFP1";
pub const MANIFEST: &str = "manifest.txt";

fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        let f = v as f32;
        if f as f64 != v && !(v.is_nan() && f.is_nan()) {
            return Err(OflError::Usage(format!(
                "{what} value {v:e} is not representable as f32"
            )));
        }
        out.extend(f.to_le_bytes());
    }
    Ok(())
}

pub fn encode(pair: &LabeledFramePair) -> Result<Vec<u8>> {
    let (p, q) = (&pair.p, &pair.q);
    if p.feature_dim != q.feature_dim {
        return Err(OflError::Usage(
            "frames have different feature widths".into(),
        ));
    }
    if pair.gt_flow.len() != p.len() || pair.gt_occlusion.len() != p.len() {
        return Err(OflError::Usage(
            "ground truth does not match the first frame".into(),
        ));
    }
    if pair.gt_occlusion.0.iter().any(|&o| o != 0.0 && o != 1.0) {
        return Err(OflError::Usage("occlusion labels must be 0 or 1".into()));
    }
    let mut out = MAGIC.to_vec();
    for n in [p.len(), q.len(), p.feature_dim] {
        out.extend(
            u32::try_from(n)
                .map_err(|_| OflError::Usage("count exceeds u32".into()))?
                .to_le_bytes(),
        );
    }
    push_f32(
        &mut out,
        p.positions.iter().flatten().copied(),
        "P position",
    )?;
    push_f32(&mut out, p.features.iter().copied(), "P feature")?;
    push_f32(
        &mut out,
        q.positions.iter().flatten().copied(),
        "Q position",
    )?;
    push_f32(&mut out, q.features.iter().copied(), "Q feature")?;
    push_f32(&mut out, pair.gt_flow.0.iter().flatten().copied(), "flow")?;
    push_f32(&mut out, pair.gt_occlusion.0.iter().copied(), "occlusion")?;
    Ok(out)
}

fn points(flat: Vec<f64>) -> Vec<Point> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn decode(data: &[u8], path: &Path) -> Result<LabeledFramePair> {
    let mut r = Reader::new(data, path);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error(0, "bad magic, expected OFP1"));
    }
    let np = r.u32("P count")? as usize;
    let nq = r.u32("Q count")? as usize;
    let c = r.u32("feature width")? as usize;
    let expected = 16 + 4 * (np * (3 + c + 3 + 1) + nq * (3 + c)) as u64;
    if data.len() as u64 != expected {
        let at = (data.len() as u64).min(expected);
        return Err(r.error(
            at,
            format!(
                "counts {np}/{nq}/{c} require {expected} bytes, file has {}",
                data.len()
            ),
        ));
    }
    let pp = points(r.f32s(np * 3, "P positions")?);
    let pf = r.f32s(np * c, "P features")?;
    let qp = points(r.f32s(nq * 3, "Q positions")?);
    let qf = r.f32s(nq * c, "Q features")?;
    let flow = points(r.f32s(np * 3, "flow")?);
    let occ_at = r.offset();
    let occ = r.f32s(np, "occlusion")?;
    if let Some(i) = occ.iter().position(|&o| o != 0.0 && o != 1.0) {
        return Err(r.error(
            occ_at + 4 * i as u64,
            format!("occlusion label {} is not 0 or 1", occ[i]),
        ));
    }
    Ok(LabeledFramePair {
        p: PointSet::new(pp, pf, c)?,
        q: PointSet::new(qp, qf, c)?,
        gt_flow: FlowField(flow),
        gt_occlusion: OcclusionMask(occ),
    })
}

pub fn write_pair(pair: &LabeledFramePair, path: &Path) -> Result<()> {
    let bytes = encode(pair)?;
    fs::write(path, bytes).map_err(|e| OflError::io(path, e))
}

pub fn read_pair(path: &Path) -> Result<LabeledFramePair> {
    let data = fs::read(path).map_err(|e| OflError::io(path, e))?;
    decode(&data, path)
}

/// Relative paths listed in `dir/manifest.txt`.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| OflError::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| dir.join(l))
        .collect())
}

pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| OflError::io(&path, e))
}

/// All pairs listed in a dataset directory's manifest, in order.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledFramePair>> {
    read_manifest(dir)?.iter().map(|p| read_pair(p)).collect()
}

/// Writes `pairs` as `scene_NNNN.ofp` plus a manifest.
pub fn write_dataset(dir: &Path, pairs: &[LabeledFramePair]) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| OflError::io(dir, e))?;
    let mut names = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("scene_{i:04}.ofp");
        write_pair(pair, &dir.join(&name))?;
        names.push(name);
    }
    write_manifest(dir, &names)?;
    Ok(names)
}
