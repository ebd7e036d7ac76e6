//! Per-slice contour overlays and uncertainty heat maps as binary PPM
//! (P6) images.
//!
//! Each axial slice of the volume becomes `slice_###.ppm`: the image in
//! grayscale, ground-truth contour in orange, prediction contour in
//! green (drawn last, so coincident contours show green). Uncertainty
//! maps become `confidence_###.ppm` / `consensus_###.ppm`, intensity
//! scaled by each score's fixed maximum so identical values render
//! identically across cases.

use super::PipelineError;
use crate::io::Volume;
use crate::metrics::BinaryMask;
use std::path::{Path, PathBuf};

pub const PRED_COLOR: [u8; 3] = [40, 220, 40];
pub const GT_COLOR: [u8; 3] = [255, 165, 0];

/// Maximum of `-mu ln mu` on `[0,1]`, the confidence heat scale.
const CONFIDENCE_SCALE: f64 = 0.36787944117144233;
/// Upper bound of the consensus score.
const CONSENSUS_SCALE: f64 = 0.5;

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PipelineError> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    std::fs::write(path, bytes)
        .map_err(|e| PipelineError::Overlay(format!("{}: {e}", path.display())))
}

/// In-slice contour: foreground pixels with a background 4-neighbor
/// (slice borders count as background).
pub fn slice_contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || y == h - 1
                || x == 0
                || x == w - 1
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out[y * w + x] = true;
            }
        }
    }
    out
}

fn slice_of<'a, T: Copy>(data: &'a [T], dims: [usize; 3], k: usize) -> &'a [T] {
    let per = dims[1] * dims[2];
    &data[k * per..(k + 1) * per]
}

/// Emit per-slice overlays (and optional uncertainty maps); returns
/// the written paths. All maps must share the volume's dims.
pub fn emit_overlays(
    volume: &Volume,
    pred: &BinaryMask,
    gt: &BinaryMask,
    confidence: Option<&[f64]>,
    consensus: Option<&[f64]>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, PipelineError> {
    let dims = volume.dims;
    if pred.dims != dims || gt.dims != dims {
        return Err(PipelineError::Overlay(format!(
            "mask dims {:?}/{:?} do not match volume {:?}",
            pred.dims, gt.dims, dims
        )));
    }
    for (name, map) in [("confidence", confidence), ("consensus", consensus)] {
        if let Some(m) = map {
            if m.len() != volume.numel() {
                return Err(PipelineError::Overlay(format!(
                    "{name} map holds {} values for a {:?} volume",
                    m.len(),
                    dims
                )));
            }
        }
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::Overlay(format!("{}: {e}", out_dir.display())))?;

    let (lo, hi) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };

    let (h, w) = (dims[1], dims[2]);
    let mut written = Vec::new();
    for k in 0..dims[0] {
        let img = slice_of(&volume.data, dims, k);
        let pred_contour = slice_contour(slice_of(&pred.data, dims, k), h, w);
        let gt_contour = slice_contour(slice_of(&gt.data, dims, k), h, w);

        let mut rgb = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            let gray = (((img[i] - lo) / range) * 255.0).clamp(0.0, 255.0) as u8;
            let px = if pred_contour[i] {
                PRED_COLOR
            } else if gt_contour[i] {
                GT_COLOR
            } else {
                [gray, gray, gray]
            };
            rgb.extend_from_slice(&px);
        }
        let path = out_dir.join(format!("slice_{k:03}.ppm"));
        write_ppm(&path, w, h, &rgb)?;
        written.push(path);

        for (name, map, scale) in [
            ("confidence", confidence, CONFIDENCE_SCALE),
            ("consensus", consensus, CONSENSUS_SCALE),
        ] {
            let Some(map) = map else { continue };
            let vals = slice_of(map, dims, k);
            let mut rgb = Vec::with_capacity(h * w * 3);
            for &u in vals {
                let v = ((u / scale) * 255.0).clamp(0.0, 255.0) as u8;
                rgb.extend_from_slice(&[v, v, v]);
            }
            let path = out_dir.join(format!("{name}_{k:03}.ppm"));
            write_ppm(&path, w, h, &rgb)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
        let bytes = std::fs::read(path).unwrap();
        let header_end = bytes
            .windows(4)
            .position(|w| w == b"255\n")
            .expect("maxval line")
            + 4;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut lines = header.lines();
        assert_eq!(lines.next(), Some("P6"));
        let mut dims = lines.next().unwrap().split_whitespace();
        let w: usize = dims.next().unwrap().parse().unwrap();
        let h: usize = dims.next().unwrap().parse().unwrap();
        (w, h, bytes[header_end..].to_vec())
    }

    fn block_mask(dims: [usize; 3], lo: usize, hi: usize) -> BinaryMask {
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for x in lo..hi {
            for y in lo..hi {
                for z in lo..hi {
                    data[(x * dims[1] + y) * dims[2] + z] = true;
                }
            }
        }
        BinaryMask::new(dims, data).unwrap()
    }

    #[test]
    fn emitted_dimensions_match_slices() {
        let dims = [4, 6, 8];
        let v = Volume::filled(dims, 0.5);
        let m = block_mask(dims, 1, 3);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_overlays(&v, &m, &m, None, None, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let (w, h, rgb) = read_ppm(&files[0]);
        assert_eq!((w, h), (8, 6));
        assert_eq!(rgb.len(), 8 * 6 * 3);
    }

    #[test]
    fn coincident_contours_occupy_identical_pixels() {
        let dims = [6, 6, 6];
        let v = Volume::filled(dims, 0.2);
        let m = block_mask(dims, 1, 5);
        // The contour sets themselves coincide when pred == gt.
        for k in 0..dims[0] {
            let p = slice_contour(&m.data[k * 36..(k + 1) * 36], 6, 6);
            let g = slice_contour(&m.data[k * 36..(k + 1) * 36], 6, 6);
            assert_eq!(p, g);
        }
        // And the emitted overlay paints those pixels with the
        // prediction color (drawn on top).
        let dir = tempfile::tempdir().unwrap();
        let files = emit_overlays(&v, &m, &m, None, None, dir.path()).unwrap();
        let (w, _, rgb) = read_ppm(&files[2]); // an interior slice
        let contour = slice_contour(&m.data[2 * 36..3 * 36], 6, 6);
        for (i, &on) in contour.iter().enumerate() {
            let px = &rgb[i * 3..i * 3 + 3];
            if on {
                assert_eq!(px, PRED_COLOR);
            } else {
                assert_ne!(px, PRED_COLOR);
            }
            let _ = w;
        }
    }

    #[test]
    fn zero_uncertainty_renders_uniformly_dark() {
        let dims = [2, 4, 4];
        let v = Volume::filled(dims, 0.5);
        let m = block_mask(dims, 0, 1);
        let zeros = vec![0.0f64; 32];
        let dir = tempfile::tempdir().unwrap();
        let files = emit_overlays(&v, &m, &m, Some(&zeros), None, dir.path()).unwrap();
        let conf: Vec<_> = files
            .iter()
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("confidence"))
            .collect();
        assert_eq!(conf.len(), 2);
        let (_, _, rgb) = read_ppm(conf[0]);
        assert!(rgb.iter().all(|&b| b == 0));
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let v = Volume::filled([2, 2, 2], 0.0);
        let m = block_mask([2, 2, 3], 0, 1);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_overlays(&v, &m, &m, None, None, dir.path()),
            Err(PipelineError::Overlay(_))
        ));
    }
}
