//! Sintel-style directory layout:
//!
//! ```text
//! <dir>/frames/*.png        RGB frames, sorted lexicographically
//! <dir>/flow/*.flo          flows[i]: on frame i+1, samples frame i
//! <dir>/occlusions/*.png    masks[i]: 255 traceable, 0 occluded
//! <dir>/flow_fwd/*.flo      optional forward flows
//! <dir>/occlusions_fwd/*.png
//! ```
//!
//! When the forward directories are absent the forward flows are derived by
//! inverting the backward ones and their masks by a consistency check.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::flowops::{estimate_occlusion_mask, invert_flow, OcclusionThresholds};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{read_flo, write_flo, FlowField, FrameSequence, OcclusionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SequenceLayout {
    #[default]
    TripletDirs,
}

const MASK_THRESHOLD: u8 = 128;

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_frame<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * w * h];
    let scale = T::lit(255.0);
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = T::from_u8(px[ch]).unwrap() / scale;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes an RGB frame, clamping to `[0,1]` and rounding to 8 bits.
pub fn write_frame<T: Scalar>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let (c, h, w) = frame.chw();
    if c != 3 {
        return Err(Error::shape(format!("frames have 3 channels, got {c}")));
    }
    let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            to_u8(frame.channel(0)[i]),
            to_u8(frame.channel(1)[i]),
            to_u8(frame.channel(2)[i]),
        ])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_mask(path: &Path) -> Result<OcclusionMask> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| u8::from(p[0] >= MASK_THRESHOLD))
        .collect();
    OcclusionMask::from_vec(h, w, data)
}

fn write_mask(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_sequence_dir<T: Scalar>(
    dir: &Path,
    layout: SequenceLayout,
) -> Result<FrameSequence<T>> {
    let SequenceLayout::TripletDirs = layout;
    let frame_paths = sorted_files(&dir.join("frames"), "png")?;
    let flow_paths = sorted_files(&dir.join("flow"), "flo")?;
    let mask_paths = sorted_files(&dir.join("occlusions"), "png")?;
    let n = frame_paths.len();
    if n == 0 || flow_paths.len() + 1 != n || mask_paths.len() + 1 != n {
        return Err(Error::CountMismatch(format!(
            "{}: {n} frames, {} flows, {} masks",
            dir.display(),
            flow_paths.len(),
            mask_paths.len()
        )));
    }
    let frames = frame_paths
        .iter()
        .map(|p| read_frame::<T>(p))
        .collect::<Result<Vec<_>>>()?;
    let flows = flow_paths
        .iter()
        .map(|p| read_flo(p).map(|f| f.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let masks = mask_paths
        .iter()
        .map(|p| read_mask(p))
        .collect::<Result<Vec<_>>>()?;

    let fwd_dir = dir.join("flow_fwd");
    let (forward_flows, forward_masks) = if fwd_dir.is_dir() {
        let ff = sorted_files(&fwd_dir, "flo")?;
        let fm = sorted_files(&dir.join("occlusions_fwd"), "png")?;
        if ff.len() + 1 != n || fm.len() + 1 != n {
            return Err(Error::CountMismatch(format!(
                "{}: {n} frames, {} forward flows, {} forward masks",
                dir.display(),
                ff.len(),
                fm.len()
            )));
        }
        (
            ff.iter()
                .map(|p| read_flo(p).map(|f| f.cast::<T>()))
                .collect::<Result<Vec<_>>>()?,
            fm.iter()
                .map(|p| read_mask(p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        let mut ff = Vec::with_capacity(flows.len());
        let mut fm = Vec::with_capacity(flows.len());
        for b in &flows {
            let f = invert_flow(b);
            fm.push(estimate_occlusion_mask(
                &f,
                b,
                OcclusionThresholds::default(),
            )?);
            ff.push(f);
        }
        (ff, fm)
    };

    let source_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let seq = FrameSequence {
        frames,
        flows,
        masks,
        forward_flows,
        forward_masks,
        source_id,
    };
    seq.validate()?;
    Ok(seq)
}

/// Writes a sequence in the layout read by [`load_sequence_dir`], including
/// the forward directories.
pub fn export_sequence<T: Scalar>(seq: &FrameSequence<T>, dir: &Path) -> Result<()> {
    for sub in ["frames", "flow", "occlusions", "flow_fwd", "occlusions_fwd"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, f) in seq.frames.iter().enumerate() {
        write_frame(&dir.join(format!("frames/frame_{i:04}.png")), f)?;
    }
    let write_flows = |sub: &str, flows: &[FlowField<T>]| -> Result<()> {
        for (i, f) in flows.iter().enumerate() {
            write_flo(&dir.join(format!("{sub}/flow_{:04}.flo", i + 1)), &f.cast())?;
        }
        Ok(())
    };
    write_flows("flow", &seq.flows)?;
    write_flows("flow_fwd", &seq.forward_flows)?;
    for (i, m) in seq.masks.iter().enumerate() {
        write_mask(&dir.join(format!("occlusions/mask_{:04}.png", i + 1)), m)?;
    }
    for (i, m) in seq.forward_masks.iter().enumerate() {
        write_mask(
            &dir.join(format!("occlusions_fwd/mask_{:04}.png", i + 1)),
            m,
        )?;
    }
    Ok(())
}
