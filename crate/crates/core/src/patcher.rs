//! Image loading and the patch extraction pipelines.
//!
//! Images are rank-3 `f32` tensors `[H, W, 3]`; loaders normalize samples to
//! `[0, 1]`. Patching always produces square `patch_size` tiles: large images
//! are cut at scales 1, 2, and 4 (bilinear downsampling by the scale factor,
//! then tiling with zero padding up to the next multiple), so every patch is
//! addressed by a unique `(y, x, scale)` triple. Dataset images are instead
//! resized whole to the nearest supported patch size, and text-like images
//! are placed centered on a fixed-aspect canvas first.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Patch sizes with a matching network preset.
pub const PATCH_SIZES: [usize; 3] = [16, 32, 96];

/// Downsampling factors used by [`multiscale`].
pub const MULTISCALE_FACTORS: [usize; 3] = [1, 2, 4];

/// Canvas extents for text-like images: the smaller image side maps to 128,
/// the larger to 256.
pub const TEXT_CANVAS_SHORT: usize = 128;
pub const TEXT_CANVAS_LONG: usize = 256;

/// Grid address of one patch within its scale.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PatchIndex {
    pub y: usize,
    pub x: usize,
    pub scale: usize,
}

/// Tiling arithmetic for one scale of a patch set.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ScaleLayout {
    pub scale: usize,
    /// Image extent after downsampling by `scale`.
    pub scaled_h: usize,
    pub scaled_w: usize,
    /// Extent after zero-padding to a multiple of the patch size.
    pub padded_h: usize,
    pub padded_w: usize,
    pub rows: usize,
    pub cols: usize,
    /// Index of this scale's first patch in `PatchSet::patches`.
    pub first_patch: usize,
}

/// Square patches cut from one source image.
#[derive(Clone, PartialEq, Debug)]
pub struct PatchSet {
    pub source_id: String,
    pub patch_size: usize,
    pub patches: Vec<Tensor<f32>>,
    pub indices: Vec<PatchIndex>,
    pub layouts: Vec<ScaleLayout>,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn check_image(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (h, w, c) = image.shape().dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected a 3-channel image, got {c} channels")));
    }
    Ok((h, w, c))
}

/// Bilinear resize with half-pixel centers: source coordinate
/// `(dst + 0.5) * in / out - 0.5`, edges clamped. Resizing to the input size
/// reproduces the input exactly.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (in_h, in_w, channels) = check_image(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    let data = image.data();
    let mut out = vec![0.0f32; out_h * out_w * channels];
    for yo in 0..out_h {
        let src_y = (yo as f64 + 0.5) * scale_y - 0.5;
        let y0 = src_y.floor();
        let ty = src_y - y0;
        let y0c = (y0 as isize).clamp(0, in_h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, in_h as isize - 1) as usize;
        for xo in 0..out_w {
            let src_x = (xo as f64 + 0.5) * scale_x - 0.5;
            let x0 = src_x.floor();
            let tx = src_x - x0;
            let x0c = (x0 as isize).clamp(0, in_w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, in_w as isize - 1) as usize;
            for c in 0..channels {
                let v00 = data[(y0c * in_w + x0c) * channels + c] as f64;
                let v01 = data[(y0c * in_w + x1c) * channels + c] as f64;
                let v10 = data[(y1c * in_w + x0c) * channels + c] as f64;
                let v11 = data[(y1c * in_w + x1c) * channels + c] as f64;
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bottom = v10 * (1.0 - tx) + v11 * tx;
                out[(yo * out_w + xo) * channels + c] = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
    Tensor::new(Shape::d3(out_h, out_w, channels), out)
}

/// The member of `allowed` closest to `side`; ties break to the larger size.
pub fn nearest_patch_size(side: usize, allowed: &[usize]) -> Result<usize> {
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("allowed patch sizes must be non-empty".into()));
    }
    let mut best = allowed[0];
    for &candidate in &allowed[1..] {
        let best_dist = side.abs_diff(best);
        let dist = side.abs_diff(candidate);
        if dist < best_dist || (dist == best_dist && candidate > best) {
            best = candidate;
        }
    }
    Ok(best)
}

/// Resizes a whole image to the square patch size nearest to its larger
/// side. A 28x28 digit becomes 32x32, a 64x64 image rounds up to 96x96.
pub fn resize_to_nearest_patch(image: &Tensor<f32>, allowed: &[usize]) -> Result<Tensor<f32>> {
    let (h, w, _) = check_image(image)?;
    let target = nearest_patch_size(h.max(w), allowed)?;
    resize_bilinear(image, target, target)
}

/// Cuts one scale of `image` into `patch_size` tiles, zero-padding the
/// bottom/right edges up to the next multiple of `patch_size`.
pub fn tile(image: &Tensor<f32>, patch_size: usize, source_id: &str) -> Result<PatchSet> {
    tile_at_scale(image, patch_size, source_id, 1, 0)
}

fn tile_at_scale(
    image: &Tensor<f32>,
    patch_size: usize,
    source_id: &str,
    scale: usize,
    first_patch: usize,
) -> Result<PatchSet> {
    let (h, w, channels) = check_image(image)?;
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let rows = ceil_div(h, patch_size);
    let cols = ceil_div(w, patch_size);
    let layout = ScaleLayout {
        scale,
        scaled_h: h,
        scaled_w: w,
        padded_h: rows * patch_size,
        padded_w: cols * patch_size,
        rows,
        cols,
        first_patch,
    };
    let data = image.data();
    let mut patches = Vec::with_capacity(rows * cols);
    let mut indices = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut patch = vec![0.0f32; patch_size * patch_size * channels];
            for dy in 0..patch_size {
                let y = row * patch_size + dy;
                if y >= h {
                    break;
                }
                let width_here = patch_size.min(w.saturating_sub(col * patch_size));
                if width_here == 0 {
                    continue;
                }
                let src = (y * w + col * patch_size) * channels;
                let dst = dy * patch_size * channels;
                patch[dst..dst + width_here * channels]
                    .copy_from_slice(&data[src..src + width_here * channels]);
            }
            patches.push(Tensor::new(Shape::d3(patch_size, patch_size, channels), patch)?);
            indices.push(PatchIndex { y: row, x: col, scale });
        }
    }
    Ok(PatchSet {
        source_id: source_id.to_string(),
        patch_size,
        patches,
        indices,
        layouts: vec![layout],
    })
}

/// Cuts `image` at scales 1, 2, and 4. Scale `s` first downsamples to
/// `ceil(H/s) x ceil(W/s)`, then tiles like [`tile`]. Patch count is
/// `sum_s ceil(H/(s*P)) * ceil(W/(s*P))`; a 128x128 image at patch size 32
/// yields 16 + 4 + 1 = 21 patches.
pub fn multiscale(image: &Tensor<f32>, patch_size: usize, source_id: &str) -> Result<PatchSet> {
    let (h, w, _) = check_image(image)?;
    let mut combined = PatchSet {
        source_id: source_id.to_string(),
        patch_size,
        patches: Vec::new(),
        indices: Vec::new(),
        layouts: Vec::new(),
    };
    for &scale in &MULTISCALE_FACTORS {
        let scaled = if scale == 1 {
            image.clone()
        } else {
            resize_bilinear(image, ceil_div(h, scale), ceil_div(w, scale))?
        };
        let part =
            tile_at_scale(&scaled, patch_size, source_id, scale, combined.patches.len())?;
        combined.patches.extend(part.patches);
        combined.indices.extend(part.indices);
        combined.layouts.extend(part.layouts);
    }
    Ok(combined)
}

/// Rebuilds the zero-padded image of one scale from its patches; exact
/// inverse of the tiling step.
pub fn reassemble_scale(set: &PatchSet, scale: usize) -> Result<Tensor<f32>> {
    let layout = set
        .layouts
        .iter()
        .find(|l| l.scale == scale)
        .ok_or_else(|| Error::InvalidArgument(format!("patch set has no scale {scale}")))?;
    let size = set.patch_size;
    let mut out = Tensor::zeros(Shape::d3(layout.padded_h, layout.padded_w, 3));
    for (offset, patch) in set.patches[layout.first_patch..][..layout.rows * layout.cols]
        .iter()
        .enumerate()
    {
        let index = set.indices[layout.first_patch + offset];
        if *patch.shape() != Shape::d3(size, size, 3) {
            return Err(Error::ShapeMismatch(format!(
                "patch has shape {}, expected {size}x{size}x3",
                patch.shape()
            )));
        }
        for dy in 0..size {
            let y = index.y * size + dy;
            let dst = (y * layout.padded_w + index.x * size) * 3;
            let src = dy * size * 3;
            out.data_mut()[dst..dst + size * 3].copy_from_slice(&patch.data()[src..src + size * 3]);
        }
    }
    Ok(out)
}

/// Places a text-like image on a fixed canvas: 128x256 for landscape inputs
/// (width >= height), 256x128 for portrait. The image is scaled by
/// `min(canvas_h / H, canvas_w / W)` to preserve aspect ratio, centered, and
/// the margins are filled with zeros.
pub fn text_canvas(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, channels) = check_image(image)?;
    let (canvas_h, canvas_w) = if w >= h {
        (TEXT_CANVAS_SHORT, TEXT_CANVAS_LONG)
    } else {
        (TEXT_CANVAS_LONG, TEXT_CANVAS_SHORT)
    };
    let scale = (canvas_h as f64 / h as f64).min(canvas_w as f64 / w as f64);
    let scaled_h = ((h as f64 * scale).round() as usize).clamp(1, canvas_h);
    let scaled_w = ((w as f64 * scale).round() as usize).clamp(1, canvas_w);
    let scaled = resize_bilinear(image, scaled_h, scaled_w)?;

    let y_off = (canvas_h - scaled_h) / 2;
    let x_off = (canvas_w - scaled_w) / 2;
    let mut canvas = Tensor::zeros(Shape::d3(canvas_h, canvas_w, channels));
    for y in 0..scaled_h {
        let dst = ((y + y_off) * canvas_w + x_off) * channels;
        let src = y * scaled_w * channels;
        canvas.data_mut()[dst..dst + scaled_w * channels]
            .copy_from_slice(&scaled.data()[src..src + scaled_w * channels]);
    }
    Ok(canvas)
}

/// Writes every patch as a binary PPM plus a `manifest.csv` describing them.
/// Returns the manifest path. Patch files are named
/// `<source_id>_s<scale>_y<y>_x<x>.ppm`.
pub fn export_patchset(set: &PatchSet, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("file,source_id,patch_size,scale,y,x\n");
    for (patch, index) in set.patches.iter().zip(&set.indices) {
        let file = format!(
            "{}_s{}_y{}_x{}.ppm",
            set.source_id, index.scale, index.y, index.x
        );
        save_ppm(patch, &dir.join(&file))?;
        manifest.push_str(&format!(
            "{file},{},{},{},{},{}\n",
            set.source_id, set.patch_size, index.scale, index.y, index.x
        ));
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads a PPM (P3/P6) or PGM (P2/P5) image; grayscale is replicated to
/// three channels and samples are normalized to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_netpbm(&bytes)
}

/// Writes a binary PPM (P6, maxval 255); values are clamped to `[0, 1]`.
pub fn save_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, channels) = check_image(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * channels);
    for &value in image.data() {
        out.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct PbmHeader {
    channels: usize,
    binary: bool,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<PbmHeader> {
    let (channels, binary) = match bytes.get(0..2) {
        Some(b"P2") => (1, false),
        Some(b"P3") => (3, false),
        Some(b"P5") => (1, true),
        Some(b"P6") => (3, true),
        _ => return Err(Error::CorruptFile("not a PGM/PPM file (bad magic)".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comment lines between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::CorruptFile("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::CorruptFile("expected a header integer".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = text
            .parse()
            .map_err(|_| Error::CorruptFile(format!("header value {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::CorruptFile("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::CorruptFile(format!("unsupported maxval {maxval}")));
    }
    Ok(PbmHeader { channels, binary, width, height, maxval, data_start: pos })
}

fn decode_netpbm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes)?;
    if header.width == 0 || header.height == 0 {
        return Err(Error::EmptyImage);
    }
    let sample_count = header.width * header.height * header.channels;
    let mut samples = Vec::with_capacity(sample_count);
    if header.binary {
        let data = &bytes[header.data_start..];
        if data.len() < sample_count {
            return Err(Error::CorruptFile(format!(
                "expected {sample_count} samples, file holds {}",
                data.len()
            )));
        }
        samples.extend(data[..sample_count].iter().map(|&b| b as usize));
    } else {
        let text = std::str::from_utf8(&bytes[header.data_start..])
            .map_err(|_| Error::CorruptFile("ASCII samples are not UTF-8".into()))?;
        for token in text.split_ascii_whitespace() {
            let value: usize = token
                .parse()
                .map_err(|_| Error::CorruptFile(format!("bad ASCII sample {token:?}")))?;
            samples.push(value);
            if samples.len() == sample_count {
                break;
            }
        }
        if samples.len() < sample_count {
            return Err(Error::CorruptFile(format!(
                "expected {sample_count} samples, file holds {}",
                samples.len()
            )));
        }
    }
    if let Some(&bad) = samples.iter().find(|&&v| v > header.maxval) {
        return Err(Error::CorruptFile(format!(
            "sample {bad} exceeds maxval {}",
            header.maxval
        )));
    }
    let maxval = header.maxval as f32;
    let mut data = Vec::with_capacity(header.width * header.height * 3);
    match header.channels {
        3 => data.extend(samples.iter().map(|&v| v as f32 / maxval)),
        1 => {
            for &v in &samples {
                let value = v as f32 / maxval;
                data.extend_from_slice(&[value, value, value]);
            }
        }
        _ => unreachable!("header channels are 1 or 3"),
    }
    Tensor::new(Shape::d3(header.height, header.width, 3), data)
}
