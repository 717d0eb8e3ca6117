//! Image feature extraction: four-directional grid scans at four scales.
//!
//! The masked image is patch-embedded into a token grid, each stage runs
//! gated scan blocks over the four cross-scan orderings of the grid
//! (row-major, row-major reversed, column-major, column-major reversed) and
//! halves the resolution; the stage outputs are upsampled to the first-stage
//! grid, concatenated, and projected. Per-point descriptors are read by
//! bilinear sampling at each point's source pixel.

use super::points::selective_params_from_bundle;
use super::ssm::{scan_impl, ScanInit};
use super::{rms_normalize, silu, FeatureMap, SeqModelError, WeightBundle};
use crate::tensor::Mat;
use crate::view::{ColorImage, Mask};

/// A token grid: `height * width` rows of `channels` values, row-major by
/// grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub tokens: Mat<f32>,
}

/// Flatten a grid into the four directional scan sequences.
pub fn cross_scan(grid: &Grid) -> [Mat<f32>; 4] {
    let (h, w, c) = (grid.height, grid.width, grid.tokens.cols());
    let n = h * w;
    let mut seqs = [
        Mat::zeros(n, c),
        Mat::zeros(n, c),
        Mat::zeros(n, c),
        Mat::zeros(n, c),
    ];
    for pos in 0..n {
        seqs[0].row_mut(pos).copy_from_slice(grid.tokens.row(pos));
        seqs[1]
            .row_mut(pos)
            .copy_from_slice(grid.tokens.row(n - 1 - pos));
    }
    let mut pos = 0;
    for x in 0..w {
        for y in 0..h {
            let src = y * w + x;
            seqs[2].row_mut(pos).copy_from_slice(grid.tokens.row(src));
            seqs[3]
                .row_mut(n - 1 - pos)
                .copy_from_slice(grid.tokens.row(src));
            pos += 1;
        }
    }
    seqs
}

/// Invert the four scan orderings and average them back into a grid.
/// When the sequences are unmodified this is an exact (bit-for-bit) inverse
/// of [`cross_scan`]: the four contributions are summed pairwise and divided
/// by four, which is exact for equal values.
pub fn cross_merge(seqs: &[Mat<f32>; 4], height: usize, width: usize) -> Grid {
    let n = height * width;
    let c = seqs[0].cols();
    let mut tokens = Mat::zeros(n, c);
    let mut col_pos_of = vec![0usize; n];
    let mut pos = 0;
    for x in 0..width {
        for y in 0..height {
            col_pos_of[y * width + x] = pos;
            pos += 1;
        }
    }
    for dst in 0..n {
        let cp = col_pos_of[dst];
        let r0 = seqs[0].row(dst);
        let r1 = seqs[1].row(n - 1 - dst);
        let r2 = seqs[2].row(cp);
        let r3 = seqs[3].row(n - 1 - cp);
        let out = tokens.row_mut(dst);
        for i in 0..c {
            out[i] = ((r0[i] + r1[i]) + (r2[i] + r3[i])) * 0.25;
        }
    }
    Grid { height, width, tokens }
}

/// Patch-embed: group `patch x patch` blocks of the source grid (channels
/// innermost) and apply a linear projection.
fn patch_embed(
    src: &Grid,
    patch: usize,
    w: &Mat<f32>,
    b: &[f32],
) -> Result<Grid, SeqModelError> {
    if src.height % patch != 0 || src.width % patch != 0 {
        return Err(SeqModelError::BadDimension(format!(
            "grid {}x{} not divisible by patch {patch}",
            src.height, src.width
        )));
    }
    let c = src.tokens.cols();
    let (oh, ow) = (src.height / patch, src.width / patch);
    let mut gathered = Mat::zeros(oh * ow, patch * patch * c);
    for gy in 0..oh {
        for gx in 0..ow {
            let row = gathered.row_mut(gy * ow + gx);
            let mut at = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let src_row = src.tokens.row((gy * patch + py) * src.width + gx * patch + px);
                    row[at..at + c].copy_from_slice(src_row);
                    at += c;
                }
            }
        }
    }
    Ok(Grid { height: oh, width: ow, tokens: gathered.linear(w, Some(b)) })
}

fn bundle_mat(bundle: &WeightBundle, name: &str) -> Mat<f32> {
    let t = bundle.get(name);
    Mat::from_vec(t.shape[0], t.shape[1], t.data.clone())
}

/// One grid scan block: pre-norm, main/gate projections, the four
/// directional scans merged back, gate multiply, output projection,
/// residual add. Grid scans use the steady-state boundary condition so
/// that a constant grid stays constant through the block.
fn vss_block(
    grid: &Grid,
    bundle: &WeightBundle,
    prefix: &str,
    state: usize,
) -> Result<Grid, SeqModelError> {
    let width = grid.tokens.cols();
    let norm_scale = bundle.slice(&format!("{prefix}.norm"));
    let mut normed = Mat::zeros(grid.tokens.rows(), width);
    for r in 0..grid.tokens.rows() {
        rms_normalize(grid.tokens.row(r), norm_scale, normed.row_mut(r));
    }
    let main = normed.linear(
        &bundle_mat(bundle, &format!("{prefix}.in_w")),
        Some(bundle.slice(&format!("{prefix}.in_b"))),
    );
    let mut gate = normed.linear(
        &bundle_mat(bundle, &format!("{prefix}.gate_w")),
        Some(bundle.slice(&format!("{prefix}.gate_b"))),
    );
    gate.data_mut().iter_mut().for_each(|v| *v = silu(*v));

    let sp = selective_params_from_bundle(bundle, prefix, width, state);
    let main_grid = Grid { height: grid.height, width: grid.width, tokens: main };
    let dirs = cross_scan(&main_grid);
    let mut scanned = Vec::with_capacity(4);
    for dir in &dirs {
        let out = scan_impl(&sp, dir.data(), dir.rows(), ScanInit::SteadyState)?;
        scanned.push(Mat::from_vec(dir.rows(), width, out));
    }
    let scanned: [Mat<f32>; 4] = scanned.try_into().expect("four directions");
    let merged = cross_merge(&scanned, grid.height, grid.width);

    let mut gated = gate;
    for (g, s) in gated.data_mut().iter_mut().zip(merged.tokens.data()) {
        *g *= s;
    }
    let projected = gated.linear(
        &bundle_mat(bundle, &format!("{prefix}.out_w")),
        Some(bundle.slice(&format!("{prefix}.out_b"))),
    );
    let tokens = grid
        .tokens
        .add(&projected)
        .map_err(|e| SeqModelError::ShapeMismatch(e.to_string()))?;
    Ok(Grid { height: grid.height, width: grid.width, tokens })
}

fn upsample_bilinear(src: &Grid, height: usize, width: usize) -> Grid {
    let c = src.tokens.cols();
    let mut tokens = Mat::zeros(height * width, c);
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    for y in 0..height {
        for x in 0..width {
            let gy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
            let gx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(src.height - 1);
            let x1 = (x0 + 1).min(src.width - 1);
            let fy = (gy - y0 as f64) as f32;
            let fx = (gx - x0 as f64) as f32;
            let r00 = src.tokens.row(y0 * src.width + x0);
            let r01 = src.tokens.row(y0 * src.width + x1);
            let r10 = src.tokens.row(y1 * src.width + x0);
            let r11 = src.tokens.row(y1 * src.width + x1);
            let out = tokens.row_mut(y * width + x);
            for i in 0..c {
                let top = r00[i] + fx * (r01[i] - r00[i]);
                let bot = r10[i] + fx * (r11[i] - r10[i]);
                out[i] = top + fy * (bot - top);
            }
        }
    }
    Grid { height, width, tokens }
}

fn sample_bilinear(grid: &Grid, gx: f64, gy: f64, out: &mut [f32]) {
    let gx = gx.clamp(0.0, (grid.width - 1) as f64);
    let gy = gy.clamp(0.0, (grid.height - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(grid.width - 1);
    let y1 = (y0 + 1).min(grid.height - 1);
    let fx = (gx - x0 as f64) as f32;
    let fy = (gy - y0 as f64) as f32;
    let r00 = grid.tokens.row(y0 * grid.width + x0);
    let r01 = grid.tokens.row(y0 * grid.width + x1);
    let r10 = grid.tokens.row(y1 * grid.width + x0);
    let r11 = grid.tokens.row(y1 * grid.width + x1);
    for i in 0..out.len() {
        let top = r00[i] + fx * (r01[i] - r00[i]);
        let bot = r10[i] + fx * (r11[i] - r10[i]);
        out[i] = top + fy * (bot - top);
    }
}

/// Compute the fused multi-scale descriptor grid of a masked image.
pub fn rgb_feature_grid(
    image: &ColorImage,
    mask: &Mask,
    bundle: &WeightBundle,
) -> Result<Grid, SeqModelError> {
    let cfg = &bundle.config().rgb;
    if image.width != cfg.input || image.height != cfg.input {
        return Err(SeqModelError::ShapeMismatch(format!(
            "image is {}x{}, extractor expects {}x{}",
            image.width, image.height, cfg.input, cfg.input
        )));
    }
    if mask.width != image.width || mask.height != image.height {
        return Err(SeqModelError::ShapeMismatch(
            "mask dimensions differ from image".into(),
        ));
    }

    // Background suppression: the extractor sees the segmented object only.
    let mut pixels = Mat::zeros(cfg.input * cfg.input, 3);
    for v in 0..cfg.input {
        for u in 0..cfg.input {
            if mask.at(u, v) {
                let rgb = image.at(u, v);
                pixels.row_mut(v * cfg.input + u).copy_from_slice(&rgb);
            }
        }
    }
    let mut grid = Grid { height: cfg.input, width: cfg.input, tokens: pixels };

    let fusion_side = bundle.config().rgb_grid();
    let mut stage_outputs = Vec::with_capacity(cfg.widths.len());
    for (s, _width) in cfg.widths.iter().enumerate() {
        let patch = if s == 0 { cfg.patch } else { 2 };
        grid = patch_embed(
            &grid,
            patch,
            &bundle_mat(bundle, &format!("rgb.stage{s}.patch.w")),
            bundle.slice(&format!("rgb.stage{s}.patch.b")),
        )?;
        for b in 0..cfg.blocks_per_stage {
            grid = vss_block(&grid, bundle, &format!("rgb.stage{s}.block{b}"), cfg.state)?;
        }
        stage_outputs.push(grid.clone());
    }

    // Multi-scale fusion at the first-stage resolution.
    let fused_c = bundle.config().rgb_fused_channels();
    let mut concat = Mat::zeros(fusion_side * fusion_side, fused_c);
    let mut at = 0;
    for stage in &stage_outputs {
        let up = if stage.height == fusion_side {
            stage.clone()
        } else {
            upsample_bilinear(stage, fusion_side, fusion_side)
        };
        let c = up.tokens.cols();
        for pos in 0..fusion_side * fusion_side {
            concat.row_mut(pos)[at..at + c].copy_from_slice(up.tokens.row(pos));
        }
        at += c;
    }
    let fused = concat.linear(
        &bundle_mat(bundle, "rgb.fuse.w"),
        Some(bundle.slice("rgb.fuse.b")),
    );
    Ok(Grid { height: fusion_side, width: fusion_side, tokens: fused })
}

/// Read per-point image features from a fused grid by bilinear sampling at
/// each point's pixel coordinate (expressed in input-image coordinates).
/// Output row `i` corresponds to point `i`.
pub fn sample_point_features(
    fused: &Grid,
    pixel_coords: &[[u32; 2]],
    input_side: usize,
    bundle: &WeightBundle,
) -> Result<FeatureMap, SeqModelError> {
    let scale = fused.width as f64 / input_side as f64;
    let mut out = Mat::zeros(pixel_coords.len(), bundle.config().feature_dim);
    for (i, &[u, v]) in pixel_coords.iter().enumerate() {
        if u as usize >= input_side || v as usize >= input_side {
            return Err(SeqModelError::OutOfBounds { u: u as f64, v: v as f64 });
        }
        let gx = (u as f64 + 0.5) * scale - 0.5;
        let gy = (v as f64 + 0.5) * scale - 0.5;
        sample_bilinear(fused, gx, gy, out.row_mut(i));
    }
    Ok(out)
}

/// Full image path: fused grid plus per-point sampling.
pub fn rgb_ssm_forward(
    image: &ColorImage,
    mask: &Mask,
    pixel_coords: &[[u32; 2]],
    bundle: &WeightBundle,
) -> Result<FeatureMap, SeqModelError> {
    let fused = rgb_feature_grid(image, mask, bundle)?;
    sample_point_features(&fused, pixel_coords, bundle.config().rgb.input, bundle)
}
