//! 4D cost volume: all-pairs scaled dot products between source and target
//! feature maps, plus the bilinear cost-map crop used by the decoder query
//! and the pretext task, and right/bottom zero padding to multiples of 8.
//!
//! Point coordinates throughout are `(x, y)` = (column, row), matching the
//! horizontal-first flow convention.

use crate::tensor::{Result, Tensor, TensorError};

pub struct CostVolume {
    /// `[H, W, H, W]`: source (row, col) major, then target (row, col).
    data: Tensor,
    grid_h: usize,
    grid_w: usize,
    scale: f64,
}

/// `data[x, y] = scale * <Fs(x), Ft(y)>` for every source/target pair.
/// Differentiable w.r.t. both feature maps.
pub fn build_cost_volume(fs: &Tensor, ft: &Tensor, scale: f64) -> Result<CostVolume> {
    if fs.rank() != 3 || fs.shape() != ft.shape() {
        return Err(TensorError::Shape(format!(
            "cost volume needs matching [Df,H,W] maps, got {:?} and {:?}",
            fs.shape(),
            ft.shape()
        )));
    }
    let (df, h, w) = (fs.shape()[0], fs.shape()[1], fs.shape()[2]);
    let rows_s = fs.reshape(&[df, h * w])?.permute(&[1, 0])?; // [HW, Df]
    let rows_t = ft.reshape(&[df, h * w])?.permute(&[1, 0])?;
    let vol = rows_s.matmul_nt(&rows_t)?.scale(scale)?; // [HW, HW]
    Ok(CostVolume {
        data: vol.reshape(&[h, w, h, w])?,
        grid_h: h,
        grid_w: w,
        scale,
    })
}

impl CostVolume {
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// All per-source-pixel cost maps, batched: `[H*W, H, W]`.
    pub fn maps(&self) -> Result<Tensor> {
        self.data
            .reshape(&[self.grid_h * self.grid_w, self.grid_h, self.grid_w])
    }

    /// Cost map of one source pixel (row-major index): `[H, W]`.
    pub fn map(&self, source_idx: usize) -> Result<Tensor> {
        let hw = self.grid_h * self.grid_w;
        if source_idx >= hw {
            return Err(TensorError::Invalid(format!(
                "source index {source_idx} out of {hw}"
            )));
        }
        self.maps()?
            .slice(0, source_idx, 1)?
            .reshape(&[self.grid_h, self.grid_w])
    }
}

/// Grid coordinates `[H*W, 2]` in (x, y) order, row-major over the grid.
pub fn grid_points(h: usize, w: usize, dtype: crate::tensor::DType) -> Tensor {
    let mut pts = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            pts.push(x as f64);
            pts.push(y as f64);
        }
    }
    Tensor::new(pts, &[h * w, 2], dtype).expect("static shape")
}

/// The integer offsets of an `r x r` window centered at zero, as an
/// `[r*r, 2]` tensor in (x, y) order, row-major over the window.
pub fn window_offsets(radius: usize, dtype: crate::tensor::DType) -> Tensor {
    let half = (radius as isize - 1) / 2;
    let mut data = Vec::with_capacity(radius * radius * 2);
    for dy in -half..=half {
        for dx in -half..=half {
            data.push(dx as f64);
            data.push(dy as f64);
        }
    }
    Tensor::new(data, &[radius * radius, 2], dtype).expect("static shape")
}

/// Crops `r x r` bilinear patches around per-map centers.
///
/// `maps: [B, H, W]`, `centers: [B, 2]` in (x, y); returns `[B, r*r]`,
/// zero outside the map, differentiable w.r.t. both maps and centers.
pub fn crop_cost_patches(maps: &Tensor, centers: &Tensor, radius: usize) -> Result<Tensor> {
    if radius % 2 == 0 {
        return Err(TensorError::Invalid(format!(
            "crop radius must be odd, got {radius}"
        )));
    }
    if maps.rank() != 3 || centers.rank() != 2 || centers.shape()[1] != 2 {
        return Err(TensorError::Shape(format!(
            "crop expects maps [B,H,W] and centers [B,2], got {:?} and {:?}",
            maps.shape(),
            centers.shape()
        )));
    }
    let (b, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let offsets = window_offsets(radius, centers.dtype());
    let points = centers.reshape(&[b, 1, 2])?.add(&offsets)?; // [B, r*r, 2]
    maps.reshape(&[b, 1, h, w])?
        .bilinear_sample(&points)? // [B, r*r, 1]
        .reshape(&[b, radius * radius])
}

/// Single-map convenience wrapper: `[H, W]` and `[2]` -> `[r, r]`.
pub fn crop_cost_patch(map: &Tensor, center: &Tensor, radius: usize) -> Result<Tensor> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let batched = crop_cost_patches(
        &map.reshape(&[1, h, w])?,
        &center.reshape(&[1, 2])?,
        radius,
    )?;
    batched.reshape(&[radius, radius])
}

fn ceil_mult8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Zero-pads the last two axes on the right and bottom up to multiples of 8.
pub fn pad_to_mult8(t: &Tensor) -> Result<Tensor> {
    if t.rank() < 2 {
        return Err(TensorError::Shape(format!(
            "pad_to_mult8 needs rank >= 2, got {:?}",
            t.shape()
        )));
    }
    let r = t.rank();
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    let (ph, pw) = (ceil_mult8(h) - h, ceil_mult8(w) - w);
    if ph == 0 && pw == 0 {
        return Ok(t.clone());
    }
    let mut pads = vec![(0usize, 0usize); r];
    pads[r - 2] = (0, ph);
    pads[r - 1] = (0, pw);
    t.pad(&pads)
}
