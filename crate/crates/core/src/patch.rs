//! Unit-stride patch extraction and assembly on a periodic grid.
//!
//! Patch `i` is anchored with its top-left corner at pixel `i` and wraps
//! around the image borders, so an `n`-pixel image yields exactly `n`
//! patches and every pixel is covered by `side²` of them. Within a patch,
//! entries are ordered column-major like the image itself.

use crate::error::{dim_err, Error, Result};
use crate::geometry::ImageGeometry;
use crate::par;

/// Vectorized patches of one image band, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// Row-major `N x n_p` buffer.
    pub patches: Vec<f64>,
    pub patch_side: usize,
    /// Per-patch means, present only after [`remove_means`].
    pub means: Option<Vec<f64>>,
    pub geometry: ImageGeometry,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.geometry.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let np = self.patch_len();
        &self.patches[i * np..(i + 1) * np]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        let np = self.patch_len();
        &mut self.patches[i * np..(i + 1) * np]
    }

    /// Builds a set from raw rows, checking the shape against the geometry.
    pub fn from_rows(
        patches: Vec<f64>,
        patch_side: usize,
        geometry: ImageGeometry,
    ) -> Result<Self> {
        let set = PatchSet {
            patches,
            patch_side,
            means: None,
            geometry,
        };
        set.check_shape()?;
        Ok(set)
    }

    fn check_shape(&self) -> Result<()> {
        let g = self.geometry;
        if self.patch_side == 0 || self.patch_side > g.height.min(g.width) {
            return dim_err(format!(
                "patch side {} incompatible with {}x{} image",
                self.patch_side, g.height, g.width
            ));
        }
        if self.patches.len() != g.pixels() * self.patch_len() {
            return dim_err(format!(
                "patch buffer has {} entries, expected {} patches of {}",
                self.patches.len(),
                g.pixels(),
                self.patch_len()
            ));
        }
        if let Some(m) = &self.means {
            if m.len() != g.pixels() {
                return dim_err("mean vector length differs from patch count");
            }
        }
        Ok(())
    }
}

/// Image index of entry `k` of the patch anchored at pixel `anchor`.
#[inline]
pub fn patch_pixel(geometry: &ImageGeometry, side: usize, anchor: usize, k: usize) -> usize {
    let (r, c) = geometry.coords(anchor);
    let (dr, dc) = (k % side, k / side);
    geometry.index((r + dr) % geometry.height, (c + dc) % geometry.width)
}

fn check_side(geometry: &ImageGeometry, side: usize) -> Result<()> {
    if side == 0 || side > geometry.height || side > geometry.width {
        return dim_err(format!(
            "patch side {side} exceeds image dimensions {}x{}",
            geometry.height, geometry.width
        ));
    }
    Ok(())
}

/// Extracts all `n` periodic patches of a single band.
pub fn extract_patches(band: &[f64], geometry: ImageGeometry, side: usize) -> Result<PatchSet> {
    let geometry = geometry.with_bands(1);
    check_side(&geometry, side)?;
    if band.len() != geometry.pixels() {
        return dim_err(format!(
            "band has {} pixels, geometry expects {}",
            band.len(),
            geometry.pixels()
        ));
    }
    let np = side * side;
    let mut patches = vec![0.0; geometry.pixels() * np];
    par::fill_rows(&mut patches, np, |i, row| {
        for (k, v) in row.iter_mut().enumerate() {
            *v = band[patch_pixel(&geometry, side, i, k)];
        }
    });
    Ok(PatchSet {
        patches,
        patch_side: side,
        means: None,
        geometry,
    })
}

/// Puts patches back and averages overlaps: `(1/n_p) Σ_i P_iᵀ patch_i`.
///
/// Accumulation runs in patch order, so the result is identical however the
/// patches were produced.
pub fn assemble_patches(set: &PatchSet) -> Result<Vec<f64>> {
    set.check_shape()?;
    Ok(assemble_rows(&set.patches, &set.geometry, set.patch_side))
}

pub(crate) fn assemble_rows(rows: &[f64], geometry: &ImageGeometry, side: usize) -> Vec<f64> {
    let np = side * side;
    let mut out = vec![0.0; geometry.pixels()];
    for (i, row) in rows.chunks_exact(np).enumerate() {
        for (k, &v) in row.iter().enumerate() {
            out[patch_pixel(geometry, side, i, k)] += v;
        }
    }
    let scale = 1.0 / np as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Subtracts each patch's mean and stores it.
pub fn remove_means(set: &PatchSet) -> Result<PatchSet> {
    if set.means.is_some() {
        return Err(Error::State("patch means already removed".into()));
    }
    let np = set.patch_len();
    let mut out = set.clone();
    let means: Vec<f64> = out
        .patches
        .chunks_exact_mut(np)
        .map(|row| {
            let m = row.iter().sum::<f64>() / np as f64;
            row.iter_mut().for_each(|v| *v -= m);
            m
        })
        .collect();
    out.means = Some(means);
    Ok(out)
}

/// Adds the stored means back and clears them.
pub fn restore_means(set: &PatchSet) -> Result<PatchSet> {
    let means = set
        .means
        .as_ref()
        .ok_or_else(|| Error::State("no stored patch means to restore".into()))?;
    let np = set.patch_len();
    let mut out = set.clone();
    for (row, &m) in out.patches.chunks_exact_mut(np).zip(means) {
        row.iter_mut().for_each(|v| *v += m);
    }
    out.means = None;
    Ok(out)
}
