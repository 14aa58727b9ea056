//! Scene directories: one file per observation plus a `scene.txt` header.
//!
//! HS: `yh.cube` (low-resolution grid), `ym.cube`, `psf.txt`,
//! `response.txt`, `mask.txt`, `scene.txt`, and `truth.cube` when known.
//! Pair: `y_b.cube`, `y_n.cube`, `psf.txt`, `scene.txt`, optional `truth.cube`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use pnp_core::fft::CyclicBlur;
use pnp_core::hs::HsScene;
use pnp_core::io::{
    format_matrix, format_psf, parse_key_values, parse_matrix, parse_psf, read_cube, read_to_string, write_cube,
};
use pnp_core::pair::PairScene;
use pnp_core::{Cube, Error, ImageGeometry, Result};

pub struct Header(Vec<(String, String)>);

impl Header {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Header(parse_key_values(&read_to_string(dir.join("scene.txt"))?)?))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("scene.txt lacks `{key}`")))?;
        v.parse()
            .map_err(|_| Error::Format(format!("scene.txt: bad value for `{key}`: {v}")))
    }
}

fn truth_if_present(dir: &Path) -> Result<Option<Cube>> {
    let p = dir.join("truth.cube");
    if p.exists() {
        Ok(Some(read_cube(p)?))
    } else {
        Ok(None)
    }
}

pub fn write_hs(dir: &Path, scene: &HsScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = scene.geometry;
    if let Some(z) = &scene.truth {
        write_cube(dir.join("truth.cube"), &Cube::new(g, z.clone())?)?;
    }
    // kept pixels in increasing index order are exactly the low-res grid in its own order
    write_cube(dir.join("yh.cube"), &Cube::new(scene.low_res_geometry()?, scene.yh.clone())?)?;
    write_cube(dir.join("ym.cube"), &Cube::new(g.with_bands(scene.ms_bands()), scene.ym.clone())?)?;
    fs::write(dir.join("psf.txt"), format_psf(scene.blur.psf()))?;
    fs::write(dir.join("response.txt"), format_matrix(&scene.response))?;
    let mask = DMatrix::from_fn(g.height, g.width, |r, c| if scene.mask[g.index(r, c)] { 1.0 } else { 0.0 });
    fs::write(dir.join("mask.txt"), format_matrix(&mask))?;
    fs::write(
        dir.join("scene.txt"),
        format!(
            "kind = hs\ndecimation = {}\nsigma_h = {}\nsigma_m = {}\n",
            scene.decimation, scene.sigma_h, scene.sigma_m
        ),
    )?;
    Ok(())
}

pub fn read_hs(dir: &Path) -> Result<HsScene> {
    let h = Header::read(dir)?;
    if h.get("kind") != Some("hs") {
        return Err(Error::Format(format!("{} is not an hs scene", dir.display())));
    }
    let ym = read_cube(dir.join("ym.cube"))?;
    let yh = read_cube(dir.join("yh.cube"))?;
    let response = parse_matrix(&read_to_string(dir.join("response.txt"))?)?;
    let g = ImageGeometry::new(ym.geometry.height, ym.geometry.width, response.ncols())?;
    let mask_m = parse_matrix(&read_to_string(dir.join("mask.txt"))?)?;
    if mask_m.shape() != (g.height, g.width) {
        return Err(Error::Dimension("mask.txt differs from the MS grid".into()));
    }
    let mut mask = vec![false; g.pixels()];
    for c in 0..g.width {
        for r in 0..g.height {
            mask[g.index(r, c)] = mask_m[(r, c)] != 0.0;
        }
    }
    let blur = CyclicBlur::new(parse_psf(&read_to_string(dir.join("psf.txt"))?)?, g)?;
    let scene = HsScene {
        geometry: g,
        truth: truth_if_present(dir)?.map(|c| c.data),
        yh: yh.data,
        ym: ym.data,
        blur,
        mask,
        decimation: h.number("decimation")?,
        response,
        sigma_h: h.number("sigma_h")?,
        sigma_m: h.number("sigma_m")?,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_pair(dir: &Path, scene: &PairScene, kernel: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = scene.geometry;
    if let Some(t) = &scene.truth {
        write_cube(dir.join("truth.cube"), &Cube::from_band(g, t)?)?;
    }
    write_cube(dir.join("y_b.cube"), &Cube::from_band(g, &scene.y_b)?)?;
    write_cube(dir.join("y_n.cube"), &Cube::from_band(g, &scene.y_n)?)?;
    fs::write(dir.join("psf.txt"), format_psf(scene.blur.psf()))?;
    fs::write(
        dir.join("scene.txt"),
        format!(
            "kind = pair\nkernel = {kernel}\nsigma_n = {}\nsigma_b = {}\n",
            scene.sigma_n, scene.sigma_b
        ),
    )?;
    Ok(())
}

pub fn read_pair(dir: &Path) -> Result<PairScene> {
    let h = Header::read(dir)?;
    if h.get("kind") != Some("pair") {
        return Err(Error::Format(format!("{} is not a pair scene", dir.display())));
    }
    let (y_b, g) = pnp_core::io::read_image(dir.join("y_b.cube"))?;
    let (y_n, gn) = pnp_core::io::read_image(dir.join("y_n.cube"))?;
    if !g.same_grid(&gn) {
        return Err(Error::Dimension("y_b and y_n grids differ".into()));
    }
    let truth = match truth_if_present(dir)? {
        Some(c) if c.geometry.bands == 1 => Some(c.band(0)),
        Some(_) => return Err(Error::Format("pair truth must have one band".into())),
        None => None,
    };
    let scene = PairScene {
        geometry: g,
        truth,
        y_b,
        y_n,
        blur: CyclicBlur::new(parse_psf(&read_to_string(dir.join("psf.txt"))?)?, g)?,
        sigma_b: h.number("sigma_b")?,
        sigma_n: h.number("sigma_n")?,
    };
    scene.validate()?;
    Ok(scene)
}
