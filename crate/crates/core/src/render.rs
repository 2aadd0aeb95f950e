//! Rasterization of templates into K-channel part heatmaps.
//!
//! Two independent paths produce the same picture: [`render_analytic`]
//! evaluates each transformed Gaussian in closed form, [`render_warped`]
//! resamples the canonical rendering through the inverse affine map. Pixel
//! `(row, col)` of an `n x n` map has its centre at normalized
//! `((2 col + 1) / n - 1, (2 row + 1) / n - 1)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{apply_point, transform_gaussian, AffineTransform, Cov2, Point};
use crate::template::Template;

pub const DEFAULT_RESOLUTION: usize = 128;
pub const MIN_RESOLUTION: usize = 8;

/// Samples with Mahalanobis distance squared beyond this are left at zero
/// (their value would be below `exp(-25)`).
pub const SUPPORT_QUAD: f64 = 50.0;

const PMAP_MAGIC: &[u8; 4] = b"PMAP";

/// A `channels x size x size` stack of heatmaps, channel-major and row-major
/// within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMaps {
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl PartMaps {
    pub fn zeros(channels: usize, size: usize) -> Self {
        PartMaps {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    pub fn from_data(channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * size * size {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels}x{size}x{size} maps",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "map value {v} outside [0, 1]"
            )));
        }
        Ok(PartMaps {
            channels,
            size,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Height and width in pixels.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[(k * self.size + row) * self.size + col]
    }

    pub fn same_shape(&self, other: &PartMaps) -> bool {
        self.channels == other.channels && self.size == other.size
    }

    /// Encodes the binary part-map format: `PMAP`, then K, H, W as u32 LE,
    /// then K*H*W f32 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(PMAP_MAGIC);
        for dim in [self.channels, self.size, self.size] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!("part map: {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != PMAP_MAGIC {
            return Err(Error::Format("part map: bad magic".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (k, h, w) = (dim(0) as usize, dim(1) as usize, dim(2) as usize);
        if h != w {
            return Err(Error::Format(format!("part map: maps must be square, got {h}x{w}")));
        }
        let expected = k
            .checked_mul(h)
            .and_then(|n| n.checked_mul(w))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(16));
        if expected != Some(bytes.len()) {
            return Err(Error::Format(format!(
                "part map: {}x{}x{} header does not match {} bytes",
                k,
                h,
                w,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("part map: non-finite value".into()));
        }
        PartMaps::from_data(k, h, data).map_err(|e| Error::Format(format!("part map: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Normalized coordinate of pixel centre `i` on an `n`-pixel axis.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Fractional pixel index of normalized coordinate `x` (inverse of [`pixel_center`]).
pub fn pixel_index(x: f64, n: usize) -> f64 {
    ((x + 1.0) * n as f64 - 1.0) / 2.0
}

/// Inclusive pixel range whose centres fall within `[lo, hi]`, clipped to the grid.
pub(crate) fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = pixel_index(lo, n).ceil().max(0.0);
    let last = pixel_index(hi, n).floor().min(n as f64 - 1.0);
    (first <= last).then(|| (first as usize, last as usize))
}

fn check_inputs(template: &Template, transforms: &[AffineTransform], size: usize) -> Result<()> {
    if transforms.len() != template.num_parts() {
        return Err(Error::ShapeMismatch(format!(
            "{} transforms for {} parts",
            transforms.len(),
            template.num_parts()
        )));
    }
    if size < MIN_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "resolution {size} below minimum {MIN_RESOLUTION}"
        )));
    }
    Ok(())
}

pub(crate) fn singular(template: &Template, k: usize, t: &AffineTransform) -> Error {
    Error::SingularTransform {
        part: template.parts()[k].id.clone(),
        det: t.det(),
    }
}

/// Pixel rectangle `(cols, rows)` bounding the `SUPPORT_QUAD` ellipse.
pub(crate) fn support_box(
    size: usize,
    mean: Point,
    cov: &Cov2,
) -> Option<((usize, usize), (usize, usize))> {
    let hx = (SUPPORT_QUAD * cov.xx).sqrt();
    let hy = (SUPPORT_QUAD * cov.yy).sqrt();
    Some((
        pixel_span(mean.x - hx, mean.x + hx, size)?,
        pixel_span(mean.y - hy, mean.y + hy, size)?,
    ))
}

/// Paints one unnormalized Gaussian (peak 1) into a zeroed `size x size` channel.
pub(crate) fn raster_gaussian(out: &mut [f64], size: usize, mean: Point, cov: &Cov2) {
    let Some(prec) = cov.inverse() else { return };
    let Some(((c0, c1), (r0, r1))) = support_box(size, mean, cov) else {
        return;
    };
    for row in r0..=r1 {
        let dy = pixel_center(row, size) - mean.y;
        let line = &mut out[row * size..(row + 1) * size];
        for col in c0..=c1 {
            let dx = pixel_center(col, size) - mean.x;
            let q = prec.quad_form(Point::new(dx, dy));
            if q <= SUPPORT_QUAD {
                line[col] = (-0.5 * q).exp();
            }
        }
    }
}

/// Evaluates every transformed part Gaussian at the pixel centres.
pub fn render_analytic(
    template: &Template,
    transforms: &[AffineTransform],
    size: usize,
) -> Result<PartMaps> {
    check_inputs(template, transforms, size)?;
    let mut maps = PartMaps::zeros(template.num_parts(), size);
    let gaussians = template
        .parts()
        .iter()
        .zip(transforms)
        .enumerate()
        .map(|(k, (part, t))| {
            transform_gaussian(t, &part.gaussian()).map_err(|_| singular(template, k, t))
        })
        .collect::<Result<Vec<_>>>()?;
    maps.data
        .par_chunks_mut(size * size)
        .zip(gaussians.par_iter())
        .for_each(|(channel, g)| raster_gaussian(channel, size, g.mean, &g.cov));
    Ok(maps)
}

/// Bilinear sample at fractional pixel `(u, v)`; taps outside the grid read 0.
fn bilinear(channel: &[f64], size: usize, u: f64, v: f64) -> f64 {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let tap = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= size as f64 || c >= size as f64 {
            0.0
        } else {
            channel[r as usize * size + c as usize]
        }
    };
    let top = if fu == 0.0 {
        tap(v0, u0)
    } else {
        (1.0 - fu) * tap(v0, u0) + fu * tap(v0, u0 + 1.0)
    };
    if fv == 0.0 {
        return top;
    }
    let bottom = if fu == 0.0 {
        tap(v0 + 1.0, u0)
    } else {
        (1.0 - fu) * tap(v0 + 1.0, u0) + fu * tap(v0 + 1.0, u0 + 1.0)
    };
    (1.0 - fv) * top + fv * bottom
}

/// Renders the canonical template once, then warps each channel by its
/// transform using inverse mapping, bilinear interpolation and zero padding.
pub fn render_warped(
    template: &Template,
    transforms: &[AffineTransform],
    size: usize,
) -> Result<PartMaps> {
    check_inputs(template, transforms, size)?;
    let inverses = transforms
        .iter()
        .enumerate()
        .map(|(k, t)| t.inverse().ok_or_else(|| singular(template, k, t)))
        .collect::<Result<Vec<_>>>()?;
    let identity = vec![AffineTransform::IDENTITY; template.num_parts()];
    let canonical = render_analytic(template, &identity, size)?;
    let mut maps = PartMaps::zeros(template.num_parts(), size);
    maps.data
        .par_chunks_mut(size * size)
        .enumerate()
        .for_each(|(k, channel)| {
            let src = canonical.channel(k);
            let inv = &inverses[k];
            for row in 0..size {
                let y = pixel_center(row, size);
                for col in 0..size {
                    let q = apply_point(inv, Point::new(pixel_center(col, size), y));
                    channel[row * size + col] =
                        bilinear(src, size, pixel_index(q.x, size), pixel_index(q.y, size));
                }
            }
        });
    Ok(maps)
}

/// Deterministic colour for part `k`; hues step by the golden angle and stay
/// clear of pure red, which marks anchors.
pub fn part_color(k: usize) -> [u8; 3] {
    let hue = (40.0 + 137.507_764 * k as f64) % 280.0 + 40.0;
    hsv_to_rgb(hue, 0.8, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

/// Blends part colours over a grayscale background. At each pixel the part
/// with the largest value wins (lowest channel on ties) and is mixed in with
/// that value as opacity.
pub fn composite_overlay(maps: &PartMaps, background: &GrayImage) -> Result<RgbImage> {
    let n = maps.size();
    if background.width() as usize != n || background.height() as usize != n {
        return Err(Error::ShapeMismatch(format!(
            "background is {}x{}, maps are {n}x{n}",
            background.width(),
            background.height()
        )));
    }
    let colors: Vec<[u8; 3]> = (0..maps.channels()).map(part_color).collect();
    let mut out = RgbImage::new(n as u32, n as u32);
    for row in 0..n {
        for col in 0..n {
            let bg = background.get_pixel(col as u32, row as u32).0[0] as f64;
            let mut best = (0.0, 0);
            for k in 0..maps.channels() {
                let v = maps.get(k, row, col);
                if v > best.0 {
                    best = (v, k);
                }
            }
            let (alpha, k) = best;
            let px = if alpha > 0.0 {
                let c = colors[k];
                let mix = |ch: u8| (alpha * ch as f64 + (1.0 - alpha) * bg).round() as u8;
                Rgb([mix(c[0]), mix(c[1]), mix(c[2])])
            } else {
                let g = bg as u8;
                Rgb([g, g, g])
            };
            out.put_pixel(col as u32, row as u32, px);
        }
    }
    Ok(out)
}

/// PNG encoding of an overlay.
pub fn png_bytes(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

/// Draws small red crosses at normalized points.
pub fn mark_points(image: &mut RgbImage, points: &[Point]) {
    let n = image.width() as i64;
    for p in points {
        let c = pixel_index(p.x, n as usize).round() as i64;
        let r = pixel_index(p.y, n as usize).round() as i64;
        for d in -2i64..=2 {
            for (rr, cc) in [(r + d, c), (r, c + d)] {
                if (0..n).contains(&rr) && (0..n).contains(&cc) {
                    image.put_pixel(cc as u32, rr as u32, Rgb([255, 0, 0]));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{canonical_human_template, GaussianPart, Template};

    fn single_part(mean: Point, var: Point) -> Template {
        let part = |id: &str, mean| GaussianPart {
            id: id.into(),
            label: id.into(),
            mean,
            variance: var,
            anchors: vec![Point::ORIGIN],
        };
        Template::new(vec![part("a", mean)], vec![], vec![], None).unwrap()
    }

    #[test]
    fn pixel_mapping_round_trips() {
        for n in [8, 100, 128] {
            for i in 0..n {
                assert!((pixel_index(pixel_center(i, n), n) - i as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn peak_near_mean() {
        let t = canonical_human_template();
        let id = vec![AffineTransform::IDENTITY; t.num_parts()];
        let maps = render_analytic(&t, &id, 128).unwrap();
        for (k, part) in t.parts().iter().enumerate() {
            let col = pixel_index(part.mean.x, 128).round() as usize;
            let row = pixel_index(part.mean.y, 128).round() as usize;
            // half a pixel in each axis from the mean at most
            let half = 1.0 / 128.0;
            let falloff = (-0.5 * (half * half / part.variance.x + half * half / part.variance.y)).exp();
            let v = maps.get(k, row, col);
            assert!(v <= 1.0 && v >= falloff, "part {k}: {v} < {falloff}");
        }
    }

    #[test]
    fn one_sigma_value() {
        // mean on a pixel centre, sigma = 4 pixels
        let mean = Point::new(pixel_center(64, 128), pixel_center(64, 128));
        let sigma = 4.0 * 2.0 / 128.0;
        let t = single_part(mean, Point::new(sigma * sigma, 0.01));
        let maps = render_analytic(&t, &[AffineTransform::IDENTITY], 128).unwrap();
        assert_eq!(maps.get(0, 64, 64), 1.0);
        assert!((maps.get(0, 64, 68) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn isotropic_symmetry() {
        let mean = Point::new(pixel_center(60, 128), pixel_center(70, 128));
        let t = single_part(mean, Point::new(0.004, 0.004));
        let maps = render_analytic(&t, &[AffineTransform::IDENTITY], 128).unwrap();
        for d in 1..10 {
            assert!((maps.get(0, 70, 60 + d) - maps.get(0, 70 + d, 60)).abs() <= 1e-12);
        }
    }

    #[test]
    fn warped_identity_matches_analytic() {
        let t = canonical_human_template();
        let id = vec![AffineTransform::IDENTITY; t.num_parts()];
        let a = render_analytic(&t, &id, 128).unwrap();
        let w = render_warped(&t, &id, 128).unwrap();
        for (x, y) in a.data().iter().zip(w.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn whole_pixel_translation_shifts_exactly() {
        let t = canonical_human_template();
        let (dc, dr) = (5usize, 3usize);
        let shift = AffineTransform::translation(2.0 * dc as f64 / 128.0, 2.0 * dr as f64 / 128.0);
        let canonical = render_analytic(&t, &vec![AffineTransform::IDENTITY; 18], 128).unwrap();
        let moved = render_warped(&t, &vec![shift; 18], 128).unwrap();
        for k in 0..18 {
            for row in 0..128 {
                for col in 0..128 {
                    let expect = if row >= dr && col >= dc {
                        canonical.get(k, row - dr, col - dc)
                    } else {
                        0.0
                    };
                    assert_eq!(moved.get(k, row, col), expect);
                }
            }
        }
    }

    #[test]
    fn singular_transform_names_part() {
        let t = canonical_human_template();
        let mut tr = vec![AffineTransform::IDENTITY; 18];
        tr[3] = AffineTransform::scaling(0.0, 1.0);
        match render_analytic(&t, &tr, 32) {
            Err(Error::SingularTransform { part, .. }) => assert_eq!(part, "pelvis"),
            other => panic!("{other:?}"),
        }
        assert!(render_warped(&t, &tr, 32).is_err());
    }

    #[test]
    fn bad_inputs() {
        let t = canonical_human_template();
        assert!(matches!(
            render_analytic(&t, &[AffineTransform::IDENTITY], 32),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            render_analytic(&t, &vec![AffineTransform::IDENTITY; 18], 4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pmap_bytes() {
        let t = canonical_human_template();
        let maps = render_analytic(&t, &vec![AffineTransform::IDENTITY; 18], 16).unwrap();
        let bytes = maps.to_bytes();
        assert_eq!(bytes.len(), 16 + 18 * 16 * 16 * 4);
        assert_eq!(&bytes[..4], b"PMAP");
        assert_eq!(&bytes[4..8], &18u32.to_le_bytes());
        let back = PartMaps::from_bytes(&bytes).unwrap();
        for (a, b) in maps.data().iter().zip(back.data()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PartMaps::from_bytes(&bad), Err(Error::Format(_))));
        assert!(PartMaps::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn overlay_rules() {
        let n = 16;
        let bg = GrayImage::from_fn(n, n, |x, y| image::Luma([(x * 7 + y * 3) as u8]));
        let zeros = PartMaps::zeros(3, n as usize);
        let out = composite_overlay(&zeros, &bg).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let g = bg.get_pixel(x, y).0[0];
            assert_eq!(p.0, [g, g, g]);
        }

        let mut data = vec![0.0; 2 * 16 * 16];
        data[5 * 16 + 7] = 1.0;
        data[256 + 5 * 16 + 7] = 0.4;
        data[5 * 16 + 8] = 0.3;
        data[256 + 5 * 16 + 8] = 0.6;
        let maps = PartMaps::from_data(2, 16, data.clone()).unwrap();
        let out = composite_overlay(&maps, &bg).unwrap();
        assert_eq!(out.get_pixel(7, 5).0, part_color(0));

        // swapping channels swaps colours only: the winner is the max value
        let mut swapped = data[256..].to_vec();
        swapped.extend_from_slice(&data[..256]);
        let out2 = composite_overlay(&PartMaps::from_data(2, 16, swapped).unwrap(), &bg).unwrap();
        let bgv = bg.get_pixel(8, 5).0[0] as f64;
        let expect = |c: [u8; 3]| c.map(|ch| (0.6 * ch as f64 + 0.4 * bgv).round() as u8);
        assert_eq!(out.get_pixel(8, 5).0, expect(part_color(1)));
        assert_eq!(out2.get_pixel(8, 5).0, expect(part_color(0)));

        let small = GrayImage::new(8, 8);
        assert!(matches!(
            composite_overlay(&maps, &small),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
