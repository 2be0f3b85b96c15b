use super::volume::{Grid, MaskVolume, Volume};
use crate::error::{shape_err, Error, Result};

/// Foreground is every voxel above this fraction of the volume maximum.
pub const FOREGROUND_FRACTION: f32 = 0.1;

/// Square in-plane window `[y0, y0 + side) x [x0, x0 + side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

/// Square window around the in-plane foreground bounding box of all slices,
/// grown symmetrically and shifted back inside the image where needed.
pub fn skull_square(v: &Volume) -> Result<CropBox> {
    let (_, max) = v.min_max();
    let threshold = FOREGROUND_FRACTION * max;
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (usize::MAX, 0, usize::MAX, 0);
    for d in 0..v.depth {
        for (i, &val) in v.slice(d).iter().enumerate() {
            if val > threshold && max > 0.0 {
                let (y, x) = (i / v.width, i % v.width);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
    }
    if y_lo == usize::MAX {
        return Err(Error::Preprocess(format!(
            "no voxel exceeds {}% of the volume maximum {max}",
            FOREGROUND_FRACTION * 100.0
        )));
    }
    let (bh, bw) = (y_hi - y_lo + 1, x_hi - x_lo + 1);
    let side = bh.max(bw).min(v.height.min(v.width));
    let place = |lo: usize, len: usize, extent: usize| -> usize {
        let start = lo as isize - ((side as isize - len as isize) / 2);
        start.clamp(0, (extent - side) as isize) as usize
    };
    Ok(CropBox {
        y0: place(y_lo, bh, v.height),
        x0: place(x_lo, bw, v.width),
        side,
    })
}

pub fn crop<T: Copy>(g: &Grid<T>, b: CropBox) -> Result<Grid<T>> {
    if b.side == 0 || b.y0 + b.side > g.height || b.x0 + b.side > g.width {
        return Err(shape_err!(
            "crop {b:?} does not fit a {}x{} slice",
            g.height,
            g.width
        ));
    }
    let mut data = Vec::with_capacity(g.depth * b.side * b.side);
    for d in 0..g.depth {
        let s = g.slice(d);
        for y in b.y0..b.y0 + b.side {
            data.extend_from_slice(&s[y * g.width + b.x0..y * g.width + b.x0 + b.side]);
        }
    }
    Grid::new(g.depth, b.side, b.side, g.spacing, data)
}

pub fn crop_skull_square(v: &Volume) -> Result<Volume> {
    crop(v, skull_square(v)?)
}

/// Source coordinate of target index `i` under corner alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let c = source_coord(i, src, dst);
    if src == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (c.floor() as usize).min(src - 2);
    (i0, i0 + 1, c - i0 as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

fn resample_slice(src: &[f32], h: usize, w: usize, th: usize, tw: usize, out: &mut Vec<f32>) {
    let cols: Vec<(usize, usize, f64)> = (0..tw).map(|j| taps(j, w, tw)).collect();
    for i in 0..th {
        let (y0, y1, ty) = taps(i, h, th);
        for &(x0, x1, tx) in &cols {
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = lerp(at(y0, x0), at(y0, x1), tx);
            let bottom = lerp(at(y1, x0), at(y1, x1), tx);
            out.push(lerp(top, bottom, ty) as f32);
        }
    }
}

fn resampled_spacing(spacing: (f32, f32), from: (usize, usize), to: (usize, usize)) -> (f32, f32) {
    let scale = |s: f32, a: usize, b: usize| {
        if a > 1 && b > 1 {
            (s as f64 * (a - 1) as f64 / (b - 1) as f64) as f32
        } else {
            s
        }
    };
    (
        scale(spacing.0, from.0, to.0),
        scale(spacing.1, from.1, to.1),
    )
}

/// Per-slice corner-aligned bilinear resampling to `height x width`.
pub fn resample_bilinear(v: &Volume, height: usize, width: usize) -> Result<Volume> {
    if height == 0 || width == 0 {
        return Err(shape_err!(
            "resample target must be positive, got {height}x{width}"
        ));
    }
    let mut data = Vec::with_capacity(v.depth * height * width);
    for d in 0..v.depth {
        resample_slice(v.slice(d), v.height, v.width, height, width, &mut data);
    }
    let spacing = resampled_spacing(v.spacing, (v.height, v.width), (height, width));
    Grid::new(v.depth, height, width, spacing, data)
}

/// Masks follow the image grid: bilinear resampling of the 0/1 field, kept
/// where it reaches 0.5.
pub fn resample_mask(m: &MaskVolume, height: usize, width: usize) -> Result<MaskVolume> {
    let field = Grid::new(
        m.depth,
        m.height,
        m.width,
        m.spacing,
        m.data.iter().map(|&v| f32::from(v)).collect(),
    )?;
    let r = resample_bilinear(&field, height, width)?;
    Grid::new(
        r.depth,
        r.height,
        r.width,
        r.spacing,
        r.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    )
}

/// Per-volume min-max rescale to `[0, 1]`; constant volumes become zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        v.data
            .iter()
            .map(|&x| ((x as f64 - lo as f64) / range) as f32)
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Grid { data, ..v.clone() }
}

/// Crop to the skull square, resample to `size x size`, normalize. The mask
/// receives the same crop and resampling.
pub fn preprocess(v: &Volume, m: &MaskVolume, size: usize) -> Result<(Volume, MaskVolume)> {
    if !v.same_geometry(m) {
        return Err(shape_err!(
            "mask {}x{}x{} does not match volume {}x{}x{}",
            m.depth,
            m.height,
            m.width,
            v.depth,
            v.height,
            v.width
        ));
    }
    let b = skull_square(v)?;
    let (v, m) = (crop(v, b)?, crop(m, b)?);
    let v = if v.height == size && v.width == size {
        v
    } else {
        resample_bilinear(&v, size, size)?
    };
    let m = if m.height == size && m.width == size {
        m
    } else {
        resample_mask(&m, size, size)?
    };
    Ok((normalize(&v), m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(d: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume::new(d, h, w, (1.0, 1.0), data).unwrap()
    }

    #[test]
    fn crop_examples() {
        let full = vol(2, 8, 8, |_, _, _| 5.0);
        assert_eq!(crop_skull_square(&full).unwrap(), full);

        let bx = vol(1, 100, 100, |_, y, x| {
            if (40..60).contains(&y) && (30..60).contains(&x) {
                9.0
            } else {
                0.0
            }
        });
        let b = skull_square(&bx).unwrap();
        assert_eq!(b.side, 30);
        assert!(b.y0 <= 40 && b.y0 + 30 >= 60 && b.x0 == 30);
        let c = crop(&bx, b).unwrap();
        assert_eq!((c.height, c.width), (30, 30));
        assert_eq!(c.data.iter().filter(|&&v| v > 0.0).count(), 600);

        let zero = vol(1, 4, 4, |_, _, _| 0.0);
        assert!(matches!(
            crop_skull_square(&zero),
            Err(Error::Preprocess(_))
        ));
    }

    #[test]
    fn crop_clamps_at_the_border() {
        let v = vol(1, 10, 10, |_, y, x| if y < 2 && x < 6 { 1.0 } else { 0.0 });
        let b = skull_square(&v).unwrap();
        assert_eq!(
            b,
            CropBox {
                y0: 0,
                x0: 0,
                side: 6
            }
        );
    }

    #[test]
    fn resample_examples() {
        let v = vol(1, 2, 2, |_, _, x| x as f32);
        let r = resample_bilinear(&v, 2, 4).unwrap();
        let third = 1.0f32 / 3.0;
        let expect = [0.0, third, 2.0 * third, 1.0];
        for row in r.data.chunks(4) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-7, "{row:?}");
            }
        }
        let odd = vol(2, 5, 7, |z, y, x| (z * 31 + y * 7 + x * 3) as f32 * 0.37);
        assert_eq!(resample_bilinear(&odd, 5, 7).unwrap(), odd);
        let c = vol(1, 3, 3, |_, _, _| 0.7);
        assert!(resample_bilinear(&c, 9, 4)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.7));
        let up = resample_bilinear(&odd, 13, 11).unwrap();
        let (lo, hi) = odd.min_max();
        assert!(up.data.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new(1, 1, 3, (1.0, 1.0), vec![10.0, 15.0, 20.0]).unwrap();
        assert_eq!(normalize(&v).data, vec![0.0, 0.5, 1.0]);
        let c = Volume::new(1, 1, 2, (1.0, 1.0), vec![3.0, 3.0]).unwrap();
        assert_eq!(normalize(&c).data, vec![0.0, 0.0]);
        let r = normalize(&vol(2, 3, 3, |z, y, x| {
            ((z + 2 * y + 3 * x) as f32).sin() * 40.0
        }));
        assert_eq!(r.min_max(), (0.0, 1.0));
    }

    #[test]
    fn preprocess_keeps_mask_aligned() {
        let v = vol(1, 12, 12, |_, y, x| {
            if (2..10).contains(&y) && (3..9).contains(&x) {
                4.0
            } else {
                0.0
            }
        });
        let mut m = MaskVolume::filled(1, 12, 12, 0);
        m.data[5 * 12 + 5] = 1;
        let (pv, pm) = preprocess(&v, &m, 8).unwrap();
        assert_eq!((pv.height, pm.height), (8, 8));
        assert_eq!(pm.foreground(), 1);
        assert_eq!(pm.data[3 * 8 + 3], 1);
        assert!(preprocess(&v, &MaskVolume::filled(1, 4, 4, 0), 8).is_err());
    }
}
