use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::volume::{MaskVolume, Volume};
use crate::error::{arg_err, shape_err, Result};
use crate::model::SliceTriplet;
use crate::tensor::Tensor;

fn slice_tensor(data: Vec<f32>, h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(&[1, 1, h, w], data).expect("slice extents are positive")
}

/// One `[1,1,H,W]` triplet per slice; the first and last slice reuse
/// themselves as the missing neighbour.
pub fn make_triplets(v: &Volume, m: &MaskVolume) -> Result<Vec<SliceTriplet<f32>>> {
    if !v.same_geometry(m) {
        return Err(shape_err!("mask geometry does not match its volume"));
    }
    let (h, w) = (v.height, v.width);
    let img = |d: usize| slice_tensor(v.slice(d).to_vec(), h, w);
    Ok((0..v.depth)
        .map(|t| SliceTriplet {
            prev: img(t.saturating_sub(1)),
            cur: img(t),
            next: img((t + 1).min(v.depth - 1)),
            target: slice_tensor(m.slice(t).iter().map(|&x| f32::from(x)).collect(), h, w),
        })
        .collect())
}

/// Top-left corners of the 2x2 grid of half-size windows, row-major.
pub fn patch_origins(h: usize, w: usize) -> Result<[(usize, usize); 4]> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(arg_err!("patching needs even slice extents, got {h}x{w}"));
    }
    let (ph, pw) = (h / 2, w / 2);
    Ok([(0, 0), (0, pw), (ph, 0), (ph, pw)])
}

fn window(t: &Tensor<f32>, y: usize, x: usize, ph: usize, pw: usize) -> Result<Tensor<f32>> {
    t.narrow(2, y, ph)?.narrow(3, x, pw)
}

/// Four half-size triplets in `patch_origins` order; the same window is cut
/// from every slice and the target.
pub fn patchify(t: &SliceTriplet<f32>) -> Result<Vec<SliceTriplet<f32>>> {
    t.validate()?;
    let [_, _, h, w] = t.cur.dims4("triplet")?;
    let (ph, pw) = (h / 2, w / 2);
    patch_origins(h, w)?
        .iter()
        .map(|&(y, x)| {
            Ok(SliceTriplet {
                prev: window(&t.prev, y, x, ph, pw)?,
                cur: window(&t.cur, y, x, ph, pw)?,
                next: window(&t.next, y, x, ph, pw)?,
                target: window(&t.target, y, x, ph, pw)?,
            })
        })
        .collect()
}

/// Reassembles four `[B,C,H/2,W/2]` patches (in `patch_origins` order).
pub fn stitch(patches: &[Tensor<f32>], h: usize, w: usize) -> Result<Tensor<f32>> {
    let origins = patch_origins(h, w)?;
    if patches.len() != origins.len() {
        return Err(arg_err!("stitch needs 4 patches, got {}", patches.len()));
    }
    let [b, c, ph, pw] = patches[0].dims4("patch")?;
    if (ph, pw) != (h / 2, w / 2) || patches.iter().any(|p| p.shape() != patches[0].shape()) {
        return Err(shape_err!(
            "patches must all be [{b},{c},{},{}]",
            h / 2,
            w / 2
        ));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let data = out.data_mut();
    for (p, &(y0, x0)) in patches.iter().zip(&origins) {
        let src = p.data();
        for plane in 0..b * c {
            for y in 0..ph {
                let s = plane * ph * pw + y * pw;
                let d = plane * h * w + (y0 + y) * w + x0;
                data[d..d + pw].copy_from_slice(&src[s..s + pw]);
            }
        }
    }
    Ok(out)
}

fn flip_columns(t: &Tensor<f32>) -> Tensor<f32> {
    let w = *t.shape().last().expect("rank >= 1");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Deterministic core of `augment`: optional horizontal flip of every slice
/// and the target, then intensity gain on the images clipped to `[0, 1]`.
pub fn augment_with(t: &SliceTriplet<f32>, flip: bool, gain: f32) -> SliceTriplet<f32> {
    let image = |x: &Tensor<f32>| {
        let x = if flip { flip_columns(x) } else { x.clone() };
        if gain == 1.0 {
            x
        } else {
            x.map(|v| (v * gain).clamp(0.0, 1.0))
        }
    };
    SliceTriplet {
        prev: image(&t.prev),
        cur: image(&t.cur),
        next: image(&t.next),
        target: if flip {
            flip_columns(&t.target)
        } else {
            t.target.clone()
        },
    }
}

pub fn augment<R: Rng + ?Sized>(t: &SliceTriplet<f32>, rng: &mut R) -> SliceTriplet<f32> {
    let flip = rng.random_bool(0.5);
    let gain = rng.random_range(0.9f32..=1.1);
    augment_with(t, flip, gain)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Volume-level folds over ids `0..n`: a seeded permutation cut into `k`
/// contiguous chunks whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(arg_err!("k must lie in [2, {n}], got {k}"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = n / k + usize::from(i < n % k);
        let mut test = ids[start..start + len].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = ids[..start]
            .iter()
            .chain(&ids[start + len..])
            .copied()
            .collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}
