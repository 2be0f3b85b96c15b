use rayon::prelude::*;

use crate::data::{make_triplets, patchify, preprocess, stitch, Sample};
use crate::error::{shape_err, Result};
use crate::metrics::{MaskView, MetricsRecord};
use crate::model::{predict, Model, SliceTriplet};
use crate::tensor::Tensor;

/// Full-size probability map `[1,1,H,W]` of one triplet: the four half-size
/// patches run as one eval-mode batch and are stitched back together.
pub fn predict_slice(model: &mut Model<f32>, t: &SliceTriplet<f32>) -> Result<Tensor<f32>> {
    let [_, _, h, w] = t.cur.dims4("slice")?;
    let patches = patchify(t)?;
    let cat = |f: fn(&SliceTriplet<f32>) -> &Tensor<f32>| {
        Tensor::concat(&patches.iter().map(f).collect::<Vec<_>>(), 0)
    };
    let batch = SliceTriplet {
        prev: cat(|p| &p.prev)?,
        cur: cat(|p| &p.cur)?,
        next: cat(|p| &p.next)?,
        target: cat(|p| &p.target)?,
    };
    let prob = model.predict_proba(&batch)?;
    let parts = (0..patches.len())
        .map(|i| prob.narrow(0, i, 1))
        .collect::<Result<Vec<_>>>()?;
    stitch(&parts, h, w)
}

/// Metrics for every slice of every sample, in sample then slice order.
/// Slices are scored in parallel; each worker owns a copy of the model.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[&Sample],
    image_size: usize,
) -> Result<Vec<MetricsRecord>> {
    if image_size != 2 * model.cfg.input_size {
        return Err(shape_err!(
            "evaluation size {image_size} does not match model input {} (patches are half-size)",
            model.cfg.input_size
        ));
    }
    let mut jobs = Vec::new();
    for s in samples {
        let (v, m) = preprocess(&s.volume, &s.mask, image_size)?;
        let (sy, sx) = v.spacing;
        if (sy - sx).abs() > 1e-6 * sy.abs().max(sx.abs()) {
            return Err(shape_err!(
                "sample {}: anisotropic pixel spacing {sy} x {sx} mm",
                s.id
            ));
        }
        for (t, triplet) in make_triplets(&v, &m)?.into_iter().enumerate() {
            jobs.push((format!("{}_s{t:03}", s.id), triplet, f64::from(sy)));
        }
    }
    let threshold = model.cfg.seg_threshold;
    jobs.into_par_iter()
        .map_init(
            || model.clone(),
            |m, (id, triplet, spacing)| {
                let prob = predict_slice(m, &triplet)?;
                let pred: Vec<u8> = predict(&prob, threshold)
                    .data()
                    .iter()
                    .map(|&v| u8::from(v > 0.5))
                    .collect();
                let gt: Vec<u8> = triplet
                    .target
                    .data()
                    .iter()
                    .map(|&v| u8::from(v > 0.5))
                    .collect();
                let [_, _, h, w] = triplet.cur.dims4("slice")?;
                MetricsRecord::compute(
                    &id,
                    MaskView::new(h, w, &pred)?,
                    MaskView::new(h, w, &gt)?,
                    spacing,
                )
            },
        )
        .collect()
}
