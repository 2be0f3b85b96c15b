use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LossKind, RunConfig};
use super::trace::TrainTrace;
use crate::data::{augment, make_triplets, patchify, preprocess, Sample};
use crate::error::{Error, Result};
use crate::loss::{focal_loss_report, sbfl};
use crate::model::{Model, SliceTriplet};
use crate::tensor::{Graph, NormMode, Tensor};

/// Preprocessed full-size triplets of every slice of `samples`.
pub fn prepare_triplets(samples: &[&Sample], image_size: usize) -> Result<Vec<SliceTriplet<f32>>> {
    let mut out = Vec::new();
    for s in samples {
        let (v, m) = preprocess(&s.volume, &s.mask, image_size)?;
        out.extend(make_triplets(&v, &m)?);
    }
    Ok(out)
}

/// Half-size training patches plus the indices of those holding foreground.
struct PatchPool {
    patches: Vec<SliceTriplet<f32>>,
    foreground: Vec<usize>,
}

impl PatchPool {
    fn new(triplets: &[SliceTriplet<f32>], image_size: usize) -> Result<Self> {
        let expected = [1, 1, image_size, image_size];
        let mut patches = Vec::with_capacity(4 * triplets.len());
        for (i, t) in triplets.iter().enumerate() {
            if t.cur.shape() != expected {
                return Err(Error::Config(format!(
                    "training slice {i} has shape {:?}, configuration expects {expected:?}",
                    t.cur.shape()
                )));
            }
            patches.extend(patchify(t)?);
        }
        if patches.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let foreground = (0..patches.len())
            .filter(|&i| patches[i].target.data().iter().any(|&v| v > 0.5))
            .collect();
        Ok(Self {
            patches,
            foreground,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R, fg_bias: f64) -> &SliceTriplet<f32> {
        let from_fg = !self.foreground.is_empty() && rng.random_bool(fg_bias);
        let i = if from_fg {
            self.foreground[rng.random_range(0..self.foreground.len())]
        } else {
            rng.random_range(0..self.patches.len())
        };
        &self.patches[i]
    }
}

fn stack(items: &[SliceTriplet<f32>]) -> Result<SliceTriplet<f32>> {
    let cat = |f: fn(&SliceTriplet<f32>) -> &Tensor<f32>| {
        Tensor::concat(&items.iter().map(f).collect::<Vec<_>>(), 0)
    };
    Ok(SliceTriplet {
        prev: cat(|t| &t.prev)?,
        cur: cat(|t| &t.cur)?,
        next: cat(|t| &t.next)?,
        target: cat(|t| &t.target)?,
    })
}

/// Trains a fresh model on full-size `triplets` and returns it with the
/// per-step trace. Initialisation uses `cfg.seed`; batch sampling uses a
/// separate stream of the same seed.
pub fn train_run(
    cfg: &RunConfig,
    triplets: &[SliceTriplet<f32>],
) -> Result<(Model<f32>, TrainTrace)> {
    cfg.validate()?;
    let pool = PatchPool::new(triplets, cfg.image_size)?;
    let mut model = Model::<f32>::build(cfg.model_kind, cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trace = TrainTrace::new(cfg.steps_per_epoch);
    for step in 1..=cfg.total_steps() {
        let items: Vec<SliceTriplet<f32>> = (0..cfg.batch_size)
            .map(|_| {
                let t = pool.draw(&mut rng, cfg.fg_bias);
                if cfg.augment {
                    augment(t, &mut rng)
                } else {
                    t.clone()
                }
            })
            .collect();
        let batch = stack(&items)?;
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &batch, NormMode::Train)?;
        let target = g.constant(batch.target);
        let (loss, mut report) = match cfg.loss {
            LossKind::Fl => focal_loss_report(&mut g, target, pred, &cfg.focal)?,
            LossKind::Sbfl => sbfl(&mut g, target, pred, &cfg.focal)?,
        };
        if !report.total.is_finite() {
            return Err(Error::Domain(format!(
                "loss became {} at step {step}",
                report.total
            )));
        }
        g.backward(loss)?;
        model.params.accumulate_grads(&g);
        model.params.adam_step(&cfg.adam)?;
        report.step = step;
        trace.reports.push(report);
    }
    Ok((model, trace))
}
