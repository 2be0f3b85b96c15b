//! Trident segmentation CNN and the single-slice residual U-Net baseline.
//!
//! Both networks share every block. The trident network runs one encoder over
//! the previous, current and next slice in turn, stacks the three feature sets
//! on a time axis and folds that axis into channels (block order t-1, t, t+1).
//! The decoder upsamples with transposed convolutions and concatenates the
//! merged skip features on the channel axis before each residual unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    conv, conv_transpose, register_conv, register_conv_transpose, register_residual_unit,
    residual_unit, ParamStore, ResidualUnitConfig,
};
use crate::tensor::{Graph, NormMode, Real, Tensor, Var};

/// Number of adjacent slices the trident network consumes.
pub const TIME_STEPS: usize = 3;

/// Factor applied to the He-normal draw of the 1x1 head so the initial
/// probability map starts near 0.5 instead of saturating.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub input_size: usize,
    pub seg_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_scales: 4,
            input_size: 128,
            seg_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.num_scales == 0 {
            return Err(Error::Config("num_scales must be at least 1".into()));
        }
        let step = 1usize << (self.num_scales - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 2^(num_scales-1) = {step}",
                self.input_size
            )));
        }
        if !(0.0..=1.0).contains(&self.seg_threshold) {
            return Err(Error::Config(format!(
                "seg_threshold must lie in [0, 1], got {}",
                self.seg_threshold
            )));
        }
        Ok(())
    }

    /// Channel count of encoder scale `i` (1-based).
    pub fn scale_channels(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Spatial extent of encoder scale `i` (1-based).
    pub fn scale_extent(&self, i: usize) -> usize {
        self.input_size >> (i - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    TsCnn,
    ResidualUnet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TsCnn => "tscnn",
            ModelKind::ResidualUnet => "residual_unet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tscnn" => Ok(ModelKind::TsCnn),
            "residual_unet" => Ok(ModelKind::ResidualUnet),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected tscnn or residual_unet)"
            ))),
        }
    }

    /// How many slices feed the encoder per prediction.
    pub fn time_steps(self) -> usize {
        match self {
            ModelKind::TsCnn => TIME_STEPS,
            ModelKind::ResidualUnet => 1,
        }
    }
}

/// A batch of adjacent-slice inputs and the label of the centre slice, each
/// `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriplet<T = f32> {
    pub prev: Tensor<T>,
    pub cur: Tensor<T>,
    pub next: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> SliceTriplet<T> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.cur.dims4("triplet")?;
        if shape[1] != 1 {
            return Err(shape_err!(
                "triplet slices must have one channel, got {}",
                shape[1]
            ));
        }
        for (name, t) in [
            ("prev", &self.prev),
            ("next", &self.next),
            ("target", &self.target),
        ] {
            if t.shape() != self.cur.shape() {
                return Err(shape_err!(
                    "triplet {name} shape {:?} differs from current slice {:?}",
                    t.shape(),
                    self.cur.shape()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial extent of the stage output.
    pub extent: usize,
    /// Channels arriving through the skip concatenation (decoder stages only).
    pub skip_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub encoder: Vec<StageInfo>,
    pub decoder: Vec<StageInfo>,
}

impl Architecture {
    fn new(kind: ModelKind, cfg: &ModelConfig) -> Self {
        let m = kind.time_steps();
        let n = cfg.num_scales;
        let mut encoder = vec![StageInfo {
            name: "encoder.stem".into(),
            in_channels: 1,
            out_channels: cfg.base_channels,
            extent: cfg.input_size,
            skip_channels: 0,
        }];
        for i in 1..=n {
            encoder.push(StageInfo {
                name: format!("encoder.stage{i}.res1"),
                in_channels: if i == 1 {
                    cfg.base_channels
                } else {
                    cfg.scale_channels(i - 1)
                },
                out_channels: cfg.scale_channels(i),
                extent: cfg.scale_extent(i),
                skip_channels: 0,
            });
        }
        let mut decoder = Vec::new();
        let mut channels = m * cfg.scale_channels(n);
        for i in (1..n).rev() {
            let up = cfg.scale_channels(i);
            decoder.push(StageInfo {
                name: format!("decoder.up{i}"),
                in_channels: channels,
                out_channels: up,
                extent: cfg.scale_extent(i),
                skip_channels: 0,
            });
            decoder.push(StageInfo {
                name: format!("decoder.stage{i}.res1"),
                in_channels: up + m * cfg.scale_channels(i),
                out_channels: up,
                extent: cfg.scale_extent(i),
                skip_channels: m * cfg.scale_channels(i),
            });
            channels = up;
        }
        decoder.push(StageInfo {
            name: "head".into(),
            in_channels: channels,
            out_channels: 1,
            extent: cfg.input_size,
            skip_channels: 0,
        });
        Self {
            kind,
            encoder,
            decoder,
        }
    }

    /// Skip-concatenation channel counts, deepest decoder stage first.
    pub fn skip_channels(&self) -> Vec<usize> {
        self.decoder
            .iter()
            .filter(|s| s.skip_channels > 0)
            .map(|s| s.skip_channels)
            .collect()
    }

    pub fn describe(&self) -> String {
        let mut out = format!("model {}\n", self.kind.name());
        for s in self.encoder.iter().chain(&self.decoder) {
            out.push_str(&format!(
                "{} in={} out={} extent={} skip={}\n",
                s.name, s.in_channels, s.out_channels, s.extent, s.skip_channels
            ));
        }
        out
    }
}

/// A network instance: configuration, layout and parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds the network with He-initialized weights drawn from `seed`.
    pub fn build(kind: ModelKind, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(kind, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cc = cfg.base_channels;
        register_conv(&mut params, "encoder.stem", cc, 1, 3, &mut rng)?;
        for stage in &arch.encoder[1..] {
            let stride = if stage.extent == cfg.input_size { 1 } else { 2 };
            let ru = ResidualUnitConfig::new(stage.in_channels, stage.out_channels, stride)?;
            register_residual_unit(&mut params, &stage.name, &ru, &mut rng)?;
        }
        for stage in &arch.decoder {
            if stage.name == "head" {
                register_conv(&mut params, "head", 1, stage.in_channels, 1, &mut rng)?;
                let w = params.get_mut("head.weight")?;
                *w = w.map(|v| v * T::lit(HEAD_INIT_SCALE));
            } else if stage.skip_channels > 0 {
                let ru = ResidualUnitConfig::new(stage.in_channels, stage.out_channels, 1)?;
                register_residual_unit(&mut params, &stage.name, &ru, &mut rng)?;
            } else {
                register_conv_transpose(
                    &mut params,
                    &stage.name,
                    stage.in_channels,
                    stage.out_channels,
                    2,
                    &mut rng,
                )?;
            }
        }
        Ok(Self {
            kind,
            cfg,
            arch,
            params,
        })
    }

    fn check_slice(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let [_, c, h, w] = g.value(x).dims4("slice")?;
        let s = self.cfg.input_size;
        if c != 1 || h != s || w != s {
            return Err(shape_err!(
                "slice shape {:?} does not match model input [B,1,{s},{s}]",
                g.shape(x)
            ));
        }
        Ok(())
    }

    /// Shared encoder: features C1..Cn for one slice batch `[B,1,S,S]`.
    pub fn encode_slice(
        &mut self,
        g: &mut Graph<T>,
        slice: Var,
        mode: NormMode,
    ) -> Result<Vec<Var>> {
        self.check_slice(g, slice)?;
        let mut h = conv(g, &self.params, "encoder.stem", slice, 1, 1)?;
        let mut features = Vec::with_capacity(self.cfg.num_scales);
        for stage in &self.arch.encoder[1..] {
            let stride = if stage.extent == self.cfg.input_size {
                1
            } else {
                2
            };
            let ru = ResidualUnitConfig::new(stage.in_channels, stage.out_channels, stride)?;
            h = residual_unit(g, &mut self.params, &stage.name, &ru, h, mode)?;
            features.push(h);
        }
        Ok(features)
    }

    /// Decoder from merged features to a `[B,1,S,S]` probability map.
    pub fn decode(&mut self, g: &mut Graph<T>, merged: &[Var], mode: NormMode) -> Result<Var> {
        if merged.len() != self.cfg.num_scales {
            return Err(shape_err!(
                "decoder expects {} feature scales, got {}",
                self.cfg.num_scales,
                merged.len()
            ));
        }
        let m = self.kind.time_steps();
        for (i, &f) in merged.iter().enumerate() {
            let [_, c, h, w] = g.value(f).dims4("merged feature")?;
            let scale = i + 1;
            let (ec, es) = (
                m * self.cfg.scale_channels(scale),
                self.cfg.scale_extent(scale),
            );
            if c != ec || h != es || w != es {
                return Err(shape_err!(
                    "merged C{scale} has shape {:?}, expected [B,{ec},{es},{es}]",
                    g.shape(f)
                ));
            }
        }
        let mut h = *merged.last().expect("num_scales >= 1");
        let decoder = self.arch.decoder.clone();
        for pair in decoder[..decoder.len() - 1].chunks(2) {
            let (up, stage) = (&pair[0], &pair[1]);
            let up_out = conv_transpose(g, &self.params, &up.name, h, 2)?;
            let scale = (1..=self.cfg.num_scales)
                .find(|&i| self.cfg.scale_extent(i) == up.extent)
                .expect("decoder extents follow the encoder ladder");
            let skip = merged[scale - 1];
            let cat = g.concat(&[up_out, skip], 1)?;
            let ru = ResidualUnitConfig::new(stage.in_channels, stage.out_channels, 1)?;
            h = residual_unit(g, &mut self.params, &stage.name, &ru, cat, mode)?;
        }
        let logits = conv(g, &self.params, "head", h, 1, 0)?;
        Ok(g.sigmoid(logits))
    }

    /// Full forward pass to a probability map for the current slice.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        batch: &SliceTriplet<T>,
        mode: NormMode,
    ) -> Result<Var> {
        batch.validate()?;
        let merged = match self.kind {
            ModelKind::TsCnn => {
                let mut per_time = Vec::with_capacity(TIME_STEPS);
                for slice in [&batch.prev, &batch.cur, &batch.next] {
                    let x = g.constant(slice.clone());
                    per_time.push(self.encode_slice(g, x, mode)?);
                }
                temporal_concat(g, &per_time)?
            }
            ModelKind::ResidualUnet => {
                let x = g.constant(batch.cur.clone());
                self.encode_slice(g, x, mode)?
            }
        };
        self.decode(g, &merged, mode)
    }

    /// Eval-mode probability map as a plain tensor.
    pub fn predict_proba(&mut self, batch: &SliceTriplet<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, NormMode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Scalar parameter count of the encoder.
    pub fn encoder_parameter_count(&self) -> usize {
        self.params.count_scalars("encoder.")
    }

    pub fn encoder_parameter_names(&self) -> Vec<&str> {
        self.params
            .names()
            .filter(|n| n.starts_with("encoder."))
            .collect()
    }
}

/// Merges per-time-step feature ladders: at every scale, stacks the time
/// steps on a new axis `[B, T, C, h, w]` and folds it into channels
/// `[B, T*C, h, w]`, so channel block `t` is time step `t`'s features.
pub fn temporal_concat<T: Real>(g: &mut Graph<T>, per_time: &[Vec<Var>]) -> Result<Vec<Var>> {
    let first = per_time
        .first()
        .ok_or_else(|| shape_err!("temporal_concat needs at least one time step"))?;
    let steps = per_time.len();
    let mut merged = Vec::with_capacity(first.len());
    for (scale, &head) in first.iter().enumerate() {
        let shape = g.value(head).dims4("feature")?;
        let mut stacked = Vec::with_capacity(steps);
        for features in per_time {
            let f = *features
                .get(scale)
                .ok_or_else(|| shape_err!("time steps disagree on the number of scales"))?;
            if g.shape(f) != shape {
                return Err(shape_err!(
                    "temporal_concat: feature {:?} differs from {:?} at scale {}",
                    g.shape(f),
                    shape,
                    scale + 1
                ));
            }
            let [b, c, h, w] = shape;
            stacked.push(g.reshape(f, &[b, 1, c, h, w])?);
        }
        let time = g.concat(&stacked, 1)?;
        let [b, c, h, w] = shape;
        merged.push(g.reshape(time, &[b, steps * c, h, w])?);
    }
    Ok(merged)
}

/// Binary mask where `prob > threshold`.
pub fn predict<T: Real>(prob: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::lit(threshold);
    prob.map(|p| if p > t { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            num_scales: 4,
            input_size: 16,
            seg_threshold: 0.5,
        }
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(ModelConfig {
            input_size: 12,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            base_channels: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(Model::<f32>::build(
            ModelKind::TsCnn,
            ModelConfig {
                input_size: 20,
                ..small()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn predict_is_strict() {
        let p = Tensor::<f32>::from_f64(&[2, 2], &[0.2, 0.7, 0.5, 0.51]).unwrap();
        assert_eq!(predict(&p, 0.5).data(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(predict(&Tensor::<f32>::full(&[3], 0.4), 0.5)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(predict(&Tensor::<f32>::full(&[3], 0.9), 0.5)
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn encoder_shape_ladder() {
        let mut m = Model::<f32>::build(ModelKind::TsCnn, small(), 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 16, 16], 0.5));
        let f = m.encode_slice(&mut g, x, NormMode::Train).unwrap();
        let shapes: Vec<&[usize]> = f.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            shapes,
            vec![
                &[2, 4, 16, 16][..],
                &[2, 8, 8, 8],
                &[2, 16, 4, 4],
                &[2, 32, 2, 2]
            ]
        );
        let bad = g.constant(Tensor::full(&[2, 1, 8, 8], 0.5));
        assert!(m.encode_slice(&mut g, bad, NormMode::Train).is_err());
    }

    #[test]
    fn temporal_concat_block_order() {
        let mut g = Graph::<f32>::new();
        let ladder = |g: &mut Graph<f32>, v: f32| vec![g.constant(Tensor::full(&[1, 4, 2, 2], v))];
        let per_time = vec![
            ladder(&mut g, 1.0),
            ladder(&mut g, 2.0),
            ladder(&mut g, 3.0),
        ];
        let merged = temporal_concat(&mut g, &per_time).unwrap();
        let m = g.value(merged[0]);
        assert_eq!(m.shape(), &[1, 12, 2, 2]);
        for (block, expect) in [1.0f32, 2.0, 3.0].into_iter().enumerate() {
            let part = m.narrow(1, block * 4, 4).unwrap();
            assert_eq!(part.sum() / part.numel() as f32, expect);
        }
        let odd = vec![g.constant(Tensor::full(&[1, 3, 2, 2], 0.0))];
        assert!(temporal_concat(&mut g, &[per_time[0].clone(), odd]).is_err());
    }

    #[test]
    fn output_is_probability_map() {
        for kind in [ModelKind::TsCnn, ModelKind::ResidualUnet] {
            let mut m = Model::<f32>::build(kind, small(), 5).unwrap();
            let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i as f32 * 0.13).sin().abs());
            let batch = SliceTriplet {
                prev: x.clone(),
                cur: x.clone(),
                next: x.clone(),
                target: Tensor::zeros(&[2, 1, 16, 16]),
            };
            let mut g = Graph::new();
            let y = m.forward(&mut g, &batch, NormMode::Train).unwrap();
            assert_eq!(g.shape(y), &[2, 1, 16, 16]);
            assert!(g.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn single_scale_network_builds() {
        let cfg = ModelConfig {
            num_scales: 1,
            input_size: 8,
            ..small()
        };
        let mut m = Model::<f32>::build(ModelKind::TsCnn, cfg, 1).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let batch = SliceTriplet {
            prev: x.clone(),
            cur: x.clone(),
            next: x.clone(),
            target: x,
        };
        assert_eq!(m.predict_proba(&batch).unwrap().shape(), &[1, 1, 8, 8]);
    }

    fn triplet(b: usize, s: usize, seed: u64) -> SliceTriplet<f32> {
        let mut k = seed as f32;
        let mut next = || {
            k += 1.0;
            Tensor::from_fn(&[b, 1, s, s], |i| {
                (i as f32 * 0.37 + k * 1.3).sin() * 0.5 + 0.5
            })
        };
        SliceTriplet {
            prev: next(),
            cur: next(),
            next: next(),
            target: Tensor::zeros(&[b, 1, s, s]),
        }
    }

    #[test]
    fn encoder_weights_are_shared() {
        let ts = Model::<f32>::build(ModelKind::TsCnn, small(), 1).unwrap();
        let base = Model::<f32>::build(ModelKind::ResidualUnet, small(), 1).unwrap();
        let names = ts.encoder_parameter_names();
        assert_eq!(names, base.encoder_parameter_names());
        assert!(names
            .iter()
            .all(|n| !n.contains("time") && !n.contains("t0") && !n.contains("slice")));
        assert_eq!(ts.encoder_parameter_count(), base.encoder_parameter_count());
        assert!(ts.params.count_scalars("decoder.") > base.params.count_scalars("decoder."));

        let mut ts = ts;
        let mut g = Graph::new();
        ts.forward(&mut g, &triplet(1, 16, 0), NormMode::Train)
            .unwrap();
        let bound: Vec<&str> = g.bindings().map(|(n, _)| n).collect();
        let mut unique = bound.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(bound.len(), unique.len());
        assert_eq!(bound.len(), ts.params.len());
    }

    #[test]
    fn baseline_skips_are_one_third() {
        let ts = Architecture::new(ModelKind::TsCnn, &small());
        let base = Architecture::new(ModelKind::ResidualUnet, &small());
        let (a, b) = (ts.skip_channels(), base.skip_channels());
        assert_eq!(a.len(), 3);
        assert!(a.iter().zip(&b).all(|(x, y)| *x == 3 * y));
        assert_eq!(a, vec![48, 24, 12]);
    }

    #[test]
    fn temporal_concat_recovers_features_bitwise() {
        let mut m = Model::<f32>::build(ModelKind::TsCnn, small(), 4).unwrap();
        let t = triplet(2, 16, 1);
        let mut g = Graph::new();
        let mut per_time = Vec::new();
        for slice in [&t.prev, &t.cur, &t.next] {
            let x = g.constant(slice.clone());
            per_time.push(m.encode_slice(&mut g, x, NormMode::Eval).unwrap());
        }
        let merged = temporal_concat(&mut g, &per_time).unwrap();
        for (scale, &mv) in merged.iter().enumerate() {
            let c = small().scale_channels(scale + 1);
            for (step, features) in per_time.iter().enumerate() {
                let block = g.value(mv).narrow(1, step * c, c).unwrap();
                assert_eq!(&block, g.value(features[scale]));
            }
        }
    }

    #[test]
    fn build_and_eval_are_deterministic() {
        let a = Model::<f32>::build(ModelKind::TsCnn, small(), 8).unwrap();
        let b = Model::<f32>::build(ModelKind::TsCnn, small(), 8).unwrap();
        let c = Model::<f32>::build(ModelKind::TsCnn, small(), 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let t = triplet(2, 16, 2);
        let (mut a, mut b) = (a, b);
        let pa = a.predict_proba(&t).unwrap();
        assert_eq!(pa, a.predict_proba(&t).unwrap());
        assert_eq!(pa, b.predict_proba(&t).unwrap());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn neighbour_slices_reach_only_the_trident_output() {
        let t = triplet(1, 16, 3);
        let mut moved = t.clone();
        moved.prev = moved.prev.map(|v| 1.0 - v);
        moved.next = moved.next.map(|v| v * 0.5);
        let mut ts = Model::<f32>::build(ModelKind::TsCnn, small(), 2).unwrap();
        assert!(
            ts.predict_proba(&t)
                .unwrap()
                .max_abs_diff(&ts.predict_proba(&moved).unwrap())
                > 0.0
        );
        let mut base = Model::<f32>::build(ModelKind::ResidualUnet, small(), 2).unwrap();
        assert_eq!(
            base.predict_proba(&t).unwrap(),
            base.predict_proba(&moved).unwrap()
        );

        let mut swapped = t.clone();
        std::mem::swap(&mut swapped.prev, &mut swapped.next);
        assert!(
            ts.predict_proba(&t)
                .unwrap()
                .max_abs_diff(&ts.predict_proba(&swapped).unwrap())
                > 0.0
        );
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let mut m = Model::<f32>::build(ModelKind::TsCnn, small(), 2).unwrap();
        let mut t = triplet(1, 16, 0);
        t.next = Tensor::zeros(&[2, 1, 16, 16]);
        assert!(m.predict_proba(&t).is_err());
    }
}
