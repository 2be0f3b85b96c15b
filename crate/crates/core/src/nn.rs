//! Named parameters, layer builders, residual units and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Error, Result};
use crate::tensor::{BatchNormState, Graph, NormMode, Real, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `Normal(0, sqrt(2 / fan_in))`.
    HeNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

pub fn init_param<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    init: Init,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match init {
        Init::HeNormal { fan_in } => {
            if fan_in == 0 {
                return Err(arg_err!("fan_in must be at least 1"));
            }
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| arg_err!("bad init distribution: {e}"))?;
            Ok(Tensor::from_fn(shape, |_| T::lit(normal.sample(rng))))
        }
        Init::Zeros => Ok(Tensor::zeros(shape)),
        Init::Ones => Ok(Tensor::ones(shape)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    steps: u64,
}

impl<T: Real> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Trainable parameters keyed by hierarchical name, plus batch-norm running
/// statistics keyed by layer name. Iteration is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    norms: BTreeMap<String, BatchNormState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            norms: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn insert_norm(&mut self, name: &str, state: BatchNormState<T>) -> Result<()> {
        if self.norms.contains_key(name) {
            return Err(Error::Config(format!("duplicate batch-norm layer {name}")));
        }
        self.norms.insert(name.to_string(), state);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn norm(&self, name: &str) -> Result<&BatchNormState<T>> {
        self.norms
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing batch-norm state {name}")))
    }

    pub fn norm_mut(&mut self, name: &str) -> Result<&mut BatchNormState<T>> {
        self.norms
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing batch-norm state {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &BatchNormState<T>)> {
        self.norms.iter().map(|(k, s)| (k.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Registers the named parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        let value = self.get(name)?;
        Ok(graph.bind(name, || value.clone()))
    }

    /// Adds the gradients that `graph.backward` left on bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (name, var) in graph.bindings() {
            let (Some(param), Some(g)) = (self.params.get_mut(name), graph.grad(var)) else {
                continue;
            };
            match param.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => param.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adam with bias correction and no weight decay; clears gradients after.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::InvalidState(format!(
                "parameter {name} has no gradient"
            )));
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for p in self.params.values_mut() {
            let grad = p.grad.take().expect("checked above");
            p.steps += 1;
            let correct1 = T::one() - b1.powi(p.steps as i32);
            let correct2 = T::one() - b2.powi(p.steps as i32);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                p.first_moment[i] = b1 * p.first_moment[i] + (T::one() - b1) * g;
                p.second_moment[i] = b2 * p.second_moment[i] + (T::one() - b2) * g * g;
                let m_hat = p.first_moment[i] / correct1;
                let v_hat = p.second_moment[i] / correct2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// One `name extent-list` line per parameter, sorted by name.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, p) in &self.params {
            let extents: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name} {}\n", extents.join(",")));
        }
        out
    }

    /// Values and running statistics converted to another precision. Optimizer
    /// state is not carried over.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.cast())))
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: s
                                .running_mean
                                .iter()
                                .map(|v| U::lit(v.as_f64()))
                                .collect(),
                            running_var: s.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

// ---- layers -----------------------------------------------------------------

pub fn register_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = in_channels * kernel * kernel;
    store.insert(
        &format!("{name}.weight"),
        init_param(
            &[out_channels, in_channels, kernel, kernel],
            Init::HeNormal { fan_in },
            rng,
        )?,
    )?;
    store.insert(
        &format!("{name}.bias"),
        init_param(&[out_channels], Init::Zeros, rng)?,
    )
}

pub fn conv<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = store.bind(graph, &format!("{name}.weight"))?;
    let b = store.bind(graph, &format!("{name}.bias"))?;
    graph.conv2d(x, w, Some(b), stride, padding)
}

pub fn register_conv_transpose<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    // Each output pixel of a stride-k, kernel-k transpose sees one tap per input channel.
    store.insert(
        &format!("{name}.weight"),
        init_param(
            &[in_channels, out_channels, kernel, kernel],
            Init::HeNormal {
                fan_in: in_channels,
            },
            rng,
        )?,
    )?;
    store.insert(
        &format!("{name}.bias"),
        init_param(&[out_channels], Init::Zeros, rng)?,
    )
}

pub fn conv_transpose<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = store.bind(graph, &format!("{name}.weight"))?;
    let b = store.bind(graph, &format!("{name}.bias"))?;
    graph.conv_transpose2d(x, w, Some(b), stride, 0)
}

pub fn register_batch_norm<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
) -> Result<()> {
    store.insert(&format!("{name}.gamma"), Tensor::ones(&[channels]))?;
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
    store.insert_norm(name, BatchNormState::new(channels))
}

pub fn batch_norm<T: Real>(
    graph: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: Var,
    mode: NormMode,
) -> Result<Var> {
    let gamma = store.bind(graph, &format!("{name}.gamma"))?;
    let beta = store.bind(graph, &format!("{name}.beta"))?;
    let state = store.norm_mut(name)?;
    graph.batch_norm2d(x, gamma, beta, state, mode, BN_MOMENTUM, BN_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualUnitConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualUnitConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!(
                "residual unit stride must be 1 or 2, got {stride}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(
                "residual unit channels must be positive".into(),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

pub fn register_residual_unit<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ResidualUnitConfig,
    rng: &mut R,
) -> Result<()> {
    register_batch_norm(store, &format!("{prefix}.bn1"), cfg.in_channels)?;
    register_conv(
        store,
        &format!("{prefix}.conv1"),
        cfg.out_channels,
        cfg.in_channels,
        3,
        rng,
    )?;
    register_batch_norm(store, &format!("{prefix}.bn2"), cfg.out_channels)?;
    register_conv(
        store,
        &format!("{prefix}.conv2"),
        cfg.out_channels,
        cfg.out_channels,
        3,
        rng,
    )?;
    if cfg.needs_projection() {
        register_conv(
            store,
            &format!("{prefix}.proj"),
            cfg.out_channels,
            cfg.in_channels,
            1,
            rng,
        )?;
    }
    Ok(())
}

/// Pre-activation residual unit:
/// `conv3x3(relu(bn(conv3x3(relu(bn(x)), stride)))) + shortcut(x)`,
/// where the shortcut is identity or a strided 1x1 projection.
pub fn residual_unit<T: Real>(
    graph: &mut Graph<T>,
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ResidualUnitConfig,
    x: Var,
    mode: NormMode,
) -> Result<Var> {
    let shape = graph.value(x).dims4("residual unit input")?;
    if shape[1] != cfg.in_channels {
        return Err(Error::InvalidShape(format!(
            "{prefix}: input has {} channels, unit expects {}",
            shape[1], cfg.in_channels
        )));
    }
    let h = batch_norm(graph, store, &format!("{prefix}.bn1"), x, mode)?;
    let h = graph.relu(h);
    let h = conv(graph, store, &format!("{prefix}.conv1"), h, cfg.stride, 1)?;
    let h = batch_norm(graph, store, &format!("{prefix}.bn2"), h, mode)?;
    let h = graph.relu(h);
    let branch = conv(graph, store, &format!("{prefix}.conv2"), h, 1, 1)?;
    let shortcut = if cfg.needs_projection() {
        conv(graph, store, &format!("{prefix}.proj"), x, cfg.stride, 0)?
    } else {
        x
    };
    graph.add(branch, shortcut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff::finite_diff_grad;
    use crate::tensor::Axes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn init_kinds() {
        let b: Tensor<f32> = init_param(&[8], Init::Zeros, &mut rng()).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let g: Tensor<f32> = init_param(&[8], Init::Ones, &mut rng()).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(init_param::<f32, _>(&[2], Init::HeNormal { fan_in: 0 }, &mut rng()).is_err());
    }

    #[test]
    fn he_normal_spread() {
        let w: Tensor<f64> =
            init_param(&[1000], Init::HeNormal { fan_in: 50 }, &mut rng()).unwrap();
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = (2.0f64 / 50.0).sqrt();
        assert!(
            (var.sqrt() - target).abs() / target < 0.15,
            "std {}",
            var.sqrt()
        );
    }

    fn unit_store(cfg: &ResidualUnitConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        register_residual_unit(&mut s, "ru", cfg, &mut rng()).unwrap();
        s
    }

    #[test]
    fn zero_branch_is_identity() {
        let cfg = ResidualUnitConfig::new(3, 3, 1).unwrap();
        let mut store = unit_store(&cfg);
        for name in ["ru.conv2.weight", "ru.conv2.bias"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = residual_unit(&mut g, &mut store, "ru", &cfg, xv, NormMode::Train).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn stride_two_halves_extent() {
        let cfg = ResidualUnitConfig::new(2, 4, 2).unwrap();
        let mut store = unit_store(&cfg);
        assert!(store.contains("ru.proj.weight"));
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 8, 8]));
        let y = residual_unit(&mut g, &mut store, "ru", &cfg, x, NormMode::Train).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4]);
        assert!(ResidualUnitConfig::new(2, 2, 3).is_err());
    }

    #[test]
    fn missing_parameter_is_named() {
        let cfg = ResidualUnitConfig::new(2, 2, 1).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
        let err = residual_unit(&mut g, &mut store, "ru", &cfg, x, NormMode::Train).unwrap_err();
        assert!(err.to_string().contains("ru.bn1"), "{err}");
    }

    #[test]
    fn residual_unit_gradcheck() {
        let cfg = ResidualUnitConfig::new(2, 3, 2).unwrap();
        let store = unit_store(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let loss = |g: &mut Graph<f64>, s: &mut ParamStore<f64>, xv: Var| -> Result<Var> {
            let y = residual_unit(g, s, "ru", &cfg, xv, NormMode::Train)?;
            let w = g.constant(Tensor::from_fn(g.shape(y), |i| (i as f64 * 0.7).cos()));
            let p = g.mul(y, w)?;
            g.sum(p, Axes::All)
        };
        let mut s = store.clone();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let l = loss(&mut g, &mut s, xv).unwrap();
        g.backward(l).unwrap();
        let analytic_x = g.grad(xv).unwrap().to_vec();
        s.accumulate_grads(&g);

        let numeric_x = finite_diff_grad(
            |p| {
                let mut s = store.clone();
                let mut g = Graph::new();
                let xv = g.constant(p.clone());
                let l = loss(&mut g, &mut s, xv).unwrap();
                g.value(l).item()
            },
            &x,
            1e-4,
        );
        for (a, n) in analytic_x.iter().zip(numeric_x.data()) {
            assert!((a - n).abs() < 1e-5, "input grad {a} vs {n}");
        }

        for name in store.names() {
            let base = store.get(name).unwrap().clone();
            let numeric = finite_diff_grad(
                |p| {
                    let mut s = store.clone();
                    *s.get_mut(name).unwrap() = p.clone();
                    let mut g = Graph::new();
                    let xv = g.constant(x.clone());
                    let l = loss(&mut g, &mut s, xv).unwrap();
                    g.value(l).item()
                },
                &base,
                1e-4,
            );
            let analytic = s.param(name).unwrap().grad.as_ref().unwrap();
            for (a, n) in analytic.iter().zip(numeric.data()) {
                assert!((a - n).abs() < 1e-5, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::zeros(&[1])).unwrap();
        s.params.get_mut("p").unwrap().grad = Some(vec![1.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        // -lr / (1 + eps_opt): the step equals -lr up to the 1e-8 denominator guard.
        assert!((s.get("p").unwrap().data()[0] + 2e-4).abs() < 1e-11);
        assert!(s.param("p").unwrap().grad.is_none());
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn adam_zero_grad_and_symmetry() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(&[3], 0.5)).unwrap();
        s.insert("b", Tensor::full(&[3], 0.5)).unwrap();
        s.insert("z", Tensor::full(&[2], -1.25)).unwrap();
        for step in 0..25 {
            let g = vec![(step as f32 * 0.3).sin(); 3];
            s.params.get_mut("a").unwrap().grad = Some(g.clone());
            s.params.get_mut("b").unwrap().grad = Some(g);
            s.params.get_mut("z").unwrap().grad = Some(vec![0.0; 2]);
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("a").unwrap(), s.get("b").unwrap());
        assert!(s.get("z").unwrap().data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn manifest_lists_extents() {
        let mut s = ParamStore::<f32>::new();
        register_conv(&mut s, "c", 4, 2, 3, &mut rng()).unwrap();
        assert_eq!(s.manifest(), "c.bias 4\nc.weight 4,2,3,3\n");
        assert_eq!(s.count_scalars("c."), 4 + 72);
    }
}
