use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::epga::{epga_forward, recalibrate, EpgaSettings, Theta};
use super::expert::{init_expert_map, InitMode, Midline};
use super::prm::prm_forward;
use crate::error::{Error, Result};
use crate::nn::{batchnorm, conv2d, linear, output_extent, pool, BatchNormState, Compress, ConvGeometry, Mode, PoolKind};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Settings shared by every Residual-PCR block of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct PcrSettings {
    pub compress: Compress,
    /// Learnable scale and shift on the normalized compressed map.
    pub prm_affine: bool,
    pub epga: EpgaSettings,
    pub einit: InitMode,
    pub midline: Midline,
    pub e_learnable: bool,
    /// Kernel size of an optional single-channel conv applied before the gate.
    pub extra_conv: Option<usize>,
}

impl Default for PcrSettings {
    fn default() -> Self {
        PcrSettings {
            compress: Compress::Cap,
            prm_affine: false,
            epga: EpgaSettings::default(),
            einit: InitMode::Bottom,
            midline: Midline::Exclude,
            e_learnable: true,
            extra_conv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// 1-indexed stages whose blocks carry PRM and EPGA.
    pub pcr_stages: Vec<usize>,
    pub pcr: PcrSettings,
    /// Skip the recalibration product everywhere, as if `G = 1`.
    pub force_unit_gate: bool,
}

impl NetworkConfig {
    /// Three stages of widths 16/32/64, two blocks each, recalibration in
    /// every stage, single-channel 32×32 input, four classes.
    pub fn tiny() -> Self {
        NetworkConfig {
            in_channels: 1,
            height: 32,
            width: 32,
            classes: 4,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            pcr_stages: vec![1, 2, 3],
            pcr: PcrSettings::default(),
            force_unit_gate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("net.widths", "at least one stage is required"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("net.widths", "stage widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("net.classes", format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.in_channels == 0 {
            return Err(Error::config("net.in_channels", "must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("net.height", "input extents must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("net.blocks", "must be positive"));
        }
        for &s in &self.pcr_stages {
            if s == 0 || s > self.widths.len() {
                return Err(Error::config(
                    "net.pcr_stages",
                    format!("stage {s} outside 1..={}", self.widths.len()),
                ));
            }
        }
        if let Some(k) = self.pcr.extra_conv {
            if ![3, 5, 7].contains(&k) {
                return Err(Error::config("net.extra_conv", format!("kernel {k} not in {{3,5,7}}")));
            }
        }
        if let Theta::Percentile(t) = self.pcr.epga.theta {
            if !(t > 0.0 && t < 100.0) {
                return Err(Error::config("net.theta", format!("{t} is outside (0, 100)")));
            }
        }
        self.stage_extents().map(|_| ())
    }

    /// Spatial extents of the feature maps of every stage.
    pub fn stage_extents(&self) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.widths.len());
        let (mut h, mut w) = (self.height, self.width);
        for s in 0..self.widths.len() {
            if s > 0 {
                h = output_extent(h, 3, 2, 1).map_err(|e| Error::config("net.height", e.to_string()))?;
                w = output_extent(w, 3, 2, 1).map_err(|e| Error::config("net.width", e.to_string()))?;
            }
            out.push((h, w));
        }
        Ok(out)
    }

    fn has_pcr(&self, stage: usize) -> bool {
        self.pcr_stages.contains(&(stage + 1))
    }
}

/// A named network tensor. Non-learnable entries (a frozen `E`) are recorded
/// as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub learnable: bool,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    geom: ConvGeometry,
}

#[derive(Clone, Debug)]
struct PcrUnit {
    p: usize,
    e: usize,
    bn: usize,
    affine: Option<(usize, usize)>,
    local: Option<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    proj: Option<ConvBn>,
    pcr: Option<PcrUnit>,
}

/// Per-block handles to the coarse map `Z` and attention map `G`, both
/// `[N,1,H,W]`, for the forward pass that produced them.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub stage: usize,
    pub block: usize,
    pub p: usize,
    pub e: usize,
    pub z: Option<Var>,
    pub g: Var,
}

pub struct Forward {
    pub logits: Var,
    /// Tape handle of every entry of [`Network::params`], index-aligned.
    pub params: Vec<Var>,
    pub attention: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    bns: Vec<(String, BatchNormState<T>)>,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    fc_weight: usize,
    fc_bias: usize,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    bns: Vec<(String, BatchNormState<T>)>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, value: Tensor<T>, learnable: bool) -> usize {
        self.params.push(Param { name, value, learnable });
        self.params.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, geom: ConvGeometry) -> ConvBn {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::of(normal.sample(self.rng)));
        let weight = self.add(format!("{prefix}.weight"), w, true);
        let gamma = self.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[cout]), true);
        let beta = self.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]), true);
        self.bns.push((format!("{prefix}.bn"), BatchNormState::new(cout)));
        ConvBn {
            weight,
            gamma,
            beta,
            bn: self.bns.len() - 1,
            geom,
        }
    }
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let extents = config.stage_extents()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            bns: Vec::new(),
            rng: &mut rng,
        };
        let w0 = config.widths[0];
        let stem = b.conv_bn("stem", config.in_channels, w0, 3, ConvGeometry::new(1, 1));
        let mut stages = Vec::new();
        let mut cin = w0;
        for (s, &cout) in config.widths.iter().enumerate() {
            let (h, w) = extents[s];
            let mut blocks = Vec::new();
            for k in 0..config.blocks_per_stage {
                let prefix = format!("stage{}.block{k}", s + 1);
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let conv1 = b.conv_bn(&format!("{prefix}.conv1"), cin, cout, 3, ConvGeometry::new(stride, 1));
                let conv2 = b.conv_bn(&format!("{prefix}.conv2"), cout, cout, 3, ConvGeometry::new(1, 1));
                let proj = (stride != 1 || cin != cout)
                    .then(|| b.conv_bn(&format!("{prefix}.proj"), cin, cout, 1, ConvGeometry::new(stride, 0)));
                let pcr = if config.has_pcr(s) {
                    let st = &config.pcr;
                    let p = b.add(format!("{prefix}.prm.p"), Tensor::ones(&[h, w]), true);
                    b.bns.push((format!("{prefix}.prm.bn"), BatchNormState::new(1)));
                    let bn = b.bns.len() - 1;
                    let affine = st.prm_affine.then(|| {
                        (
                            b.add(format!("{prefix}.prm.bn.gamma"), Tensor::ones(&[1]), true),
                            b.add(format!("{prefix}.prm.bn.beta"), Tensor::zeros(&[1]), true),
                        )
                    });
                    let e = init_expert_map(st.einit, h, w, st.midline)?;
                    let e = b.add(format!("{prefix}.epga.e"), e, st.e_learnable);
                    let local = st.extra_conv.map(|k| {
                        let mut delta = Tensor::zeros(&[1, 1, k, k]);
                        delta.data_mut()[k * k / 2] = T::one();
                        b.add(format!("{prefix}.epga.conv.weight"), delta, true)
                    });
                    Some(PcrUnit { p, e, bn, affine, local })
                } else {
                    None
                };
                blocks.push(Block { conv1, conv2, proj, pcr });
                cin = cout;
            }
            stages.push(blocks);
        }
        let f = cin;
        let bound = 1.0 / (f as f64).sqrt();
        let fc_w = Tensor::from_fn(&[f, config.classes], |_| T::of(b.rng.gen_range(-bound..bound)));
        let fc_b = Tensor::from_fn(&[config.classes], |_| T::of(b.rng.gen_range(-bound..bound)));
        let fc_weight = b.add("fc.weight".into(), fc_w, true);
        let fc_bias = b.add("fc.bias".into(), fc_b, true);
        let Builder { params, bns, .. } = b;
        Ok(Network {
            config,
            params,
            bns,
            stem,
            stages,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn batchnorms(&self) -> &[(String, BatchNormState<T>)] {
        &self.bns
    }

    pub fn batchnorms_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.bns
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.learnable).map(|p| p.value.len()).sum()
    }

    /// Copy of the network in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let cast_bn = |s: &BatchNormState<T>| BatchNormState {
            running_mean: s.running_mean.iter().map(|v| U::of(v.f64())).collect(),
            running_var: s.running_var.iter().map(|v| U::of(v.f64())).collect(),
            eps: s.eps,
            momentum: s.momentum,
        };
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    learnable: p.learnable,
                })
                .collect(),
            bns: self.bns.iter().map(|(n, s)| (n.clone(), cast_bn(s))).collect(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            fc_weight: self.fc_weight,
            fc_bias: self.fc_bias,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Forward> {
        self.forward_with(tape, x, mode, None)
    }

    /// Forward pass with parameter `replace.0` taken from the tape variable
    /// `replace.1` instead of the stored value.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        replace: Option<(usize, Var)>,
    ) -> Result<Forward> {
        let xs = tape.shape(x);
        let c = &self.config;
        if xs.len() != 4 || xs[1] != c.in_channels || xs[2] != c.height || xs[3] != c.width {
            return Err(Error::Shape(format!(
                "network expects [N,{},{},{}], got {xs:?}",
                c.in_channels, c.height, c.width
            )));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match replace {
                Some((j, v)) if j == i => v,
                _ => tape.leaf(p.value.clone(), p.learnable),
            })
            .collect();
        let mut h = self.conv_bn(tape, &params, x, &self.stem.clone(), mode)?;
        h = tape.relu(h)?;
        let mut attention = Vec::new();
        let stages = self.stages.clone();
        for (s, blocks) in stages.iter().enumerate() {
            for (k, block) in blocks.iter().enumerate() {
                h = self.block(tape, &params, h, block, mode, (s, k), &mut attention)?;
            }
        }
        let pooled = pool(tape, h, PoolKind::GlobalAvg)?;
        let logits = linear(tape, pooled, params[self.fc_weight], params[self.fc_bias])?;
        Ok(Forward {
            logits,
            params,
            attention,
        })
    }

    fn conv_bn(&mut self, tape: &mut Tape<T>, params: &[Var], x: Var, cb: &ConvBn, mode: Mode) -> Result<Var> {
        let y = conv2d(tape, x, params[cb.weight], None, cb.geom)?;
        let affine = Some((params[cb.gamma], params[cb.beta]));
        batchnorm(tape, y, &mut self.bns[cb.bn].1, affine, mode)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        block: &Block,
        mode: Mode,
        (stage, index): (usize, usize),
        attention: &mut Vec<AttentionTrace>,
    ) -> Result<Var> {
        let h = self.conv_bn(tape, params, x, &block.conv1, mode)?;
        let h = tape.relu(h)?;
        let mut y = self.conv_bn(tape, params, h, &block.conv2, mode)?;
        if let Some(u) = &block.pcr {
            if self.config.force_unit_gate {
                let ys = tape.shape(y).to_vec();
                let g = tape.constant(Tensor::ones(&[ys[0], 1, ys[2], ys[3]]));
                attention.push(AttentionTrace { stage, block: index, p: u.p, e: u.e, z: None, g });
            } else {
                let affine = u.affine.map(|(g, b)| (params[g], params[b]));
                let compress = self.config.pcr.compress;
                let z = prm_forward(tape, y, params[u.p], &mut self.bns[u.bn].1, affine, compress, mode)?;
                let local = u.local.map(|i| params[i]);
                let settings = self.config.pcr.epga;
                let g = epga_forward(tape, z, params[u.e], &settings, local)?;
                attention.push(AttentionTrace { stage, block: index, p: u.p, e: u.e, z: Some(z), g });
                y = recalibrate(tape, y, g)?;
            }
        }
        let skip = match &block.proj {
            Some(p) => self.conv_bn(tape, params, x, p, mode)?,
            None => x,
        };
        let out = tape.add(y, skip)?;
        tape.relu(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcr::epga::Gate;
    use crate::tensor::gradcheck::{analytic_gradient, numeric_partial, relative_error};

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 3,
            widths: vec![4, 6],
            blocks_per_stage: 1,
            pcr_stages: vec![1, 2],
            pcr: PcrSettings::default(),
            force_unit_gate: false,
        }
    }

    fn count_oracle(cfg: &NetworkConfig) -> usize {
        let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let mut total = conv_bn(cfg.in_channels, cfg.widths[0], 3);
        let (mut h, mut w) = (cfg.height, cfg.width);
        let mut cin = cfg.widths[0];
        for (s, &cout) in cfg.widths.iter().enumerate() {
            if s > 0 {
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
            }
            for k in 0..cfg.blocks_per_stage {
                let down = s > 0 && k == 0;
                total += conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3);
                if down || cin != cout {
                    total += conv_bn(cin, cout, 1);
                }
                if cfg.pcr_stages.contains(&(s + 1)) {
                    total += h * w;
                    if cfg.pcr.e_learnable {
                        total += h * w;
                    }
                    if cfg.pcr.prm_affine {
                        total += 2;
                    }
                    if let Some(k) = cfg.pcr.extra_conv {
                        total += k * k;
                    }
                }
                cin = cout;
            }
        }
        total + cin * cfg.classes + cfg.classes
    }

    #[test]
    fn tiny_parameter_count_matches_closed_form() {
        let cfg = NetworkConfig::tiny();
        let net = Network::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(net.parameter_count(), count_oracle(&cfg));
        let mut plain = cfg.clone();
        plain.pcr_stages.clear();
        assert_eq!(Network::<f32>::new(plain.clone(), 0).unwrap().parameter_count(), count_oracle(&plain));
        let mut ext = cfg;
        ext.pcr.prm_affine = true;
        ext.pcr.extra_conv = Some(5);
        ext.pcr.e_learnable = false;
        assert_eq!(Network::<f32>::new(ext.clone(), 0).unwrap().parameter_count(), count_oracle(&ext));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let field = |cfg: NetworkConfig| match Network::<f64>::new(cfg, 0) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        };
        let mut c = small_config();
        c.classes = 1;
        assert_eq!(field(c), "net.classes");
        let mut c = small_config();
        c.widths.clear();
        assert_eq!(field(c), "net.widths");
        let mut c = small_config();
        c.pcr_stages = vec![3];
        assert_eq!(field(c), "net.pcr_stages");
        let mut c = small_config();
        c.pcr.extra_conv = Some(4);
        assert_eq!(field(c), "net.extra_conv");
    }

    fn logits(net: &mut Network<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = net.forward(&mut tape, xv, mode).unwrap();
        tape.value(f.logits).clone()
    }

    #[test]
    fn zero_image_gives_classifier_bias() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut net = Network::<f64>::new(NetworkConfig::tiny(), 3).unwrap();
            let bias = net.params()[net.param_index("fc.bias").unwrap()].value.clone();
            let out = logits(&mut net, &Tensor::zeros(&[2, 1, 32, 32]), mode);
            for row in out.data().chunks(4) {
                assert_eq!(row, bias.data());
            }
        }
    }

    #[test]
    fn unit_gate_matches_plain_network_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let mut forced = small_config();
        forced.force_unit_gate = true;
        let mut plain = small_config();
        plain.pcr_stages.clear();
        let mut a = Network::<f64>::new(forced, 5).unwrap();
        let mut b = Network::<f64>::new(plain, 5).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(logits(&mut a, &x, mode), logits(&mut b, &x, mode));
        }
    }

    #[test]
    fn top_and_bottom_expert_maps_give_different_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let g = |mode: InitMode| {
            let mut cfg = small_config();
            cfg.pcr.einit = mode;
            let mut net = Network::<f64>::new(cfg, 9).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let f = net.forward(&mut tape, xv, Mode::Train).unwrap();
            tape.value(f.attention.last().unwrap().g).clone()
        };
        assert!(g(InitMode::Top).max_abs_diff(&g(InitMode::Bottom)) > 0.0);
    }

    #[test]
    fn unit_gate_traces_are_constant_ones() {
        let mut cfg = small_config();
        cfg.force_unit_gate = true;
        let mut net = Network::<f64>::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::ones(&[1, 1, 8, 8]));
        let f = net.forward(&mut tape, xv, Mode::Train).unwrap();
        assert_eq!(f.attention.len(), 2);
        for t in &f.attention {
            assert!(tape.value(t.g).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn wrong_input_extent_is_shape_error() {
        let mut net = Network::<f64>::new(small_config(), 0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 1, 8, 9]));
        assert!(matches!(net.forward(&mut tape, xv, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_of_every_tensor_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let mut cfg = small_config();
        cfg.pcr.extra_conv = Some(3);
        cfg.pcr.prm_affine = true;
        for gate in Gate::ALL {
            cfg.pcr.epga.gate = gate;
            let mut net = Network::<f64>::new(cfg.clone(), 4).unwrap();
            let weights = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
            for i in 0..net.params().len() {
                if !net.params()[i].learnable {
                    continue;
                }
                let value = net.params()[i].value.clone();
                let mut f = |tape: &mut Tape<f64>, v: Var| {
                    let xv = tape.constant(x.clone());
                    let out = net.forward_with(tape, xv, Mode::Train, Some((i, v)))?;
                    let w = tape.constant(weights.clone());
                    let y = tape.mul(out.logits, w)?;
                    tape.sum_all(y)
                };
                let analytic = analytic_gradient(&mut f, &value).unwrap();
                let stride = (value.len() / 6).max(1);
                for j in (0..value.len()).step_by(stride) {
                    let numeric = numeric_partial(&mut f, &value, j, 1e-6).unwrap();
                    let err = relative_error(analytic.data()[j], numeric);
                    assert!(err < 1e-4, "{gate:?} {} [{j}]: {err}", net.params()[i].name);
                }
            }
        }
    }
}
