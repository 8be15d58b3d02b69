//! Content and style encoders, weight head, registration networks and the two
//! template decoders, over a flat parameter store with per-group freezing.

use std::collections::BTreeSet;
use std::fmt;

use anatomix_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deformation::{self, compose_forward, compose_inverse, Deformation, DeformationStack, Interp, VelocityField};
use crate::manifold::{self, AnatomyTemplate, BasisBank, DiagonalGaussian, Provenance};
use crate::simplex::CompositionWeights;
use crate::{Error, Result, F};

const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Length of the style code.
pub const STYLE_DIM: usize = 128;

/// Parameter groups, the unit of freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Content,
    Style,
    WeightHead,
    Bases,
    Registration,
    SegDecoder,
    ReconDecoder,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Content,
        Group::Style,
        Group::WeightHead,
        Group::Bases,
        Group::Registration,
        Group::SegDecoder,
        Group::ReconDecoder,
    ];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<F>,
}

/// All learnable parameters. Frozen groups are bound as constants and refuse
/// updates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    frozen: BTreeSet<Group>,
}

impl ParamStore {
    fn add(&mut self, name: String, group: Group, shape: &[usize], data: Vec<F>) -> usize {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.push(Param {
            name,
            group,
            shape: shape.to_vec(),
            data,
        });
        self.params.len() - 1
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen.insert(group);
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        self.frozen.iter().copied().collect()
    }

    /// Indices of the parameters the optimizer may touch.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| !self.is_frozen(self.params[i].group))
            .collect()
    }

    /// Mutable access to a parameter for an optimizer update.
    pub fn data_mut(&mut self, index: usize) -> Result<&mut [F]> {
        let p = &mut self.params[index];
        if self.frozen.contains(&p.group) {
            return Err(Error::Invariant(format!(
                "attempted update of `{}` in frozen group {}",
                p.name, p.group
            )));
        }
        Ok(&mut p.data)
    }

    /// Leaf tensors for one forward pass.
    pub fn bind(&self) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if self.is_frozen(p.group) {
                        Tensor::new(p.data.clone(), &p.shape)
                    } else {
                        Tensor::param(p.data.clone(), &p.shape)
                    }
                })
                .collect(),
        )
    }

    /// SHA-256 over the names, shapes and little-endian values of a group.
    pub fn group_checksum(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn group_size(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.data.len()).sum()
    }
}

/// Parameters of one forward pass, indexed like the store.
pub struct Bound(pub Vec<Tensor<F>>);

impl Bound {
    fn get(&self, i: usize) -> &Tensor<F> {
        &self.0[i]
    }
}

fn he_normal<R: Rng>(fan_in: usize, n: usize, rng: &mut R) -> Vec<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let d = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| d.sample(rng) as F).collect()
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

impl Conv {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, g: Group, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let w = s.add(format!("{name}.weight"), g, &[cout, cin, k, k], he_normal(cin * k * k, cout * cin * k * k, rng));
        let b = s.add(format!("{name}.bias"), g, &[cout], vec![0.0; cout]);
        Self { w, b, pad: k / 2 }
    }

    fn zeros(s: &mut ParamStore, name: &str, g: Group, cin: usize, cout: usize, bias: Vec<F>) -> Self {
        let w = s.add(format!("{name}.weight"), g, &[cout, cin, 1, 1], vec![0.0; cout * cin]);
        let b = s.add(format!("{name}.bias"), g, &[cout], bias);
        Self { w, b, pad: 0 }
    }

    fn fwd(&self, p: &Bound, x: &Tensor<F>) -> Tensor<F> {
        x.conv2d(p.get(self.w), p.get(self.b), self.pad)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, g: Group, fin: usize, fout: usize, rng: &mut R) -> Self {
        let w = s.add(format!("{name}.weight"), g, &[fout, fin], he_normal(fin, fout * fin, rng));
        let b = s.add(format!("{name}.bias"), g, &[fout], vec![0.0; fout]);
        Self { w, b }
    }

    fn zeros(s: &mut ParamStore, name: &str, g: Group, fin: usize, fout: usize) -> Self {
        let w = s.add(format!("{name}.weight"), g, &[fout, fin], vec![0.0; fout * fin]);
        let b = s.add(format!("{name}.bias"), g, &[fout], vec![0.0; fout]);
        Self { w, b }
    }

    fn fwd(&self, p: &Bound, x: &Tensor<F>) -> Tensor<F> {
        x.linear(p.get(self.w), p.get(self.b))
    }
}

/// Conv 3x3 -> InstanceNorm -> LeakyReLU.
#[derive(Clone, Debug)]
struct ConvBlock(Conv);

impl ConvBlock {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, g: Group, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self(Conv::new(s, name, g, cin, cout, 3, rng))
    }

    fn fwd(&self, p: &Bound, x: &Tensor<F>) -> Tensor<F> {
        self.0.fwd(p, x).instance_norm(NORM_EPS).leaky_relu(LEAK)
    }
}

/// Additive attention gate: `skip * sigmoid(psi(relu(Wx skip + Wg gate)))`.
#[derive(Clone, Debug)]
struct AttentionGate {
    wx: Conv,
    wg: Conv,
    psi: Conv,
}

impl AttentionGate {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, cx: usize, cg: usize, inter: usize, rng: &mut R) -> Self {
        let g = Group::Content;
        Self {
            wx: Conv::new(s, &format!("{name}.wx"), g, cx, inter, 1, rng),
            wg: Conv::new(s, &format!("{name}.wg"), g, cg, inter, 1, rng),
            psi: Conv::new(s, &format!("{name}.psi"), g, inter, 1, 1, rng),
        }
    }

    fn fwd(&self, p: &Bound, skip: &Tensor<F>, gate: &Tensor<F>) -> Tensor<F> {
        let a = self.wx.fwd(p, skip).add(&self.wg.fwd(p, gate)).relu();
        skip.mul(&self.psi.fwd(p, &a).sigmoid())
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of scales `L`.
    pub levels: usize,
    /// Zero-based scales carrying a velocity field, ascending.
    pub velocity_levels: Vec<usize>,
    /// Number of bases `M`.
    pub num_bases: usize,
    /// Foreground classes `K`.
    pub num_classes: usize,
    pub image_size: usize,
    /// Channels `C_l` of every latent map.
    pub latent_channels: usize,
    /// Width of the first content-encoder level.
    pub base_channels: usize,
    pub registration_channels: usize,
    pub squaring_steps: u32,
    pub lambda_smooth: f64,
    pub lambda_mag: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            velocity_levels: vec![0, 2, 4],
            num_bases: 6,
            num_classes: 3,
            image_size: 64,
            latent_channels: 16,
            base_channels: 16,
            registration_channels: 16,
            squaring_steps: deformation::SQUARING_STEPS,
            lambda_smooth: 10.0,
            lambda_mag: 0.01,
        }
    }
}

impl ModelConfig {
    /// Side length of the maps at zero-based `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> (self.levels - 1 - level)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.levels == 0 {
            v.push("L must be >= 1".into());
        }
        if self.num_bases < 2 {
            v.push(format!("M = {} must be >= 2", self.num_bases));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            v.push(format!("K = {} must be in 1..=254", self.num_classes));
        }
        if self.levels > 0 && (self.image_size == 0 || self.image_size % (1 << (self.levels - 1)) != 0) {
            v.push(format!(
                "image size {} must be a positive multiple of 2^(L-1) = {}",
                self.image_size,
                1usize << (self.levels.saturating_sub(1))
            ));
        }
        if self.velocity_levels.is_empty() {
            v.push("the velocity scale set must not be empty".into());
        }
        if self.velocity_levels.windows(2).any(|p| p[0] >= p[1]) {
            v.push(format!(
                "velocity scales {:?} must be strictly ascending",
                self.velocity_levels.iter().map(|l| l + 1).collect::<Vec<_>>()
            ));
        }
        if let Some(l) = self.velocity_levels.iter().find(|&&l| l >= self.levels) {
            v.push(format!("velocity scale {} exceeds L = {}", l + 1, self.levels));
        }
        for (name, c) in [
            ("latent_channels", self.latent_channels),
            ("base_channels", self.base_channels),
            ("registration_channels", self.registration_channels),
        ] {
            if c == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        }
        if self.squaring_steps == 0 {
            v.push("squaring_steps must be >= 1".into());
        }
        if !(self.lambda_smooth > 0.0) || !(self.lambda_mag > 0.0) {
            v.push("velocity prior weights must be > 0".into());
        }
        v
    }

    fn enc_width(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    fn dec_width(&self, level: usize) -> usize {
        if level + 2 < self.levels {
            2 * self.base_channels
        } else {
            self.base_channels
        }
    }
}

/// Multi-scale content features, coarsest first.
pub type ContentPyramid = Vec<Tensor<F>>;

#[derive(Clone, Debug)]
struct RegistrationNet {
    blocks: Vec<ConvBlock>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct ReconBlock {
    conv: Conv,
    film: Linear,
    width: usize,
}

/// Every network of the model plus the parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc: Vec<ConvBlock>,
    gates: Vec<AttentionGate>,
    taps: Vec<Conv>,
    dec: Vec<ConvBlock>,
    head_hidden: Linear,
    head_out: Linear,
    style_convs: Vec<Conv>,
    style_out: Linear,
    bank_mean: Vec<usize>,
    bank_scale: Vec<usize>,
    reg: Vec<RegistrationNet>,
    seg_blocks: Vec<ConvBlock>,
    seg_out: Conv,
    rec_blocks: Vec<ReconBlock>,
    rec_mu: Conv,
    rec_b: Conv,
}

/// Everything one forward pass produces.
pub struct Forward {
    pub content: ContentPyramid,
    /// `[B, M]` softmax weights.
    pub weights: Tensor<F>,
    pub posteriors: Vec<DiagonalGaussian<F>>,
    pub template: AnatomyTemplate<F>,
    pub style: Tensor<F>,
    pub stack: DeformationStack<F>,
    /// Template-space class probabilities `[B, K+1, H, W]`.
    pub seg_template: Tensor<F>,
    /// Image-space class probabilities.
    pub seg: Tensor<F>,
    pub recon_mu_template: Tensor<F>,
    pub recon_b_template: Tensor<F>,
    pub recon_mu: Tensor<F>,
    pub recon_b: Tensor<F>,
}

impl Forward {
    pub fn composition(&self, i: usize) -> Result<CompositionWeights> {
        let m = self.weights.dim(1);
        let row: Vec<f64> = self.weights.data()[i * m..(i + 1) * m].iter().map(|&v| v as f64).collect();
        renormalized(row)
    }
}

/// Simplex point from a softmax row computed at working precision.
pub fn renormalized(mut row: Vec<f64>) -> Result<CompositionWeights> {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    CompositionWeights::new(row)
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::Validation(v));
        }
        let c = &config;
        let lvls = c.levels;
        let cl = c.latent_channels;
        let mut s = ParamStore::default();

        // Content encoder: encoder level i works at image_size / 2^i.
        let mut enc = Vec::new();
        let mut cin = 1;
        for i in 0..lvls {
            enc.push(ConvBlock::new(&mut s, &format!("content.enc{i}"), Group::Content, cin, c.enc_width(i), rng));
            cin = c.enc_width(i);
        }
        let mut taps = vec![Conv::new(&mut s, "content.tap0", Group::Content, c.enc_width(lvls - 1), cl, 1, rng)];
        let mut gates = Vec::new();
        let mut dec = Vec::new();
        let mut gate_ch = c.enc_width(lvls - 1);
        for level in 1..lvls {
            let skip_i = lvls - 1 - level;
            let sc = c.enc_width(skip_i);
            gates.push(AttentionGate::new(&mut s, &format!("content.gate{level}"), sc, gate_ch, (sc / 2).max(4), rng));
            taps.push(Conv::new(&mut s, &format!("content.tap{level}"), Group::Content, sc, cl, 1, rng));
            if level + 1 < lvls {
                let w = c.dec_width(level);
                dec.push(ConvBlock::new(&mut s, &format!("content.dec{level}"), Group::Content, gate_ch + sc, w, rng));
                gate_ch = w;
            }
        }

        let head_hidden = Linear::new(&mut s, "weight_head.fc1", Group::WeightHead, cl, 32, rng);
        let head_out = Linear::new(&mut s, "weight_head.fc2", Group::WeightHead, 32, c.num_bases, rng);

        let style_widths = [8, 16, 32];
        let mut style_convs = Vec::new();
        let mut cin = 1;
        for (i, &w) in style_widths.iter().enumerate() {
            style_convs.push(Conv::new(&mut s, &format!("style.conv{i}"), Group::Style, cin, w, 3, rng));
            cin = w;
        }
        let style_out = Linear::new(&mut s, "style.fc", Group::Style, cin, STYLE_DIM, rng);

        let shapes: Vec<[usize; 3]> = (0..lvls).map(|l| [cl, c.level_size(l), c.level_size(l)]).collect();
        let bank = BasisBank::<F>::init(c.num_bases, &shapes, rng)?;
        let mut bank_mean = Vec::new();
        let mut bank_scale = Vec::new();
        for l in 0..lvls {
            let shape = bank.raw_mean[l].shape().to_vec();
            bank_mean.push(s.add(format!("bases.mean{l}"), Group::Bases, &shape, bank.raw_mean[l].to_vec()));
            bank_scale.push(s.add(format!("bases.scale{l}"), Group::Bases, &shape, bank.raw_scale[l].to_vec()));
        }

        // Velocity variance starts at the prior variance of an interior pixel.
        let prior_var = 1.0 / (c.lambda_mag + 4.0 * c.lambda_smooth);
        let var_bias = (prior_var - manifold::VAR_FLOOR).exp_m1().ln() as F;
        let mut reg = Vec::new();
        for &l in &c.velocity_levels {
            let rc = c.registration_channels;
            let mut blocks = Vec::new();
            let mut cin = 2 * cl;
            for b in 0..4 {
                blocks.push(ConvBlock::new(&mut s, &format!("registration{l}.block{b}"), Group::Registration, cin, rc, rng));
                cin = rc;
            }
            let head = Conv::zeros(&mut s, &format!("registration{l}.head"), Group::Registration, rc, 4, vec![0.0, 0.0, var_bias, var_bias]);
            reg.push(RegistrationNet { blocks, head });
        }

        let mut seg_blocks = Vec::new();
        let mut rec_blocks = Vec::new();
        let mut prev = 0;
        for l in 0..lvls {
            let w = c.dec_width(l);
            seg_blocks.push(ConvBlock::new(&mut s, &format!("seg.block{l}"), Group::SegDecoder, prev + cl, w, rng));
            let conv = Conv::new(&mut s, &format!("recon.block{l}"), Group::ReconDecoder, prev + cl, w, 3, rng);
            let film = Linear::zeros(&mut s, &format!("recon.film{l}"), Group::ReconDecoder, STYLE_DIM, 2 * w);
            rec_blocks.push(ReconBlock { conv, film, width: w });
            prev = w;
        }
        let seg_out = Conv::new(&mut s, "seg.out", Group::SegDecoder, prev, c.num_classes + 1, 1, rng);
        let rec_mu = Conv::new(&mut s, "recon.mu", Group::ReconDecoder, prev, 1, 1, rng);
        let rec_b = Conv::zeros(&mut s, "recon.b", Group::ReconDecoder, prev, 1, vec![0.0]);

        Ok(Self {
            config,
            store: s,
            enc,
            gates,
            taps,
            dec,
            head_hidden,
            head_out,
            style_convs,
            style_out,
            bank_mean,
            bank_scale,
            reg,
            seg_blocks,
            seg_out,
            rec_blocks,
            rec_mu,
            rec_b,
        })
    }

    pub fn bind(&self) -> Bound {
        self.store.bind()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = self.config.image_size;
        if x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != s || x.dim(3) != s {
            let div = 1usize << (self.config.levels - 1);
            return Err(Error::Dimension(format!(
                "input {:?} must be [B, 1, {s}, {s}] (side divisible by {div})",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Attention U-Net over `x: [B, 1, H, W]`; tap 0 is the bottleneck, tap `l`
    /// the attention-gated skip at resolution `H / 2^(L-1-l)`.
    pub fn encode_content(&self, p: &Bound, x: &Tensor<F>) -> Result<ContentPyramid> {
        self.check_input(x)?;
        let lvls = self.config.levels;
        let mut feats = Vec::with_capacity(lvls);
        let mut h = x.clone();
        for (i, b) in self.enc.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2();
            }
            h = b.fwd(p, &h);
            feats.push(h.clone());
        }
        let mut taps = Vec::with_capacity(lvls);
        taps.push(self.taps[0].fwd(p, &h));
        let mut d = h;
        for level in 1..lvls {
            let skip = &feats[lvls - 1 - level];
            let up = d.resize_bilinear(skip.dim(2), skip.dim(3));
            let gated = self.gates[level - 1].fwd(p, skip, &up);
            taps.push(self.taps[level].fwd(p, &gated));
            if level + 1 < lvls {
                d = self.dec[level - 1].fwd(p, &Tensor::cat(&[up, gated], 1));
            }
        }
        Ok(taps)
    }

    /// Softmax weights `[B, M]` from the coarsest content map.
    pub fn infer_weights(&self, p: &Bound, c1: &Tensor<F>) -> Tensor<F> {
        let b = c1.dim(0);
        let pooled = c1.mean_keepdim(&[2, 3]).reshape(&[b, c1.dim(1)]);
        let h = self.head_hidden.fwd(p, &pooled).leaky_relu(LEAK);
        self.head_out.fwd(p, &h).softmax(1)
    }

    /// Style code `[B, 128]`.
    pub fn encode_style(&self, p: &Bound, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for c in &self.style_convs {
            h = c.fwd(p, &h).leaky_relu(LEAK);
            if h.dim(2) % 2 == 0 && h.dim(3) % 2 == 0 {
                h = h.avg_pool2();
            }
        }
        let b = h.dim(0);
        let ch = h.dim(1);
        Ok(self.style_out.fwd(p, &h.mean_keepdim(&[2, 3]).reshape(&[b, ch])))
    }

    pub fn bank(&self, p: &Bound) -> Result<BasisBank<F>> {
        BasisBank::from_raw(
            self.bank_mean.iter().map(|&i| p.get(i).clone()).collect(),
            self.bank_scale.iter().map(|&i| p.get(i).clone()).collect(),
        )
    }

    /// Detached copy of the basis bank.
    pub fn bank_values(&self) -> Result<BasisBank<F>> {
        let get = |i: usize| Tensor::new(self.store.params[i].data.clone(), &self.store.params[i].shape);
        BasisBank::from_raw(
            self.bank_mean.iter().map(|&i| get(i)).collect(),
            self.bank_scale.iter().map(|&i| get(i)).collect(),
        )
    }

    /// Coarse-to-fine velocity inference and composition.
    pub fn infer_velocity_stack<R: Rng>(
        &self,
        p: &Bound,
        content: &ContentPyramid,
        template: &AnatomyTemplate<F>,
        mode: Provenance,
        rng: &mut R,
    ) -> Result<DeformationStack<F>> {
        let cfg = &self.config;
        let mut forward_parts: Vec<Deformation<F>> = Vec::new();
        let mut inverse_parts: Vec<Deformation<F>> = Vec::new();
        let mut velocities = Vec::new();
        for (net, &level) in self.reg.iter().zip(&cfg.velocity_levels) {
            let r = cfg.level_size(level);
            let mut c = content[level].clone();
            if !forward_parts.is_empty() {
                let prior = compose_forward(&forward_parts, r, r)?;
                c = deformation::warp(&c, &prior, Interp::Bilinear)?;
            }
            let mut h = Tensor::cat(&[c, template.z[level].clone()], 1);
            for b in &net.blocks {
                h = b.fwd(p, &h);
            }
            let out = net.head.fwd(p, &h);
            let mean = out.narrow(1, 0, 2);
            let var = manifold::positive_variance(&out.narrow(1, 2, 2));
            let v = match mode {
                Provenance::Expectation => mean.clone(),
                Provenance::Sampled => {
                    let eps = manifold::standard_normal(mean.shape(), rng);
                    mean.add(&var.sqrt().mul(&eps))
                }
            };
            forward_parts.push(deformation::exponentiate(&v, cfg.squaring_steps)?);
            inverse_parts.push(deformation::invert(&v, cfg.squaring_steps)?);
            velocities.push(VelocityField { mean, var, level });
        }
        let s = cfg.image_size;
        Ok(DeformationStack {
            velocities,
            forward: compose_forward(&forward_parts, s, s)?,
            inverse: compose_inverse(&inverse_parts, s, s)?,
        })
    }

    /// Template-space class probabilities `[B, K+1, H, W]`.
    pub fn decode_segmentation_template(&self, p: &Bound, z: &[Tensor<F>]) -> Tensor<F> {
        let mut h: Option<Tensor<F>> = None;
        for (l, b) in self.seg_blocks.iter().enumerate() {
            let input = match h {
                None => z[l].clone(),
                Some(prev) => Tensor::cat(&[prev.resize_bilinear(z[l].dim(2), z[l].dim(3)), z[l].clone()], 1),
            };
            h = Some(b.fwd(p, &input));
        }
        self.seg_out.fwd(p, &h.expect("at least one level")).softmax(1)
    }

    /// Template-space Laplace location and scale, each `[B, 1, H, W]`.
    pub fn decode_reconstruction_template(&self, p: &Bound, z: &[Tensor<F>], style: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let b = style.dim(0);
        let mut h: Option<Tensor<F>> = None;
        for (l, blk) in self.rec_blocks.iter().enumerate() {
            let input = match h {
                None => z[l].clone(),
                Some(prev) => Tensor::cat(&[prev.resize_bilinear(z[l].dim(2), z[l].dim(3)), z[l].clone()], 1),
            };
            let film = blk.film.fwd(p, style);
            let gamma = film.narrow(1, 0, blk.width).reshape(&[b, blk.width, 1, 1]);
            let beta = film.narrow(1, blk.width, blk.width).reshape(&[b, blk.width, 1, 1]);
            let y = blk.conv.fwd(p, &input).instance_norm(NORM_EPS);
            h = Some(y.mul(&gamma.add_scalar(1.0)).add(&beta).leaky_relu(LEAK));
        }
        let h = h.expect("at least one level");
        let mu = self.rec_mu.fwd(p, &h);
        let scale = self.rec_b.fwd(p, &h).softplus().add_scalar(crate::losses::SCALE_FLOOR);
        (mu, scale)
    }

    /// Full pass over a batch `x: [B, 1, H, W]`.
    pub fn forward<R: Rng>(&self, p: &Bound, x: &Tensor<F>, mode: Provenance, rng: &mut R) -> Result<Forward> {
        let content = self.encode_content(p, x)?;
        let weights = self.infer_weights(p, &content[0]);
        let bank = self.bank(p)?;
        let posteriors = (0..self.config.levels)
            .map(|l| manifold::mix_posterior_batch(&bank, &weights, l))
            .collect::<Result<Vec<_>>>()?;
        let template = manifold::sample_template(&posteriors, mode, rng);
        let style = self.encode_style(p, x)?;
        let stack = self.infer_velocity_stack(p, &content, &template, mode, rng)?;
        let seg_template = self.decode_segmentation_template(p, &template.z);
        let (mu_t, b_t) = self.decode_reconstruction_template(p, &template.z, &style);
        let inv = &stack.inverse;
        let seg = deformation::warp(&seg_template, inv, Interp::Bilinear)?;
        let recon_mu = deformation::warp(&mu_t, inv, Interp::Bilinear)?;
        let recon_b = deformation::warp(&b_t, inv, Interp::Bilinear)?;
        Ok(Forward {
            content,
            weights,
            posteriors,
            template,
            style,
            stack,
            seg_template,
            seg,
            recon_mu_template: mu_t,
            recon_b_template: b_t,
            recon_mu,
            recon_b,
        })
    }

    /// Expectation-mode template for explicit composition weights `[B, M]`.
    pub fn template_for_weights(&self, p: &Bound, w: &Tensor<F>) -> Result<AnatomyTemplate<F>> {
        let bank = self.bank(p)?;
        let posteriors = (0..self.config.levels)
            .map(|l| manifold::mix_posterior_batch(&bank, w, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnatomyTemplate {
            z: posteriors.into_iter().map(|g| g.mean).collect(),
            provenance: Provenance::Expectation,
        })
    }
}
