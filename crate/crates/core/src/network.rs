//! The registration network.
//!
//! Paths, for an input grid `S` (every dim divisible by 16):
//!
//! * feature path: four stride-2 conv blocks over `cat(F, M)`, giving
//!   `Feature_l` at `S / 2^l` with `channels[l-1]` channels, `l = 1..=4`;
//! * pooling path: `F_l`, `M_l` by repeated 2× average pooling;
//! * coarse head: block to `coarse_width`, plain conv to 3 channels, giving
//!   `φ_n` at `S / 16`;
//! * rigid block: two conv blocks, channel-wise max, flatten, two FC branches
//!   for `R` (9 values) and `t` (3 values); `φ_n ← R(g + φ_n) + t − g`;
//! * refine blocks, levels 4 down to 1: upsample the previous field, warp
//!   `M_l`, `D = M_l(φ̃) − F_l`, conv over `cat(Feature_l, D, F_l, M_l(φ̃), φ̃)`
//!   and add a residual correction to `φ̃`;
//! * fusion: every stage field and post-refine feature upsampled to `S`,
//!   concatenated, a conv stack, residual onto the upsampled finest field.
//!
//! A conv block is conv → leaky ReLU → per-channel normalization with
//! batch statistics. Stages are indexed coarse to fine: stages `0..=3` are
//! refine levels `4..=1` and stage 4 is the full-resolution output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{StageGrads, StageInput};
use crate::nn::{
    channel_max_backward, channel_max_forward, concat_channels, conv3d_backward, conv3d_forward,
    he_std, leaky_relu_backward, leaky_relu_forward, linear_backward, linear_forward,
    norm_backward, norm_forward, normal_init, ConvGeom, NormCache, ParamStore, Tensor,
    KERNEL_VOLUME,
};
use crate::resample::{avg_pool2, resize_trilinear, resize_trilinear_adjoint};
use crate::scalar::{lit, Scalar};
use crate::volume::{Shape3, Volume};
use crate::warp::{
    apply_rigid_backward, apply_rigid_to_field, sample_linear, sample_linear_backward,
    DeformationField, Padding, RigidTransform,
};

pub const LEVELS: usize = 4;
/// Refine stages plus the fused output.
pub const NUM_STAGES: usize = LEVELS + 1;

/// Initialization of the last conv of each field head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadInit {
    #[default]
    Zero,
    Normal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub channels: Vec<usize>,
    pub in_shape: Shape3,
    pub leaky_slope: f64,
    pub norm_epsilon: f64,
    pub use_refine_core: bool,
    pub use_rigid: bool,
    pub final_fusion: bool,
    pub coarse_width: usize,
    pub rigid_conv_widths: [usize; 2],
    pub rigid_fc_widths: [usize; 2],
    /// Channels of each refine block's hidden feature.
    pub refine_width: usize,
    /// Output widths of the fusion stack; the last must be 3.
    pub fusion_widths: Vec<usize>,
    pub head_init: HeadInit,
    pub padding: Padding,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: vec![8, 16, 32, 64],
            in_shape: Shape3::cube(128),
            leaky_slope: 0.01,
            norm_epsilon: 1e-5,
            use_refine_core: true,
            use_rigid: true,
            final_fusion: true,
            coarse_width: 16,
            rigid_conv_widths: [64, 16],
            rigid_fc_widths: [256, 64],
            refine_width: 8,
            fusion_widths: vec![64, 32, 8, 3],
            head_init: HeadInit::Zero,
            padding: Padding::Border,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != LEVELS || self.channels.contains(&0) {
            return Err(Error::validation(format!(
                "channels must list {LEVELS} positive widths, got {:?}",
                self.channels
            )));
        }
        let s = self.in_shape;
        if s.is_empty() || !s.divisible_by(16) {
            return Err(Error::validation(format!(
                "in_shape {s} must be divisible by 16"
            )));
        }
        if !(self.leaky_slope.is_finite() && self.norm_epsilon > 0.0) {
            return Err(Error::validation(
                "leaky_slope must be finite and norm_epsilon > 0",
            ));
        }
        if self.fusion_widths.last() != Some(&3) || self.fusion_widths.contains(&0) {
            return Err(Error::validation(format!(
                "fusion widths must be positive and end in 3, got {:?}",
                self.fusion_widths
            )));
        }
        if self.coarse_width == 0
            || self.refine_width == 0
            || self.rigid_conv_widths.contains(&0)
            || self.rigid_fc_widths.contains(&0)
        {
            return Err(Error::validation("layer widths must be positive"));
        }
        if let HeadInit::Normal { std } = self.head_init {
            if !(std.is_finite() && std >= 0.0) {
                return Err(Error::validation("head_init std must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Every shape and width the network derives from its config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    /// `levels[l]` is `in_shape / 2^l`, `l = 0..=4`.
    pub levels: Vec<Shape3>,
    /// Channels of `Feature_l`, `l = 1..=4`.
    pub feature_channels: Vec<usize>,
    /// Length of the rigid block's flattened vector.
    pub flatten_len: usize,
    /// Input channels of each refine block's conv, stages coarse to fine.
    pub refine_in_channels: Vec<usize>,
    pub fusion_in_channels: usize,
    pub fusion_widths: Vec<usize>,
}

impl ShapePlan {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let levels: Vec<Shape3> = (0..=LEVELS as u32)
            .map(|l| cfg.in_shape.halved(l))
            .collect();
        let refine_in_channels = (0..LEVELS)
            .map(|s| {
                let c = cfg.channels[stage_level(s) - 1];
                if cfg.use_refine_core {
                    c + 6
                } else {
                    c
                }
            })
            .collect();
        ShapePlan {
            flatten_len: levels[LEVELS].len(),
            levels,
            feature_channels: cfg.channels.clone(),
            refine_in_channels,
            fusion_in_channels: LEVELS * (3 + cfg.refine_width),
            fusion_widths: cfg.fusion_widths.clone(),
        }
    }

    /// Grid of stage `s`.
    pub fn stage_shape(&self, s: usize) -> Shape3 {
        if s == LEVELS {
            self.levels[0]
        } else {
            self.levels[stage_level(s)]
        }
    }
}

/// Pyramid level of refine stage `s` (`0 → 4`, …, `3 → 1`).
pub const fn stage_level(s: usize) -> usize {
    LEVELS - s
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    He(usize),
    Zero,
    One,
    Normal(f64),
    Identity3x3,
}

struct ParamSpec {
    key: String,
    dims: Vec<usize>,
    init: Init,
}

/// Everything a forward pass produced, for losses, evaluation and inspection.
#[derive(Clone, Debug)]
pub struct StageOutputs<T> {
    /// `Feature_l`, `l = 1..=4`.
    pub features: Vec<Tensor<T>>,
    /// `F_l`, `l = 0..=4`; level 0 is the input.
    pub pooled_fixed: Vec<Volume<T>>,
    pub pooled_moving: Vec<Volume<T>>,
    /// Coarse head output before the rigid block.
    pub coarse_field: DeformationField<T>,
    /// Identity when the rigid block is disabled.
    pub rigid: RigidTransform<T>,
    /// Stage fields coarse to fine; the last is the final field.
    pub stage_fields: Vec<DeformationField<T>>,
    /// Pooled moving image warped by each stage's field.
    pub stage_warped: Vec<Volume<T>>,
    /// Post-refine features, stages `0..=3`.
    pub refine_features: Vec<Tensor<T>>,
}

impl<T: Scalar> StageOutputs<T> {
    pub fn final_field(&self) -> &DeformationField<T> {
        &self.stage_fields[LEVELS]
    }

    pub fn final_warped(&self) -> &Volume<T> {
        &self.stage_warped[LEVELS]
    }

    pub fn stage_fixed(&self, s: usize) -> &Volume<T> {
        if s == LEVELS {
            &self.pooled_fixed[0]
        } else {
            &self.pooled_fixed[stage_level(s)]
        }
    }

    pub fn stage_moving(&self, s: usize) -> &Volume<T> {
        if s == LEVELS {
            &self.pooled_moving[0]
        } else {
            &self.pooled_moving[stage_level(s)]
        }
    }

    /// Per-stage loss inputs, coarse to fine.
    pub fn loss_inputs(&self) -> Vec<StageInput<'_, T>> {
        (0..NUM_STAGES)
            .map(|s| StageInput {
                fixed: self.stage_fixed(s),
                warped: &self.stage_warped[s],
                field: &self.stage_fields[s],
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    key: String,
    geom: ConvGeom,
    input: Vec<T>,
    pre: Vec<T>,
    norm: NormCache<T>,
}

#[derive(Clone, Debug)]
struct FcCache<T> {
    inputs: [Vec<T>; 3],
    pre: [Vec<T>; 2],
}

#[derive(Clone, Debug)]
struct RigidCache<T> {
    conv1: BlockCache<T>,
    conv2: BlockCache<T>,
    arg: Vec<u32>,
    rot: FcCache<T>,
    trans: FcCache<T>,
}

#[derive(Clone, Debug)]
struct RefineCache<T> {
    phi_tilde: DeformationField<T>,
    prev_shape: Shape3,
    block: BlockCache<T>,
    out_geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct FusionCache<T> {
    blocks: Vec<BlockCache<T>>,
    out_input: Vec<T>,
    out_geom: ConvGeom,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    feature: Vec<BlockCache<T>>,
    coarse_block: BlockCache<T>,
    coarse_out_input: Vec<T>,
    coarse_out_geom: ConvGeom,
    rigid: Option<RigidCache<T>>,
    refine: Vec<RefineCache<T>>,
    fusion: Option<FusionCache<T>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    plan: ShapePlan,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn all_zero<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|&x| x == T::zero())
}

fn pooling_levels<T: Scalar>(v: &Volume<T>) -> Vec<Volume<T>> {
    let mut out = vec![v.clone()];
    for _ in 0..LEVELS {
        let last = out.last().expect("non-empty");
        let (data, shape) = avg_pool2(&last.data, 1, last.shape);
        let spacing = last.spacing.map(|s| s * 2.0);
        out.push(
            Volume::new(shape, data)
                .expect("pooled length")
                .with_geometry(spacing, v.origin),
        );
    }
    out
}

/// The image pyramid `v_1..=v_4` of 2× average pools.
pub fn pooling_path<T: Scalar>(v: &Volume<T>) -> Result<Vec<Volume<T>>> {
    if v.shape.is_empty() || !v.shape.divisible_by(16) {
        return Err(Error::validation(format!(
            "pooling needs a shape divisible by 16, got {}",
            v.shape
        )));
    }
    Ok(pooling_levels(v).into_iter().skip(1).collect())
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let plan = ShapePlan::new(&config);
        Ok(Network { config, plan })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    fn slope<T: Scalar>(&self) -> T {
        lit(self.config.leaky_slope)
    }

    fn head_init(&self) -> Init {
        match self.config.head_init {
            HeadInit::Zero => Init::Zero,
            HeadInit::Normal { std } => Init::Normal(std),
        }
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, key: &str, cin: usize, cout: usize, w: Init| {
            specs.push(ParamSpec {
                key: format!("{key}.weight"),
                dims: vec![cout, cin, 3, 3, 3],
                init: w,
            });
            specs.push(ParamSpec {
                key: format!("{key}.bias"),
                dims: vec![cout],
                init: Init::Zero,
            });
        };
        let block = |specs: &mut Vec<ParamSpec>, key: &str, cin: usize, cout: usize| {
            conv(specs, key, cin, cout, Init::He(cin * KERNEL_VOLUME));
            specs.push(ParamSpec {
                key: format!("{key}.gamma"),
                dims: vec![cout],
                init: Init::One,
            });
            specs.push(ParamSpec {
                key: format!("{key}.beta"),
                dims: vec![cout],
                init: Init::Zero,
            });
        };
        let mut cin = 2;
        for (l, &c) in cfg.channels.iter().enumerate() {
            block(&mut specs, &format!("feature.{}", l + 1), cin, c);
            cin = c;
        }
        let c4 = cfg.channels[LEVELS - 1];
        block(&mut specs, "coarse.block", c4, cfg.coarse_width);
        conv(
            &mut specs,
            "coarse.out",
            cfg.coarse_width,
            3,
            self.head_init(),
        );

        if cfg.use_rigid {
            let [r1, r2] = cfg.rigid_conv_widths;
            block(&mut specs, "rigid.conv1", c4, r1);
            block(&mut specs, "rigid.conv2", r1, r2);
            for (branch, out, bias) in [("rot", 9, Init::Identity3x3), ("trans", 3, Init::Zero)] {
                let widths = [
                    self.plan.flatten_len,
                    cfg.rigid_fc_widths[0],
                    cfg.rigid_fc_widths[1],
                    out,
                ];
                for k in 0..3 {
                    let (i, o) = (widths[k], widths[k + 1]);
                    let last = k == 2;
                    specs.push(ParamSpec {
                        key: format!("rigid.{branch}.fc{}.weight", k + 1),
                        dims: vec![o, i],
                        init: if last { Init::Zero } else { Init::He(i) },
                    });
                    specs.push(ParamSpec {
                        key: format!("rigid.{branch}.fc{}.bias", k + 1),
                        dims: vec![o],
                        init: if last { bias } else { Init::Zero },
                    });
                }
            }
        }

        for s in 0..LEVELS {
            let key = format!("refine{}", stage_level(s));
            block(
                &mut specs,
                &format!("{key}.block"),
                self.plan.refine_in_channels[s],
                cfg.refine_width,
            );
            conv(
                &mut specs,
                &format!("{key}.out"),
                cfg.refine_width,
                3,
                self.head_init(),
            );
        }

        if cfg.final_fusion {
            let mut cin = self.plan.fusion_in_channels;
            let n = cfg.fusion_widths.len();
            for (k, &w) in cfg.fusion_widths[..n - 1].iter().enumerate() {
                block(&mut specs, &format!("fusion.block{}", k + 1), cin, w);
                cin = w;
            }
            conv(&mut specs, "fusion.out", cin, 3, self.head_init());
        }
        specs
    }

    /// Freshly initialized parameters; each key draws from its own seeded stream.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let slope = self.config.leaky_slope;
        let mut store = ParamStore::new();
        for spec in self.specs() {
            let len: usize = spec.dims.iter().product();
            let data = match spec.init {
                Init::He(fan_in) => normal_init(seed, &spec.key, len, he_std(fan_in, slope)),
                Init::Normal(std) => normal_init(seed, &spec.key, len, std),
                Init::Zero => vec![T::zero(); len],
                Init::One => vec![T::one(); len],
                Init::Identity3x3 => (0..9)
                    .map(|i| if i % 4 == 0 { T::one() } else { T::zero() })
                    .collect(),
            };
            store.insert(spec.key, spec.dims, data);
        }
        store
    }

    /// Verifies that `params` has exactly this network's keys and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let mut layout = ParamStore::<f32>::new();
        for spec in self.specs() {
            let len = spec.dims.iter().product();
            layout.insert(spec.key, spec.dims, vec![0.0; len]);
        }
        layout.check_layout(params)
    }

    fn check_inputs<T: Scalar>(&self, fixed: &Volume<T>, moving: &Volume<T>) -> Result<()> {
        let s = self.config.in_shape;
        if fixed.shape != s || moving.shape != s {
            return Err(Error::validation(format!(
                "inputs {} and {} must both match the network shape {s}",
                fixed.shape, moving.shape
            )));
        }
        Ok(())
    }

    fn block_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        key: &str,
        input: &[T],
        geom: ConvGeom,
    ) -> (Vec<T>, BlockCache<T>) {
        let pre = conv3d_forward(
            input,
            &geom,
            p.get(&format!("{key}.weight")),
            p.get(&format!("{key}.bias")),
        );
        let act = leaky_relu_forward(&pre, self.slope());
        let (out, norm) = norm_forward(
            &act,
            geom.cout,
            p.get(&format!("{key}.gamma")),
            p.get(&format!("{key}.beta")),
            self.config.norm_epsilon,
        );
        (
            out,
            BlockCache {
                key: key.to_string(),
                geom,
                input: input.to_vec(),
                pre,
                norm,
            },
        )
    }

    fn block_bwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        c: &BlockCache<T>,
        dy: &[T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let key = &c.key;
        let cout = c.geom.cout;
        let (mut dgamma, mut dbeta) = (vec![T::zero(); cout], vec![T::zero(); cout]);
        let dact = norm_backward(
            dy,
            &c.norm,
            p.get(&format!("{key}.gamma")),
            &mut dgamma,
            &mut dbeta,
        );
        add_into(g.get_mut(&format!("{key}.gamma")), &dgamma);
        add_into(g.get_mut(&format!("{key}.beta")), &dbeta);
        let dpre = leaky_relu_backward(&c.pre, &dact, self.slope());
        self.conv_bwd(p, g, key, &c.input, &c.geom, &dpre, want_dx)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        key: &str,
        input: &[T],
        geom: &ConvGeom,
        dy: &[T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let wkey = format!("{key}.weight");
        let mut db = vec![T::zero(); geom.cout];
        let dx = conv3d_backward(
            input,
            geom,
            p.get(&wkey),
            dy,
            g.get_mut(&wkey),
            &mut db,
            want_dx,
        );
        add_into(g.get_mut(&format!("{key}.bias")), &db);
        dx
    }

    fn conv_plain<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        key: &str,
        input: &[T],
        geom: &ConvGeom,
    ) -> Vec<T> {
        conv3d_forward(
            input,
            geom,
            p.get(&format!("{key}.weight")),
            p.get(&format!("{key}.bias")),
        )
    }

    fn feature_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fixed: &Volume<T>,
        moving: &Volume<T>,
    ) -> (Vec<Tensor<T>>, Vec<BlockCache<T>>) {
        let mut x = concat_channels(&[&fixed.data, &moving.data], fixed.shape.len());
        let mut shape = fixed.shape;
        let mut cin = 2;
        let mut feats = Vec::with_capacity(LEVELS);
        let mut caches = Vec::with_capacity(LEVELS);
        for (l, &c) in self.config.channels.iter().enumerate() {
            let geom = ConvGeom::new(cin, c, 2, shape);
            let (y, cache) = self.block_fwd(p, &format!("feature.{}", l + 1), &x, geom);
            shape = geom.out_shape;
            cin = c;
            feats.push(Tensor::new(c, shape, y.clone()));
            caches.push(cache);
            x = y;
        }
        (feats, caches)
    }

    /// Feature maps at 1/2, 1/4, 1/8 and 1/16 resolution.
    pub fn feature_path<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fixed: &Volume<T>,
        moving: &Volume<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_inputs(fixed, moving)?;
        Ok(self.feature_fwd(p, fixed, moving).0)
    }

    fn check_coarsest<T: Scalar>(&self, f: &Tensor<T>) -> Result<()> {
        let (c, s) = (self.config.channels[LEVELS - 1], self.plan.levels[LEVELS]);
        if f.channels != c || f.shape != s {
            return Err(Error::validation(format!(
                "coarsest feature must be {c} channels at {s}, got {} at {}",
                f.channels, f.shape
            )));
        }
        Ok(())
    }

    fn coarse_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        f4: &Tensor<T>,
    ) -> (DeformationField<T>, BlockCache<T>, Vec<T>, ConvGeom) {
        let g1 = ConvGeom::new(f4.channels, self.config.coarse_width, 1, f4.shape);
        let (h, cache) = self.block_fwd(p, "coarse.block", &f4.data, g1);
        let g2 = ConvGeom::new(self.config.coarse_width, 3, 1, f4.shape);
        let phi = self.conv_plain(p, "coarse.out", &h, &g2);
        (DeformationField::from_raw(f4.shape, phi), cache, h, g2)
    }

    /// `φ_n`: the 3-channel field at 1/16 resolution.
    pub fn coarse_field_head<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        f4: &Tensor<T>,
    ) -> Result<DeformationField<T>> {
        self.check_coarsest(f4)?;
        Ok(self.coarse_fwd(p, f4).0)
    }

    fn fc_branch_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        branch: &str,
        x: &[T],
    ) -> (Vec<T>, FcCache<T>) {
        let slope = self.slope();
        let key = |k: usize, what: &str| format!("rigid.{branch}.fc{k}.{what}");
        let pre1 = linear_forward(x, p.get(&key(1, "weight")), p.get(&key(1, "bias")));
        let a1 = leaky_relu_forward(&pre1, slope);
        let pre2 = linear_forward(&a1, p.get(&key(2, "weight")), p.get(&key(2, "bias")));
        let a2 = leaky_relu_forward(&pre2, slope);
        let out = linear_forward(&a2, p.get(&key(3, "weight")), p.get(&key(3, "bias")));
        (
            out,
            FcCache {
                inputs: [x.to_vec(), a1, a2],
                pre: [pre1, pre2],
            },
        )
    }

    fn fc_branch_bwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        branch: &str,
        c: &FcCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let slope = self.slope();
        let mut d = dy.to_vec();
        for k in (0..3).rev() {
            let wk = format!("rigid.{branch}.fc{}.weight", k + 1);
            let bk = format!("rigid.{branch}.fc{}.bias", k + 1);
            let mut db = vec![T::zero(); d.len()];
            let dx = linear_backward(&c.inputs[k], p.get(&wk), &d, g.get_mut(&wk), &mut db);
            add_into(g.get_mut(&bk), &db);
            d = if k > 0 {
                leaky_relu_backward(&c.pre[k - 1], &dx, slope)
            } else {
                dx
            };
        }
        d
    }

    fn rigid_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        f4: &Tensor<T>,
    ) -> (RigidTransform<T>, RigidCache<T>) {
        let [r1, r2] = self.config.rigid_conv_widths;
        let shape = f4.shape;
        let (y1, conv1) = self.block_fwd(
            p,
            "rigid.conv1",
            &f4.data,
            ConvGeom::new(f4.channels, r1, 1, shape),
        );
        let (y2, conv2) = self.block_fwd(p, "rigid.conv2", &y1, ConvGeom::new(r1, r2, 1, shape));
        let (flat, arg) = channel_max_forward(&y2, r2);
        let (r, rot) = self.fc_branch_fwd(p, "rot", &flat);
        let (t, trans) = self.fc_branch_fwd(p, "trans", &flat);
        let transform = RigidTransform {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: [t[0], t[1], t[2]],
        };
        (
            transform,
            RigidCache {
                conv1,
                conv2,
                arg,
                rot,
                trans,
            },
        )
    }

    /// `(R, t)` from the coarsest feature, plus the flattened vector length.
    pub fn rigid_block<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        f4: &Tensor<T>,
    ) -> Result<(RigidTransform<T>, usize)> {
        self.check_coarsest(f4)?;
        if !self.config.use_rigid {
            return Err(Error::validation(
                "rigid block is disabled in this configuration",
            ));
        }
        let (t, cache) = self.rigid_fwd(p, f4);
        Ok((t, cache.rot.inputs[0].len()))
    }

    #[allow(clippy::too_many_arguments)]
    fn refine_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        s: usize,
        m_i: &Volume<T>,
        f_i: &Volume<T>,
        feat: &Tensor<T>,
        phi_prev: &DeformationField<T>,
    ) -> (DeformationField<T>, Vec<T>, RefineCache<T>) {
        let shape = m_i.shape;
        let n = shape.len();
        let prev_shape = phi_prev.shape();
        let phi_tilde = DeformationField::from_raw(
            shape,
            resize_trilinear(phi_prev.data(), 3, prev_shape, shape),
        );
        let input = if self.config.use_refine_core {
            let warped = sample_linear(&m_i.data, shape, &phi_tilde, self.config.padding);
            let diff: Vec<T> = warped.iter().zip(&f_i.data).map(|(&a, &b)| a - b).collect();
            concat_channels(
                &[&feat.data, &diff, &f_i.data, &warped, phi_tilde.data()],
                n,
            )
        } else {
            feat.data.clone()
        };
        let key = format!("refine{}", stage_level(s));
        let cin = self.plan.refine_in_channels[s];
        let w = self.config.refine_width;
        let (h, block) = self.block_fwd(
            p,
            &format!("{key}.block"),
            &input,
            ConvGeom::new(cin, w, 1, shape),
        );
        let out_geom = ConvGeom::new(w, 3, 1, shape);
        let delta = self.conv_plain(p, &format!("{key}.out"), &h, &out_geom);
        let phi: Vec<T> = phi_tilde
            .data()
            .iter()
            .zip(&delta)
            .map(|(&a, &b)| a + b)
            .collect();
        (
            DeformationField::from_raw(shape, phi),
            h,
            RefineCache {
                phi_tilde,
                prev_shape,
                block,
                out_geom,
            },
        )
    }

    /// One refine step at stage `s` (level `4 - s`). Returns the refined field
    /// and the block's hidden feature.
    pub fn refine_block<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        s: usize,
        m_i: &Volume<T>,
        f_i: &Volume<T>,
        feat: &Tensor<T>,
        phi_prev: &DeformationField<T>,
    ) -> Result<(DeformationField<T>, Tensor<T>)> {
        if s >= LEVELS {
            return Err(Error::validation(format!("refine stage {s} out of range")));
        }
        let shape = self.plan.stage_shape(s);
        let c = self.config.channels[stage_level(s) - 1];
        if m_i.shape != shape || f_i.shape != shape || feat.shape != shape || feat.channels != c {
            return Err(Error::validation(format!(
                "refine stage {s} expects {c} channels at {shape}"
            )));
        }
        if !phi_prev.shape().fits_within(&shape) {
            return Err(Error::validation("previous field is finer than the stage"));
        }
        let (phi, h, _) = self.refine_fwd(p, s, m_i, f_i, feat, phi_prev);
        Ok((phi, Tensor::new(self.config.refine_width, shape, h)))
    }

    fn fusion_input<T: Scalar>(&self, fields: &[DeformationField<T>], hs: &[Tensor<T>]) -> Vec<T> {
        let full = self.plan.levels[0];
        let mut parts = Vec::with_capacity(self.plan.fusion_in_channels * full.len());
        for (phi, h) in fields.iter().zip(hs) {
            parts.extend(resize_trilinear(phi.data(), 3, phi.shape(), full));
            parts.extend(resize_trilinear(&h.data, h.channels, h.shape, full));
        }
        parts
    }

    fn fusion_fwd<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fields: &[DeformationField<T>],
        hs: &[Tensor<T>],
    ) -> (DeformationField<T>, Option<FusionCache<T>>) {
        let full = self.plan.levels[0];
        let finest = &fields[LEVELS - 1];
        let base = resize_trilinear(finest.data(), 3, finest.shape(), full);
        if !self.config.final_fusion {
            return (DeformationField::from_raw(full, base), None);
        }
        let mut x = self.fusion_input(fields, hs);
        let mut cin = self.plan.fusion_in_channels;
        let widths = &self.config.fusion_widths;
        let mut blocks = Vec::with_capacity(widths.len() - 1);
        for (k, &w) in widths[..widths.len() - 1].iter().enumerate() {
            let (y, c) = self.block_fwd(
                p,
                &format!("fusion.block{}", k + 1),
                &x,
                ConvGeom::new(cin, w, 1, full),
            );
            blocks.push(c);
            x = y;
            cin = w;
        }
        let out_geom = ConvGeom::new(cin, 3, 1, full);
        let delta = self.conv_plain(p, "fusion.out", &x, &out_geom);
        let phi = base.iter().zip(&delta).map(|(&a, &b)| a + b).collect();
        (
            DeformationField::from_raw(full, phi),
            Some(FusionCache {
                blocks,
                out_input: x,
                out_geom,
            }),
        )
    }

    /// Full-resolution field from the four stage fields and hidden features
    /// (both coarse to fine).
    pub fn final_fusion<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fields: &[DeformationField<T>],
        hs: &[Tensor<T>],
    ) -> Result<DeformationField<T>> {
        if fields.len() != LEVELS || hs.len() != LEVELS {
            return Err(Error::validation(format!(
                "fusion needs {LEVELS} stage fields and features"
            )));
        }
        for s in 0..LEVELS {
            let shape = self.plan.stage_shape(s);
            if fields[s].shape() != shape
                || hs[s].shape != shape
                || hs[s].channels != self.config.refine_width
            {
                return Err(Error::validation(format!(
                    "stage {s} inputs must be at {shape}"
                )));
            }
        }
        Ok(self.fusion_fwd(p, fields, hs).0)
    }

    /// Runs the whole network and keeps what the backward pass needs.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fixed: &Volume<T>,
        moving: &Volume<T>,
    ) -> Result<(StageOutputs<T>, Tape<T>)> {
        self.check_inputs(fixed, moving)?;
        let pad = self.config.padding;
        let pooled_fixed = pooling_levels(fixed);
        let pooled_moving = pooling_levels(moving);
        let (features, feature_caches) = self.feature_fwd(p, fixed, moving);
        let f4 = &features[LEVELS - 1];
        let (coarse_field, coarse_block, coarse_out_input, coarse_out_geom) =
            self.coarse_fwd(p, f4);

        let (rigid, rigid_cache, mut phi_prev) = if self.config.use_rigid {
            let (t, cache) = self.rigid_fwd(p, f4);
            let phi = apply_rigid_to_field(&coarse_field, &t)?;
            (t, Some(cache), phi)
        } else {
            (RigidTransform::identity(), None, coarse_field.clone())
        };

        let mut stage_fields = Vec::with_capacity(NUM_STAGES);
        let mut stage_warped = Vec::with_capacity(NUM_STAGES);
        let mut refine_features = Vec::with_capacity(LEVELS);
        let mut refine = Vec::with_capacity(LEVELS);
        for s in 0..LEVELS {
            let l = stage_level(s);
            let (m_i, f_i) = (&pooled_moving[l], &pooled_fixed[l]);
            let (phi, h, cache) = self.refine_fwd(p, s, m_i, f_i, &features[l - 1], &phi_prev);
            let warped = sample_linear(&m_i.data, m_i.shape, &phi, pad);
            stage_warped
                .push(Volume::new(m_i.shape, warped)?.with_geometry(m_i.spacing, m_i.origin));
            refine_features.push(Tensor::new(self.config.refine_width, m_i.shape, h));
            refine.push(cache);
            stage_fields.push(phi.clone());
            phi_prev = phi;
        }

        let (phi0, fusion) = self.fusion_fwd(p, &stage_fields, &refine_features);
        let warped0 = sample_linear(&moving.data, moving.shape, &phi0, pad);
        stage_warped
            .push(Volume::new(moving.shape, warped0)?.with_geometry(moving.spacing, moving.origin));
        stage_fields.push(phi0);

        let outputs = StageOutputs {
            features,
            pooled_fixed,
            pooled_moving,
            coarse_field,
            rigid,
            stage_fields,
            stage_warped,
            refine_features,
        };
        let tape = Tape {
            feature: feature_caches,
            coarse_block,
            coarse_out_input,
            coarse_out_geom,
            rigid: rigid_cache,
            refine,
            fusion,
        };
        Ok((outputs, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn infer<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        fixed: &Volume<T>,
        moving: &Volume<T>,
    ) -> Result<StageOutputs<T>> {
        Ok(self.forward(p, fixed, moving)?.0)
    }

    /// Parameter gradients given the loss gradients of every stage's warped
    /// image and field (see [`crate::losses::total_loss_backward`]).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        out: &StageOutputs<T>,
        tape: &Tape<T>,
        stage_grads: &[StageGrads<T>],
    ) -> Result<ParamStore<T>> {
        if stage_grads.len() != NUM_STAGES {
            return Err(Error::validation(format!(
                "expected {NUM_STAGES} stage gradients, got {}",
                stage_grads.len()
            )));
        }
        let pad = self.config.padding;
        let mut g = p.zeros_like();

        // Loss gradient with respect to each stage field.
        let mut dphi: Vec<Vec<T>> = Vec::with_capacity(NUM_STAGES);
        for (s, sg) in stage_grads.iter().enumerate() {
            let m = out.stage_moving(s);
            let mut d = sg.field.clone();
            if !all_zero(&sg.warped) {
                let sb = sample_linear_backward(
                    &m.data,
                    m.shape,
                    &out.stage_fields[s],
                    pad,
                    &sg.warped,
                    false,
                );
                add_into(&mut d, &sb.field);
            }
            dphi.push(d);
        }
        let mut dh: Vec<Vec<T>> = (0..LEVELS)
            .map(|s| vec![T::zero(); out.refine_features[s].data.len()])
            .collect();

        // Fusion.
        let full = self.plan.levels[0];
        let finest_shape = self.plan.stage_shape(LEVELS - 1);
        let d0 = std::mem::take(&mut dphi[LEVELS]);
        if !all_zero(&d0) {
            add_into(
                &mut dphi[LEVELS - 1],
                &resize_trilinear_adjoint(&d0, 3, finest_shape, full),
            );
            if let Some(fc) = &tape.fusion {
                let mut dx = self
                    .conv_bwd(
                        p,
                        &mut g,
                        "fusion.out",
                        &fc.out_input,
                        &fc.out_geom,
                        &d0,
                        true,
                    )
                    .expect("input gradient");
                for b in fc.blocks.iter().rev() {
                    dx = self
                        .block_bwd(p, &mut g, b, &dx, true)
                        .expect("input gradient");
                }
                let n = full.len();
                let rw = self.config.refine_width;
                for s in 0..LEVELS {
                    let shape = self.plan.stage_shape(s);
                    let base = s * (3 + rw) * n;
                    add_into(
                        &mut dphi[s],
                        &resize_trilinear_adjoint(&dx[base..base + 3 * n], 3, shape, full),
                    );
                    add_into(
                        &mut dh[s],
                        &resize_trilinear_adjoint(
                            &dx[base + 3 * n..base + (3 + rw) * n],
                            rw,
                            shape,
                            full,
                        ),
                    );
                }
            }
        }

        // Refine blocks, fine to coarse.
        let mut dfeat: Vec<Vec<T>> = out
            .features
            .iter()
            .map(|f| vec![T::zero(); f.data.len()])
            .collect();
        let mut dphi_rigid = Vec::new();
        for s in (0..LEVELS).rev() {
            let l = stage_level(s);
            let cache = &tape.refine[s];
            let shape = self.plan.stage_shape(s);
            let n = shape.len();
            let key = format!("refine{l}");
            let d = std::mem::take(&mut dphi[s]);
            let mut dtilde = d.clone();
            let mut dhs = self
                .conv_bwd(
                    p,
                    &mut g,
                    &format!("{key}.out"),
                    &out.refine_features[s].data,
                    &cache.out_geom,
                    &d,
                    true,
                )
                .expect("input gradient");
            add_into(&mut dhs, &dh[s]);
            if !all_zero(&dhs) {
                let din = self
                    .block_bwd(p, &mut g, &cache.block, &dhs, true)
                    .expect("input gradient");
                let c = out.features[l - 1].channels;
                add_into(&mut dfeat[l - 1], &din[..c * n]);
                if self.config.use_refine_core {
                    let ddiff = &din[c * n..(c + 1) * n];
                    let dwarp = &din[(c + 2) * n..(c + 3) * n];
                    add_into(&mut dtilde, &din[(c + 3) * n..(c + 6) * n]);
                    let dm: Vec<T> = ddiff.iter().zip(dwarp).map(|(&a, &b)| a + b).collect();
                    let m = &out.pooled_moving[l];
                    let sb =
                        sample_linear_backward(&m.data, shape, &cache.phi_tilde, pad, &dm, false);
                    add_into(&mut dtilde, &sb.field);
                }
            }
            let dprev = resize_trilinear_adjoint(&dtilde, 3, cache.prev_shape, shape);
            if s > 0 {
                add_into(&mut dphi[s - 1], &dprev);
            } else {
                dphi_rigid = dprev;
            }
        }

        // Rigid block.
        let c4 = self.config.channels[LEVELS - 1];
        let mut df4 = std::mem::take(&mut dfeat[LEVELS - 1]);
        let dcoarse = match &tape.rigid {
            Some(rc) => {
                let rg = apply_rigid_backward(&out.coarse_field, &out.rigid, &dphi_rigid);
                let dr: Vec<T> = rg.rotation.iter().flatten().copied().collect();
                let mut dflat = self.fc_branch_bwd(p, &mut g, "rot", &rc.rot, &dr);
                add_into(
                    &mut dflat,
                    &self.fc_branch_bwd(p, &mut g, "trans", &rc.trans, &rg.translation),
                );
                if !all_zero(&dflat) {
                    let r2 = self.config.rigid_conv_widths[1];
                    let dy2 = channel_max_backward(&dflat, &rc.arg, r2);
                    let dy1 = self
                        .block_bwd(p, &mut g, &rc.conv2, &dy2, true)
                        .expect("input gradient");
                    let dx = self
                        .block_bwd(p, &mut g, &rc.conv1, &dy1, true)
                        .expect("input gradient");
                    add_into(&mut df4, &dx);
                }
                rg.field
            }
            None => dphi_rigid,
        };

        // Coarse head.
        let dhc = self
            .conv_bwd(
                p,
                &mut g,
                "coarse.out",
                &tape.coarse_out_input,
                &tape.coarse_out_geom,
                &dcoarse,
                true,
            )
            .expect("input gradient");
        if !all_zero(&dhc) {
            add_into(
                &mut df4,
                &self
                    .block_bwd(p, &mut g, &tape.coarse_block, &dhc, true)
                    .expect("input gradient"),
            );
        }
        debug_assert_eq!(df4.len(), c4 * self.plan.levels[LEVELS].len());

        // Feature path, coarse to fine.
        let mut dx = df4;
        for l in (0..LEVELS).rev() {
            if l < LEVELS - 1 {
                add_into(&mut dx, &dfeat[l]);
            }
            let want = l > 0;
            let r = self.block_bwd(p, &mut g, &tape.feature[l], &dx, want);
            if let Some(r) = r {
                dx = r;
            }
        }
        Ok(g)
    }
}
