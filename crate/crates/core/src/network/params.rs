use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{instance_feature_width, NetworkConfig, MOTION_FEATURE_WIDTH, NUM_POINT_CLASSES, POINT_INPUT_WIDTH};
use super::layers::Conv2dParams;
use crate::real::Real;
use crate::sparse::ConvParams;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams<T> {
    pub stem: ConvParams<T>,
    pub down: Vec<ConvParams<T>>,
    /// `up[i]` maps level `i + 1` back onto level `i`.
    pub up: Vec<ConvParams<T>>,
    pub fuse: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParams<T> {
    pub stages: Vec<ConvParams<T>>,
    pub bev: Vec<Conv2dParams<T>>,
    pub heatmap: Conv2dParams<T>,
    pub regression: Conv2dParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub top: ConvParams<T>,
    /// `up[l]` maps decoder level `l + 1` onto level `l` (level 0 is full resolution).
    pub up: Vec<ConvParams<T>>,
    pub fuse: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
}

/// All learnable weights. The same type doubles as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub motion: MotionParams<T>,
    pub instance: InstanceParams<T>,
    pub fusion: FusionParams<T>,
}

const UNIT: [usize; 4] = [1; 4];
const NO_STRIDE: [i32; 4] = [1; 4];

fn spatial_stride(s: usize) -> [i32; 4] {
    [s as i32, s as i32, s as i32, 1]
}

/// Deterministic initialization from `cfg.seed`: uniform `±sqrt(1/fan_in)`
/// weights, zero biases on the BEV layers and regression head, heatmap bias
/// set to `cfg.heatmap_bias`.
pub fn init_params<T: Real>(cfg: &NetworkConfig) -> Params<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &mut rng;
    let mc = &cfg.motion_channels;
    let mk = cfg.motion_kernel;
    let motion = MotionParams {
        stem: ConvParams::random(r, mk, NO_STRIDE, 1, mc[0], true),
        down: (0..cfg.motion_levels)
            .map(|i| ConvParams::random(r, mk, spatial_stride(2), mc[i], mc[i + 1], true))
            .collect(),
        up: (0..cfg.motion_levels)
            .map(|i| ConvParams::random(r, mk, spatial_stride(2), mc[i + 1], mc[i], true))
            .collect(),
        fuse: (0..cfg.motion_levels)
            .map(|i| ConvParams::random(r, mk, NO_STRIDE, 2 * mc[i], mc[i], true))
            .collect(),
        head: ConvParams::random(r, UNIT, NO_STRIDE, mc[0], MOTION_FEATURE_WIDTH, true),
    };

    let ic = &cfg.inst_channels;
    let ik = cfg.inst_kernel;
    let s = cfg.stages();
    let stages = (0..s)
        .map(|k| {
            let inw = if k == 0 { POINT_INPUT_WIDTH } else { ic[k - 1] };
            ConvParams::random(r, ik, spatial_stride(cfg.inst_strides[k]), inw, ic[k], true)
        })
        .collect();
    let mut bev: Vec<Conv2dParams<T>> = (0..cfg.bev_layers)
        .map(|l| {
            let inw = if l == 0 { cfg.bev.z_bins * ic[s - 1] } else { cfg.bev_channels };
            Conv2dParams::random(r, 3, inw, cfg.bev_channels)
        })
        .collect();
    bev.iter_mut().for_each(|p| p.bias.fill(T::zero()));
    let head_in = if cfg.bev_layers == 0 {
        cfg.bev.z_bins * ic[s - 1]
    } else {
        cfg.bev_channels
    };
    let mut heatmap = Conv2dParams::random(r, cfg.head_kernel, head_in, cfg.num_classes);
    heatmap.bias.iter_mut().for_each(|b| *b = T::of(cfg.heatmap_bias));
    let mut regression = Conv2dParams::random(r, cfg.head_kernel, head_in, crate::losses::REGRESSION_WIDTH);
    regression.bias.fill(T::zero());
    let instance = InstanceParams {
        stages,
        bev,
        heatmap,
        regression,
    };

    let fc = &cfg.fusion_channels;
    let iw = instance_feature_width(cfg.num_classes);
    let fusion = FusionParams {
        top: ConvParams::random(r, ik, NO_STRIDE, ic[s - 1] + iw, fc[s], true),
        up: (0..s)
            .map(|l| ConvParams::random(r, ik, spatial_stride(cfg.inst_strides[l]), fc[l + 1], fc[l], true))
            .collect(),
        fuse: (0..s)
            .map(|l| {
                let skip = if l == 0 { POINT_INPUT_WIDTH } else { ic[l - 1] + iw };
                ConvParams::random(r, ik, NO_STRIDE, fc[l] + skip, fc[l], true)
            })
            .collect(),
        head: ConvParams::random(r, UNIT, NO_STRIDE, fc[0], NUM_POINT_CLASSES, true),
    };
    Params {
        motion,
        instance,
        fusion,
    }
}

fn visit_conv<T>(name: &str, p: &ConvParams<T>, f: &mut dyn FnMut(String, Vec<usize>, &[T])) {
    let vol = p.kernel.iter().product();
    f(format!("{name}.weight"), vec![vol, p.in_width, p.out_width], &p.weights);
    if let Some(b) = &p.bias {
        f(format!("{name}.bias"), vec![p.out_width], b);
    }
}

fn visit_conv_mut<T>(name: &str, p: &mut ConvParams<T>, f: &mut dyn FnMut(String, Vec<usize>, &mut [T])) {
    let vol = p.kernel.iter().product();
    f(format!("{name}.weight"), vec![vol, p.in_width, p.out_width], &mut p.weights);
    if let Some(b) = &mut p.bias {
        f(format!("{name}.bias"), vec![p.out_width], b);
    }
}

fn visit_conv2d<T>(name: &str, p: &Conv2dParams<T>, f: &mut dyn FnMut(String, Vec<usize>, &[T])) {
    f(
        format!("{name}.weight"),
        vec![p.kernel, p.kernel, p.in_channels, p.out_channels],
        &p.weights,
    );
    f(format!("{name}.bias"), vec![p.out_channels], &p.bias);
}

fn visit_conv2d_mut<T>(name: &str, p: &mut Conv2dParams<T>, f: &mut dyn FnMut(String, Vec<usize>, &mut [T])) {
    f(
        format!("{name}.weight"),
        vec![p.kernel, p.kernel, p.in_channels, p.out_channels],
        &mut p.weights,
    );
    f(format!("{name}.bias"), vec![p.out_channels], &mut p.bias);
}

impl<T: Real> Params<T> {
    /// Calls `f(name, shape, values)` for every tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(String, Vec<usize>, &[T])) {
        let m = &self.motion;
        visit_conv("motion.stem", &m.stem, f);
        for (i, p) in m.down.iter().enumerate() {
            visit_conv(&format!("motion.down{i}"), p, f);
        }
        for (i, p) in m.up.iter().enumerate() {
            visit_conv(&format!("motion.up{i}"), p, f);
        }
        for (i, p) in m.fuse.iter().enumerate() {
            visit_conv(&format!("motion.fuse{i}"), p, f);
        }
        visit_conv("motion.head", &m.head, f);
        let n = &self.instance;
        for (i, p) in n.stages.iter().enumerate() {
            visit_conv(&format!("instance.stage{i}"), p, f);
        }
        for (i, p) in n.bev.iter().enumerate() {
            visit_conv2d(&format!("instance.bev{i}"), p, f);
        }
        visit_conv2d("instance.heatmap", &n.heatmap, f);
        visit_conv2d("instance.regression", &n.regression, f);
        let u = &self.fusion;
        visit_conv("fusion.top", &u.top, f);
        for (i, p) in u.up.iter().enumerate() {
            visit_conv(&format!("fusion.up{i}"), p, f);
        }
        for (i, p) in u.fuse.iter().enumerate() {
            visit_conv(&format!("fusion.fuse{i}"), p, f);
        }
        visit_conv("fusion.head", &u.head, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, Vec<usize>, &mut [T])) {
        let m = &mut self.motion;
        visit_conv_mut("motion.stem", &mut m.stem, f);
        for (i, p) in m.down.iter_mut().enumerate() {
            visit_conv_mut(&format!("motion.down{i}"), p, f);
        }
        for (i, p) in m.up.iter_mut().enumerate() {
            visit_conv_mut(&format!("motion.up{i}"), p, f);
        }
        for (i, p) in m.fuse.iter_mut().enumerate() {
            visit_conv_mut(&format!("motion.fuse{i}"), p, f);
        }
        visit_conv_mut("motion.head", &mut m.head, f);
        let n = &mut self.instance;
        for (i, p) in n.stages.iter_mut().enumerate() {
            visit_conv_mut(&format!("instance.stage{i}"), p, f);
        }
        for (i, p) in n.bev.iter_mut().enumerate() {
            visit_conv2d_mut(&format!("instance.bev{i}"), p, f);
        }
        visit_conv2d_mut("instance.heatmap", &mut n.heatmap, f);
        visit_conv2d_mut("instance.regression", &mut n.regression, f);
        let u = &mut self.fusion;
        visit_conv_mut("fusion.top", &mut u.top, f);
        for (i, p) in u.up.iter_mut().enumerate() {
            visit_conv_mut(&format!("fusion.up{i}"), p, f);
        }
        for (i, p) in u.fuse.iter_mut().enumerate() {
            visit_conv_mut(&format!("fusion.fuse{i}"), p, f);
        }
        visit_conv_mut("fusion.head", &mut u.head, f);
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all values from a flat vector in [`Params::visit`] order.
    pub fn load_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut pos = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[pos..pos + v.len()]);
            pos += v.len();
        });
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let conv = |p: &ConvParams<T>| p.cast::<U>();
        let conv2 = |p: &Conv2dParams<T>| p.cast::<U>();
        Params {
            motion: MotionParams {
                stem: conv(&self.motion.stem),
                down: self.motion.down.iter().map(conv).collect(),
                up: self.motion.up.iter().map(conv).collect(),
                fuse: self.motion.fuse.iter().map(conv).collect(),
                head: conv(&self.motion.head),
            },
            instance: InstanceParams {
                stages: self.instance.stages.iter().map(conv).collect(),
                bev: self.instance.bev.iter().map(conv2).collect(),
                heatmap: conv2(&self.instance.heatmap),
                regression: conv2(&self.instance.regression),
            },
            fusion: FusionParams {
                top: conv(&self.fusion.top),
                up: self.fusion.up.iter().map(conv).collect(),
                fuse: self.fusion.fuse.iter().map(conv).collect(),
                head: conv(&self.fusion.head),
            },
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}
