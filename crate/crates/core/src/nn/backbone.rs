//! Residual backbones.
//!
//! `ResNet` is the CIFAR-style network of `6n + 2` layers: a 3x3 stem, three
//! stages of `n` basic blocks with widths `w, 2w, 4w` (stride 2 at each stage
//! entry, parameter-free zero-padding shortcuts) and global average pooling,
//! giving a `4w`-dimensional embedding. Depth 20 and width 16 give the
//! 64-dimensional ResNet-20.
//!
//! `ResMlp` flattens the input and applies the same block structure with
//! fully-connected layers; it is the desk-scale preset for synthetic data.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{Op, Saved};
use super::{Act, Grads, NamedTensor, ParamSet, Pass};
use crate::data::ImageShape;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    ResNet { depth: usize, width: usize },
    ResMlp { hidden: usize, blocks: usize },
}

impl Architecture {
    pub const fn resnet20() -> Self {
        Architecture::ResNet {
            depth: 20,
            width: 16,
        }
    }

    pub const fn res_mlp(hidden: usize, blocks: usize) -> Self {
        Architecture::ResMlp { hidden, blocks }
    }

    pub fn embedding_dim(&self) -> usize {
        match *self {
            Architecture::ResNet { width, .. } => 4 * width,
            Architecture::ResMlp { hidden, .. } => hidden,
        }
    }
}

#[derive(Debug, Clone)]
enum Shortcut {
    Identity,
    /// Stride-2 subsampling followed by zero channel padding.
    PadStride { stride: usize, out_c: usize },
}

#[derive(Debug, Clone)]
struct Block {
    body: Vec<Op>,
    shortcut: Shortcut,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Layer graph of a backbone. Parameter indices refer to the leading
/// entries of the owning model's [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub arch: Architecture,
    pub input: ImageShape,
    stem: Vec<Op>,
    blocks: Vec<Block>,
    pool: bool,
    param_specs: Vec<(String, Vec<usize>, Init)>,
    buffer_specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Debug)]
struct BlockTape {
    body: Vec<Saved>,
    /// Post-activation output; its sign pattern is the final ReLU mask.
    out: Act,
    in_dims: (usize, usize, usize),
}

/// Values recorded by a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct Tape {
    stem: Vec<Saved>,
    blocks: Vec<BlockTape>,
    pooled_from: Option<(usize, usize, usize, usize)>,
}

struct Builder {
    params: Vec<(String, Vec<usize>, Init)>,
    buffers: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> Op {
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_c, in_c, 3, 3],
            Init::Kaiming { fan_in: in_c * 9 },
        );
        Op::Conv {
            weight,
            in_c,
            out_c,
            k: 3,
            stride,
            pad: 1,
        }
    }

    fn linear(&mut self, name: &str, in_f: usize, out_f: usize) -> Op {
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_f, in_f],
            Init::Kaiming { fan_in: in_f },
        );
        let bias = self.param(format!("{name}.bias"), vec![out_f], Init::Zeros);
        Op::Linear {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Op {
        let gamma = self.param(format!("{name}.gamma"), vec![c], Init::Ones);
        let beta = self.param(format!("{name}.beta"), vec![c], Init::Zeros);
        self.buffers
            .push((format!("{name}.running_mean"), vec![c], Init::Zeros));
        self.buffers
            .push((format!("{name}.running_var"), vec![c], Init::Ones));
        let n = self.buffers.len();
        Op::Bn {
            gamma,
            beta,
            mean: n - 2,
            var: n - 1,
        }
    }
}

impl Backbone {
    pub fn new(arch: Architecture, input: ImageShape) -> Result<Self> {
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let (stem, blocks, pool) = match arch {
            Architecture::ResNet { depth, width } => {
                if depth < 8 || (depth - 2) % 6 != 0 || width == 0 {
                    return Err(Error::Validation(format!(
                        "residual network depth must be 6n + 2 with n >= 1 and width >= 1, got depth {depth}, width {width}"
                    )));
                }
                let per_stage = (depth - 2) / 6;
                let stem = vec![
                    b.conv("stem.conv", input.channels, width, 1),
                    b.bn("stem.bn", width),
                    Op::Relu,
                ];
                let mut blocks = Vec::new();
                let mut in_c = width;
                for stage in 0..3 {
                    let out_c = width << stage;
                    for j in 0..per_stage {
                        let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                        let name = format!("stage{stage}.block{j}");
                        let body = vec![
                            b.conv(&format!("{name}.conv1"), in_c, out_c, stride),
                            b.bn(&format!("{name}.bn1"), out_c),
                            Op::Relu,
                            b.conv(&format!("{name}.conv2"), out_c, out_c, 1),
                            b.bn(&format!("{name}.bn2"), out_c),
                        ];
                        let shortcut = if stride == 1 && in_c == out_c {
                            Shortcut::Identity
                        } else {
                            Shortcut::PadStride { stride, out_c }
                        };
                        blocks.push(Block { body, shortcut });
                        in_c = out_c;
                    }
                }
                (stem, blocks, true)
            }
            Architecture::ResMlp { hidden, blocks: n } => {
                if hidden == 0 {
                    return Err(Error::Validation("hidden width must be >= 1".into()));
                }
                let stem = vec![
                    b.linear("stem.fc", input.len(), hidden),
                    b.bn("stem.bn", hidden),
                    Op::Relu,
                ];
                let blocks = (0..n)
                    .map(|j| {
                        let name = format!("block{j}");
                        Block {
                            body: vec![
                                b.linear(&format!("{name}.fc1"), hidden, hidden),
                                b.bn(&format!("{name}.bn1"), hidden),
                                Op::Relu,
                                b.linear(&format!("{name}.fc2"), hidden, hidden),
                                b.bn(&format!("{name}.bn2"), hidden),
                            ],
                            shortcut: Shortcut::Identity,
                        }
                    })
                    .collect();
                (stem, blocks, false)
            }
        };
        Ok(Self {
            arch,
            input,
            stem,
            blocks,
            pool,
            param_specs: b.params,
            buffer_specs: b.buffers,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn num_param_tensors(&self) -> usize {
        self.param_specs.len()
    }

    /// Number of trainable scalars in the backbone.
    pub fn num_parameters(&self) -> usize {
        self.param_specs
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Freshly initialized parameters (Kaiming-normal weights, unit BN scales).
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        materialize(&self.param_specs, Some(rng))
    }

    pub fn init_buffers(&self) -> ParamSet {
        materialize(&self.buffer_specs, None)
    }

    /// Runs the backbone on `x` (`n x C x H x W`) and returns `n x D` features.
    pub fn forward(
        &self,
        params: &ParamSet,
        buffers: &mut ParamSet,
        x: Act,
        pass: Pass,
    ) -> (Act, Option<Tape>) {
        let mut x = if self.pool {
            x
        } else {
            let d = x.per_example();
            Act::features(x.n, d, x.data)
        };
        let mut tape = Tape {
            stem: Vec::new(),
            blocks: Vec::new(),
            pooled_from: None,
        };
        for op in &self.stem {
            let (y, saved) = op.forward(params, buffers, x, pass);
            tape.stem.push(saved);
            x = y;
        }
        for block in &self.blocks {
            let input = x;
            let in_dims = (input.c, input.h, input.w);
            let shortcut = apply_shortcut(&block.shortcut, &input);
            let mut y = input;
            let mut saved = Vec::with_capacity(block.body.len());
            for op in &block.body {
                let (out, s) = op.forward(params, buffers, y, pass);
                saved.push(s);
                y = out;
            }
            for (v, s) in y.data.iter_mut().zip(&shortcut.data) {
                *v = (*v + s).max(0.0);
            }
            if pass.record {
                tape.blocks.push(BlockTape {
                    body: saved,
                    out: y.clone(),
                    in_dims,
                });
            }
            x = y;
        }
        if self.pool {
            tape.pooled_from = Some((x.n, x.c, x.h, x.w));
            x = global_avg_pool(&x);
        }
        (x, pass.record.then_some(tape))
    }

    /// Accumulates parameter gradients for the feature gradient `dfeat`.
    pub fn backward(&self, params: &ParamSet, tape: &Tape, dfeat: Act, grads: &mut Grads) {
        let mut dy = match tape.pooled_from {
            Some((n, c, h, w)) => {
                let hw = (h * w) as f32;
                let mut d = Act::zeros(n, c, h, w);
                for i in 0..n {
                    for ch in 0..c {
                        let g = dfeat.data[i * c + ch] / hw;
                        for v in &mut d.data[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                            *v = g;
                        }
                    }
                }
                d
            }
            None => dfeat,
        };
        for (block, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            for (g, o) in dy.data.iter_mut().zip(&bt.out.data) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut d_short = shortcut_backward(&block.shortcut, &dy, bt.in_dims);
            let mut d = dy;
            for (op, s) in block.body.iter().zip(&bt.body).rev() {
                d = op.backward(params, s, d, grads, true).expect("dx requested");
            }
            for (a, b) in d_short.data.iter_mut().zip(&d.data) {
                *a += b;
            }
            dy = d_short;
        }
        let n_stem = self.stem.len();
        for (k, (op, s)) in self.stem.iter().zip(&tape.stem).enumerate().rev() {
            let need_dx = k > 0;
            match op.backward(params, s, dy, grads, need_dx) {
                Some(d) => dy = d,
                None => {
                    debug_assert_eq!(k, 0, "only the first of {n_stem} stem ops skips dx");
                    return;
                }
            }
        }
    }
}

fn materialize(specs: &[(String, Vec<usize>, Init)], mut rng: Option<&mut Rng>) -> ParamSet {
    let mut set = ParamSet::default();
    for (name, shape, init) in specs {
        let mut t = NamedTensor::zeros(name.clone(), shape.clone());
        match *init {
            Init::Zeros => {}
            Init::Ones => t.data.fill(1.0),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f32).sqrt();
                let rng = rng.as_deref_mut().expect("rng for weight init");
                for v in &mut t.data {
                    *v = std * rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
        set.push(t);
    }
    set
}

fn apply_shortcut(shortcut: &Shortcut, x: &Act) -> Act {
    match *shortcut {
        Shortcut::Identity => x.clone(),
        Shortcut::PadStride { stride, out_c } => {
            let (ho, wo) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
            let lo = (out_c - x.c) / 2;
            let mut out = Act::zeros(x.n, out_c, ho, wo);
            for i in 0..x.n {
                for ch in 0..x.c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            out.data[((i * out_c + lo + ch) * ho + y) * wo + xx] =
                                x.data[((i * x.c + ch) * x.h + y * stride) * x.w + xx * stride];
                        }
                    }
                }
            }
            out
        }
    }
}

fn shortcut_backward(shortcut: &Shortcut, dy: &Act, (in_c, h, w): (usize, usize, usize)) -> Act {
    match *shortcut {
        Shortcut::Identity => dy.clone(),
        Shortcut::PadStride { stride, out_c } => {
            let lo = (out_c - in_c) / 2;
            let mut dx = Act::zeros(dy.n, in_c, h, w);
            for i in 0..dy.n {
                for ch in 0..in_c {
                    for y in 0..dy.h {
                        for xx in 0..dy.w {
                            dx.data[((i * in_c + ch) * h + y * stride) * w + xx * stride] =
                                dy.data[((i * out_c + lo + ch) * dy.h + y) * dy.w + xx];
                        }
                    }
                }
            }
            dx
        }
    }
}

fn global_avg_pool(x: &Act) -> Act {
    let hw = x.h * x.w;
    let data = x
        .data
        .chunks(hw)
        .map(|s| s.iter().sum::<f32>() / hw as f32)
        .collect();
    Act::features(x.n, x.c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn resnet20_parameter_count() {
        let bb = Backbone::new(Architecture::resnet20(), ImageShape::new(3, 32, 32)).unwrap();
        assert_eq!(bb.num_parameters(), 269_072);
        assert_eq!(bb.embedding_dim(), 64);
    }

    #[test]
    fn rejects_bad_depth() {
        assert!(Backbone::new(
            Architecture::ResNet { depth: 21, width: 16 },
            ImageShape::new(3, 32, 32)
        )
        .is_err());
    }

    #[test]
    fn resnet_forward_shape() {
        let bb = Backbone::new(
            Architecture::ResNet { depth: 8, width: 4 },
            ImageShape::new(3, 8, 8),
        )
        .unwrap();
        let params = bb.init_params(&mut Rng::seed_from_u64(0));
        let mut buffers = bb.init_buffers();
        let x = Act::new(2, 3, 8, 8, (0..384).map(|v| (v as f32 * 0.1).sin()).collect());
        let (f, tape) = bb.forward(&params, &mut buffers, x, Pass::EVAL);
        assert_eq!((f.n, f.c), (2, 16));
        assert!(tape.is_none());
    }
}
