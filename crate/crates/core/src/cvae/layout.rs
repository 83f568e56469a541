use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::intention::INTENTION_DIM;
use crate::kinematics::{DELTA_DIM, POSE_DIM};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpBlock {
    pub linear: LinearIds,
    pub norm: NormIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub input: LinearIds,
    pub blocks: Vec<MlpBlock>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub norm1: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
    pub norm2: NormIds,
}

/// Parameter ids of one transformer network (encoder or decoder side).
#[derive(Debug, Clone)]
pub(crate) struct NetLayout {
    pub pose: Branch,
    pub second: Branch,
    pub token0: LinearIds,
    pub pelvis: LinearIds,
    pub orient: LinearIds,
    pub control: Vec<LinearIds>,
    pub layers: Vec<EncoderLayer>,
    pub head: LinearIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub encoder: NetLayout,
    pub decoder: NetLayout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize, Init)>,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols, init));
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.tensor(format!("{name}.w"), fan_in, fan_out, Init::Xavier),
            b: self.tensor(format!("{name}.b"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIds {
        NormIds {
            gain: self.tensor(format!("{name}.gain"), 1, dim, Init::Ones),
            bias: self.tensor(format!("{name}.bias"), 1, dim, Init::Zeros),
        }
    }

    fn branch(&mut self, name: &str, fan_in: usize, cfg: &ModelConfig) -> Branch {
        let d = cfg.model_dim;
        let input = self.linear(&format!("{name}.in"), fan_in, d);
        let blocks = (0..cfg.input_mlp_layers)
            .map(|l| MlpBlock {
                linear: self.linear(&format!("{name}.mlp{l}"), d, d),
                norm: self.norm(&format!("{name}.mlp{l}.norm"), d),
            })
            .collect();
        Branch { input, blocks }
    }

    fn net(&mut self, prefix: &str, second_in: usize, out: usize, cfg: &ModelConfig) -> NetLayout {
        let d = cfg.model_dim;
        let pose = self.branch(&format!("{prefix}.pose"), POSE_DIM, cfg);
        let second = self.branch(&format!("{prefix}.second"), second_in, cfg);
        let token0 = self.linear(&format!("{prefix}.token0"), 2 * d, d);
        let pelvis = self.linear(&format!("{prefix}.intent.pelvis"), 2, d);
        let orient = self.linear(&format!("{prefix}.intent.orient"), 2, d);
        let control = (0..cfg.control_set_size)
            .map(|j| self.linear(&format!("{prefix}.intent.control{j}"), 3, d))
            .collect();
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("{prefix}.layer{l}");
                EncoderLayer {
                    q: self.linear(&format!("{n}.q"), d, d),
                    k: self.linear(&format!("{n}.k"), d, d),
                    v: self.linear(&format!("{n}.v"), d, d),
                    o: self.linear(&format!("{n}.o"), d, d),
                    norm1: self.norm(&format!("{n}.norm1"), d),
                    ff1: self.linear(&format!("{n}.ff1"), d, cfg.ffn_dim),
                    ff2: self.linear(&format!("{n}.ff2"), cfg.ffn_dim, d),
                    norm2: self.norm(&format!("{n}.norm2"), d),
                }
            })
            .collect();
        let head = self.linear(&format!("{prefix}.head"), d, out);
        NetLayout {
            pose,
            second,
            token0,
            pelvis,
            orient,
            control,
            layers,
            head,
        }
    }
}

/// Parameter names and shapes for a config, in a fixed order.
pub(crate) fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<String>, Vec<(usize, usize, Init)>) {
    debug_assert_eq!(INTENTION_DIM, 2 + 2 + 3 * cfg.control_set_size);
    let mut b = Builder::default();
    let encoder = b.net("enc", DELTA_DIM, 2 * cfg.latent_dim, cfg);
    let decoder = b.net("dec", cfg.latent_dim, DELTA_DIM, cfg);
    (Layout { encoder, decoder }, b.names, b.shapes)
}

/// Xavier-uniform weights, zero biases, unit norm gains.
pub(crate) fn init_tensors(shapes: &[(usize, usize, Init)], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|&(r, c, init)| match init {
            Init::Xavier => {
                let limit = (6.0 / (r + c) as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-limit..limit)).collect();
                Tensor::from_vec(r, c, data)
            }
            Init::Zeros => Tensor::zeros(r, c),
            Init::Ones => Tensor::filled(r, c, 1.0),
        })
        .collect()
}
