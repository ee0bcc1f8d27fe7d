use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor2};

use super::config::{Branch, ModelConfig};

/// Indices of a weight matrix and its bias row in the flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

/// Three position-wise affine maps with GELU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    pub stages: [Affine; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub out: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchLayer {
    pub attn: AttentionParams,
    pub norm1: Norm,
    pub ff1: Affine,
    pub ff2: Affine,
    pub norm2: Norm,
}

/// Per-layer parameters, one entry per branch (`None` when disabled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub branches: [Option<BranchLayer>; 3],
}

/// Where every named parameter lives in [`ModelState::params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoders: [Option<Encoder>; 3],
    pub layers: Vec<LayerLayout>,
    pub heads: [Option<Affine>; 3],
}

enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn affine(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Affine {
        Affine {
            weight: self.push(
                format!("{prefix}.weight"),
                (fan_in, fan_out),
                Init::Uniform { fan_in },
            ),
            bias: self.push(format!("{prefix}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn matrix(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.push(name, (fan_in, fan_out), Init::Uniform { fan_in })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.push(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.push(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let d = cfg.d;
    let f = cfg.ff_width();
    let mut encoders = [None; 3];
    for br in Branch::ALL.into_iter().filter(|&br| cfg.branch_enabled(br)) {
        let (_, input) = cfg.branch_dims(br);
        let tag = br.tag();
        encoders[br.index()] = Some(Encoder {
            stages: [
                b.affine(&format!("encoder.{tag}.0"), input, d),
                b.affine(&format!("encoder.{tag}.1"), d, d),
                b.affine(&format!("encoder.{tag}.2"), d, d),
            ],
        });
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let mut branches = [None; 3];
        for br in Branch::ALL.into_iter().filter(|&br| cfg.branch_enabled(br)) {
            let p = format!("layer{k}.{}", br.tag());
            branches[br.index()] = Some(BranchLayer {
                attn: AttentionParams {
                    q: b.matrix(format!("{p}.w_q"), d, d),
                    k: b.matrix(format!("{p}.w_k"), d, d),
                    v: b.matrix(format!("{p}.w_v"), d, d),
                    out: b.affine(&format!("{p}.out"), d, d),
                },
                norm1: b.norm(&format!("{p}.norm1"), d),
                ff1: b.affine(&format!("{p}.ff1"), d, f),
                ff2: b.affine(&format!("{p}.ff2"), f, d),
                norm2: b.norm(&format!("{p}.norm2"), d),
            });
        }
        layers.push(LayerLayout { branches });
    }
    let mut heads = [None; 3];
    for br in Branch::ALL.into_iter().filter(|&br| cfg.branch_enabled(br)) {
        let (_, out) = cfg.branch_dims(br);
        heads[br.index()] = Some(b.affine(&format!("head.{}", br.tag()), d, out));
    }
    (
        Layout {
            encoders,
            layers,
            heads,
        },
        b,
    )
}

/// All learnable tensors of one model, in a fixed order given by the
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub names: Vec<String>,
    pub params: Vec<Tensor2<T>>,
}

impl<T: Real> ModelState<T> {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases
    /// zero, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(&(r, c), init)| {
                let t = match init {
                    Init::Zeros => Tensor2::zeros(r, c),
                    Init::Ones => Tensor2::filled(r, c, T::one()),
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (*fan_in as f64).sqrt();
                        let data = (0..r * c)
                            .map(|_| T::of(rng.gen_range(-bound..bound)))
                            .collect();
                        Tensor2::from_vec(r, c, data).expect("shape")
                    }
                };
                t.with_grad()
            })
            .collect();
        Ok(ModelState {
            config,
            layout,
            names: builder.names,
            params,
        })
    }

    /// Rebuilds a state from named tensors (checkpoint loading).
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor2<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = plan(&config);
        if named.len() != builder.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                builder.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named
            .into_iter()
            .zip(builder.names.iter().zip(&builder.shapes))
        {
            if &name != want || t.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            params.push(t.with_grad());
        }
        Ok(ModelState {
            config,
            layout,
            names: builder.names,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor2::len).sum()
    }

    pub fn param(&self, idx: usize) -> &Tensor2<T> {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Tensor2<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor2::clear_grad);
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}
