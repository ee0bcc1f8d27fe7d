use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tape, Tensor2, Var};
use crate::statemat::{StateMatrixPair, TimeWindow};

use super::config::{Branch, ModelConfig};
use super::params::{Affine, AttentionParams, BranchLayer, LayerLayout, ModelState};

/// Tape handles for every parameter of a [`ModelState`], in order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Records every parameter as a leaf. With `track` the leaves receive
    /// gradients on backward.
    pub fn bind<T: Real>(tape: &mut Tape<T>, state: &ModelState<T>, track: bool) -> Self {
        let vars = state
            .params
            .iter()
            .map(|p| {
                let mut t = p.detached();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Moves the gradients computed on `tape` into the parameters of `state`,
    /// adding to whatever is already there.
    pub fn harvest<T: Real>(&self, tape: &mut Tape<T>, state: &mut ModelState<T>) {
        for (i, &v) in self.vars.iter().enumerate() {
            let g = tape
                .take_grad(v)
                .unwrap_or_else(|| vec![T::zero(); state.params[i].len()]);
            state.params[i].accumulate_grad(&g);
        }
    }
}

/// Association maps of one layer as tape values.
#[derive(Debug, Clone, Copy)]
pub struct LayerMapVars {
    pub seri: Var,
    pub temp: Option<Var>,
    pub space: Option<Var>,
}

/// Reconstructions and maps of a forward pass as tape values.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub x_hat: Var,
    pub t_hat: Option<Var>,
    pub s_hat: Option<Var>,
    pub maps: Vec<LayerMapVars>,
}

/// Row-stochastic association maps of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps<T: Real> {
    pub seri: Tensor2<T>,
    pub temp: Option<Tensor2<T>>,
    pub space: Option<Tensor2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMaps<T: Real> {
    pub layers: Vec<LayerMaps<T>>,
}

/// Values produced by [`ModelState::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Real> {
    pub x_hat: Tensor2<T>,
    pub t_hat: Option<Tensor2<T>>,
    pub s_hat: Option<Tensor2<T>>,
    pub maps: AssociationMaps<T>,
}

pub type Streams = [Option<Var>; 3];

pub fn affine<T: Real>(tape: &mut Tape<T>, b: &Bound, p: Affine, input: Var) -> Result<Var> {
    let y = tape.matmul(input, b.var(p.weight))?;
    tape.add_row(y, b.var(p.bias))
}

/// Maps each enabled branch's rows into `d` hidden channels.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    b: &Bound,
    inputs: Streams,
) -> Result<Streams> {
    let cfg = &state.config;
    let mut out = [None; 3];
    for br in Branch::ALL {
        let (Some(enc), Some(input)) = (state.layout.encoders[br.index()], inputs[br.index()])
        else {
            continue;
        };
        let want = cfg.branch_dims(br);
        if tape.shape(input) != want {
            return Err(Error::dim("embed", tape.shape(input), want));
        }
        let mut h = affine(tape, b, enc.stages[0], input)?;
        h = tape.gelu(h);
        h = affine(tape, b, enc.stages[1], h)?;
        h = tape.gelu(h);
        h = affine(tape, b, enc.stages[2], h)?;
        out[br.index()] = Some(h);
    }
    Ok(out)
}

/// Multi-head attention for one branch. Returns the projected output and
/// the head-averaged association map.
pub fn branch_attention<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    p: &AttentionParams,
    h: Var,
) -> Result<(Var, Var)> {
    let q = tape.matmul(h, b.var(p.q))?;
    let k = tape.matmul(h, b.var(p.k))?;
    let v = tape.matmul(h, b.var(p.v))?;
    let qs = tape.split_cols(q, cfg.heads)?;
    let ks = tape.split_cols(k, cfg.heads)?;
    let vs = tape.split_cols(v, cfg.heads)?;
    let scale = T::of(1.0 / (cfg.head_dim() as f64).sqrt());
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut map_sum: Option<Var> = None;
    for l in 0..cfg.heads {
        let scores = tape.matmul_t(qs[l], false, ks[l], true)?;
        let scores = tape.scale(scores, scale);
        let map = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(map, vs[l])?);
        map_sum = Some(match map_sum {
            None => map,
            Some(s) => tape.add(s, map)?,
        });
    }
    let cat = tape.concat_cols(&outs)?;
    let out = affine(tape, b, p.out, cat)?;
    let map_sum = map_sum.expect("heads > 0");
    let map = if cfg.heads == 1 {
        map_sum
    } else {
        tape.scale(map_sum, T::of(1.0 / cfg.heads as f64))
    };
    Ok((out, map))
}

/// Three-branch attention of one layer: returns the attention outputs and
/// the per-branch maps.
pub fn mad_attention<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layer: &LayerLayout,
    streams: Streams,
) -> Result<(Streams, Streams)> {
    let mut outs = [None; 3];
    let mut maps = [None; 3];
    for br in Branch::ALL {
        let (Some(p), Some(h)) = (layer.branches[br.index()], streams[br.index()]) else {
            continue;
        };
        let (o, m) = branch_attention(tape, cfg, b, &p.attn, h)?;
        outs[br.index()] = Some(o);
        maps[br.index()] = Some(m);
    }
    Ok((outs, maps))
}

fn branch_block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    p: &BranchLayer,
    input: Var,
    attn: Var,
) -> Result<Var> {
    let eps = T::of(cfg.eps_ln);
    let r = tape.add(attn, input)?;
    let h = tape.layer_norm(r, b.var(p.norm1.gain), b.var(p.norm1.bias), eps)?;
    let f = affine(tape, b, p.ff1, h)?;
    let f = tape.gelu(f);
    let f = affine(tape, b, p.ff2, f)?;
    let r2 = tape.add(f, h)?;
    tape.layer_norm(r2, b.var(p.norm2.gain), b.var(p.norm2.bias), eps)
}

/// One post-norm layer: attention, residual, norm, feed-forward, residual,
/// norm.
pub fn layer_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layer: &LayerLayout,
    streams: Streams,
) -> Result<(Streams, LayerMapVars)> {
    let (attn, maps) = mad_attention(tape, cfg, b, layer, streams)?;
    let mut out = [None; 3];
    for br in Branch::ALL {
        let i = br.index();
        if let (Some(p), Some(input), Some(a)) = (layer.branches[i], streams[i], attn[i]) {
            out[i] = Some(branch_block(tape, cfg, b, &p, input, a)?);
        }
    }
    let seri = maps[0].ok_or_else(|| Error::Contract("series branch is mandatory".into()))?;
    Ok((
        out,
        LayerMapVars {
            seri,
            temp: maps[1],
            space: maps[2],
        },
    ))
}

/// Full forward pass on a tape. `tm`/`sm` are ignored for disabled branches.
pub fn forward_tape<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    b: &Bound,
    x: Var,
    tm: Option<Var>,
    sm: Option<Var>,
) -> Result<ForwardVars> {
    let cfg = &state.config;
    let inputs = [
        Some(x),
        tm.filter(|_| cfg.temporal),
        sm.filter(|_| cfg.spatial),
    ];
    for br in [Branch::Temporal, Branch::Spatial] {
        if cfg.branch_enabled(br) && inputs[br.index()].is_none() {
            return Err(Error::Contract(format!(
                "branch {} is enabled but has no input",
                br.tag()
            )));
        }
    }
    let mut streams = embed(tape, state, b, inputs)?;
    let mut maps = Vec::with_capacity(cfg.layers);
    for layer in &state.layout.layers {
        let (next, m) = layer_forward(tape, cfg, b, layer, streams)?;
        streams = next;
        maps.push(m);
    }
    let mut heads = [None; 3];
    for br in Branch::ALL {
        if let (Some(h), Some(s)) = (state.layout.heads[br.index()], streams[br.index()]) {
            heads[br.index()] = Some(affine(tape, b, h, s)?);
        }
    }
    Ok(ForwardVars {
        x_hat: heads[0].expect("series head"),
        t_hat: heads[1],
        s_hat: heads[2],
        maps,
    })
}

impl ForwardVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> ForwardOutput<T> {
        let get = |v: Var| tape.value(v).detached();
        ForwardOutput {
            x_hat: get(self.x_hat),
            t_hat: self.t_hat.map(get),
            s_hat: self.s_hat.map(get),
            maps: AssociationMaps {
                layers: self
                    .maps
                    .iter()
                    .map(|m| LayerMaps {
                        seri: get(m.seri),
                        temp: m.temp.map(get),
                        space: m.space.map(get),
                    })
                    .collect(),
            },
        }
    }
}

impl<T: Real> ModelState<T> {
    /// Inference forward pass without gradient tracking.
    pub fn forward(&self, win: &TimeWindow<T>, pair: &StateMatrixPair<T>) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        if win.values().shape() != (cfg.w, cfg.n) {
            return Err(Error::dim("forward", win.values().shape(), (cfg.w, cfg.n)));
        }
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, self, false);
        let x = tape.constant(win.values().detached());
        let tm = tape.constant(pair.temporal.detached());
        let sm = tape.constant(pair.spatial.detached());
        let vars = forward_tape(&mut tape, self, &b, x, Some(tm), Some(sm))?;
        Ok(vars.values(&tape))
    }
}
