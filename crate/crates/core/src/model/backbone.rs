//! Generic encoder (one shared and two task-specific LSTMs) and the FiLM
//! adaptor that rewrites its recurrent weights per cascade.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::module::Linear;
use crate::tensor::Tensor;

use super::user_rep::UserTables;

/// Number of gate blocks in an LSTM weight matrix (i, f, g, o).
pub const GATES: usize = 4;

crate::module! {
    /// `w_ih: in × 4h`, `w_hh: h × 4h`, `bias: 1 × 4h`.
    pub struct LstmParams => LstmVars {
        pub w_ih: Tensor,
        pub w_hh: Tensor,
        pub bias: Tensor,
    }
}

crate::module! {
    pub struct Encoder => EncoderVars {
        /// Reads `[x_S ‖ x_D]`.
        pub shared: LstmParams,
        /// Reads `x_S`.
        pub micro: LstmParams,
        /// Reads `x_D`.
        pub macroscopic: LstmParams,
    }
}

crate::module! {
    /// `4d → 2d` (ReLU) `→ 6d²`, output ordered as
    /// `[γ_s, β_s, γ_m, β_m, γ_p, β_p]`.
    pub struct Adaptor => AdaptorVars {
        pub hidden: Linear,
        pub out: Linear,
    }
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        Self {
            w_ih: Tensor::uniform(&[input, GATES * hidden], bound, rng),
            w_hh: Tensor::uniform(&[hidden, GATES * hidden], bound, rng),
            bias: Tensor::zeros(&[1, GATES * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

impl LstmVars {
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        g.lstm(input, self.w_ih, self.w_hh, self.bias)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            shared: LstmParams::new(2 * dim, dim, rng),
            micro: LstmParams::new(dim, dim, rng),
            macroscopic: LstmParams::new(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.shared.hidden()
    }
}

impl Adaptor {
    /// Random hidden layer, zero output layer: the initial adaptation is
    /// the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(4 * dim, 2 * dim, rng),
            out: Linear::zeros(2 * dim, 6 * dim * dim),
        }
    }
}

/// Hidden sequences of one pass, each `T × d`.
#[derive(Clone, Copy, Debug)]
pub struct CascadeRepr {
    pub h_s: Var,
    pub h_m: Var,
    pub h_p: Var,
}

impl CascadeRepr {
    /// `[h_s ‖ h_m]`, `T × 2d`.
    pub fn h_sm(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.h_s, self.h_m], 1)
    }

    /// `[h_s ‖ h_p]`, `T × 2d`.
    pub fn h_sp(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.h_s, self.h_p], 1)
    }

    /// `e = [mean_t h_sm ‖ mean_t h_sp]`, `1 × 4d`.
    pub fn summary(&self, g: &mut Graph) -> Result<Var> {
        let sm = self.h_sm(g)?;
        let sp = self.h_sp(g)?;
        let a = g.mean_rows(sm)?;
        let b = g.mean_rows(sp)?;
        g.concat(&[a, b], 1)
    }
}

/// One `(γ, β)` pair, both `d × d`.
#[derive(Clone, Copy, Debug)]
pub struct FilmPair {
    pub gamma: Var,
    pub beta: Var,
}

/// Adaptation parameters for the shared, micro and macro LSTMs.
#[derive(Clone, Copy, Debug)]
pub struct Film {
    pub shared: FilmPair,
    pub micro: FilmPair,
    pub macroscopic: FilmPair,
}

impl Film {
    pub fn identity(g: &mut Graph, dim: usize) -> Self {
        let pair = FilmPair {
            gamma: g.constant(Tensor::full(&[dim, dim], 1.0)),
            beta: g.constant(Tensor::zeros(&[dim, dim])),
        };
        Self {
            shared: pair,
            micro: pair,
            macroscopic: pair,
        }
    }
}

impl AdaptorVars {
    /// `e: 1 × 4d` to three pairs with `γ = 1 + 0.5·tanh(raw)`, `β = raw`.
    pub fn adapt(&self, g: &mut Graph, e: Var) -> Result<Film> {
        let h = self.hidden.forward(g, e)?;
        let h = g.relu(h)?;
        let raw = self.out.forward(g, h)?;
        let width = g.shape(raw)[1];
        let dim = libm::sqrt(width as f64 / 6.0) as usize;
        if 6 * dim * dim != width {
            return Err(Error::shape("adapt", &[1, width], &[1, 6 * dim * dim]));
        }
        let block = |g: &mut Graph, k: usize| -> Result<Var> {
            let s = g.slice(raw, 1, k * dim * dim, (k + 1) * dim * dim)?;
            g.reshape(s, &[dim, dim])
        };
        let mut pairs = Vec::with_capacity(3);
        for k in 0..3 {
            let raw_gamma = block(g, 2 * k)?;
            let t = g.tanh(raw_gamma)?;
            let t = g.scale(t, 0.5)?;
            let gamma = g.offset(t, 1.0)?;
            let beta = block(g, 2 * k + 1)?;
            pairs.push(FilmPair { gamma, beta });
        }
        Ok(Film {
            shared: pairs[0],
            micro: pairs[1],
            macroscopic: pairs[2],
        })
    }
}

/// `Ŵ_k = W_k ⊙ γ + β` for each of the four `d × d` recurrent gate blocks.
pub fn film_recurrent(g: &mut Graph, w_hh: Var, pair: FilmPair) -> Result<Var> {
    let d = g.shape(w_hh)[0];
    let mut blocks = Vec::with_capacity(GATES);
    for k in 0..GATES {
        let w = g.slice(w_hh, 1, k * d, (k + 1) * d)?;
        let scaled = g.mul(w, pair.gamma)?;
        blocks.push(g.add(scaled, pair.beta)?);
    }
    g.concat(&blocks, 1)
}

/// Plain-tensor counterpart of [`film_recurrent`] for a single block.
pub fn film_block(w: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if w.shape() != gamma.shape() || w.shape() != beta.shape() {
        return Err(Error::shape("film_block", w.shape(), gamma.shape()));
    }
    let data = w
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((w, g), b)| w * g + b)
        .collect();
    Tensor::new(w.shape(), data)
}

impl EncoderVars {
    /// F̂: same input weights and biases, FiLM-modulated recurrent weights.
    pub fn customize(&self, g: &mut Graph, film: &Film) -> Result<EncoderVars> {
        let modulate = |g: &mut Graph, l: &LstmVars, p: FilmPair| -> Result<LstmVars> {
            Ok(LstmVars {
                w_ih: l.w_ih,
                w_hh: film_recurrent(g, l.w_hh, p)?,
                bias: l.bias,
            })
        };
        Ok(EncoderVars {
            shared: modulate(g, &self.shared, film.shared)?,
            micro: modulate(g, &self.micro, film.micro)?,
            macroscopic: modulate(g, &self.macroscopic, film.macroscopic)?,
        })
    }

    /// Runs the three LSTMs over the users of `seq` (indices into `tables`).
    pub fn encode(&self, g: &mut Graph, tables: &UserTables, seq: &[usize]) -> Result<CascadeRepr> {
        if seq.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let xs = g.gather_rows(tables.social, seq)?;
        let xd = g.gather_rows(tables.diffusion, seq)?;
        let both = g.concat(&[xs, xd], 1)?;
        Ok(CascadeRepr {
            h_s: self.shared.forward(g, both)?,
            h_m: self.micro.forward(g, xs)?,
            h_p: self.macroscopic.forward(g, xd)?,
        })
    }

    /// Two-pass forward: encode, adapt, customize, re-encode.
    pub fn encode_adapted(
        &self,
        g: &mut Graph,
        adaptor: &AdaptorVars,
        tables: &UserTables,
        seq: &[usize],
    ) -> Result<CascadeRepr> {
        let first = self.encode(g, tables, seq)?;
        let e = first.summary(g)?;
        let film = adaptor.adapt(g, e)?;
        let custom = self.customize(g, &film)?;
        custom.encode(g, tables, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;
    use crate::rng;

    fn tables(g: &mut Graph, n: usize, d: usize, seed: u64) -> UserTables {
        let mut r = rng::seeded(seed);
        UserTables {
            social: g.constant(Tensor::randn(&[n, d], 0.5, &mut r)),
            diffusion: g.constant(Tensor::randn(&[n, d], 0.5, &mut r)),
        }
    }

    #[test]
    fn film_hand_arithmetic() {
        let w = Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::full(&[2, 2], 2.0);
        let beta = Tensor::identity(2);
        let out = film_block(&w, &gamma, &beta).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn film_graph_matches_block_form() {
        let mut r = rng::seeded(5);
        let w = Tensor::randn(&[2, 8], 1.0, &mut r);
        let gamma = Tensor::randn(&[2, 2], 1.0, &mut r);
        let beta = Tensor::randn(&[2, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let pair = FilmPair {
            gamma: g.constant(gamma.clone()),
            beta: g.constant(beta.clone()),
        };
        let out = film_recurrent(&mut g, wv, pair).unwrap();
        let out = g.value(out);
        for k in 0..4 {
            let block: Vec<f64> = (0..2).flat_map(|i| (0..2).map(move |j| (i, 2 * k + j))).map(|(i, j)| w.get2(i, j)).collect();
            let expect = film_block(&Tensor::matrix(2, 2, &block).unwrap(), &gamma, &beta).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(out.get2(i, 2 * k + j), expect.get2(i, j));
                }
            }
        }
    }

    #[test]
    fn zero_gamma_sets_every_gate_to_beta() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(&[3, 12], 7.0));
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng::seeded(0));
        let pair = FilmPair {
            gamma: g.constant(Tensor::zeros(&[3, 3])),
            beta: g.constant(b.clone()),
        };
        let out = film_recurrent(&mut g, w, pair).unwrap();
        for k in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(g.value(out).get2(i, 3 * k + j), b.get2(i, j));
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_identity_film() {
        let d = 3;
        let adaptor = Adaptor::new(d, &mut rng::seeded(1));
        let mut g = Graph::new();
        let av = adaptor.bind(&mut g, false);
        let e = g.constant(Tensor::randn(&[1, 4 * d], 1.0, &mut rng::seeded(2)));
        let film = av.adapt(&mut g, e).unwrap();
        for p in [film.shared, film.micro, film.macroscopic] {
            assert_eq!(g.value(p.gamma), &Tensor::full(&[d, d], 1.0));
            assert_eq!(g.value(p.beta), &Tensor::zeros(&[d, d]));
        }
    }

    #[test]
    fn crafted_adaptor_hand_values() {
        // d = 2: hidden = relu(e·W1), out = h·W2 with W2 picking h[0] into
        // every γ raw entry and h[1] into every β raw entry.
        let d = 2;
        let mut hidden = Linear::zeros(8, 4);
        hidden.weight.data_mut()[0] = 1.0; // h0 = relu(e0)
        hidden.weight.data_mut()[4 + 1] = 1.0; // h1 = relu(e1)
        let mut out = Linear::zeros(4, 24);
        for k in 0..6 {
            let src = if k % 2 == 0 { 0 } else { 1 };
            for j in 0..4 {
                out.weight.data_mut()[src * 24 + k * 4 + j] = 1.0;
            }
        }
        let adaptor = Adaptor { hidden, out };
        let mut g = Graph::new();
        let av = adaptor.bind(&mut g, false);
        let e = g.constant(Tensor::matrix(1, 8, &[0.4, -0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let film = av.adapt(&mut g, e).unwrap();
        let gamma = 1.0 + 0.5 * libm::tanh(0.4);
        for p in [film.shared, film.micro, film.macroscopic] {
            assert!(g.value(p.gamma).data().iter().all(|&x| (x - gamma).abs() < 1e-15));
            assert_eq!(g.value(p.beta), &Tensor::zeros(&[d, d]));
        }
    }

    /// Step-by-step LSTM written independently of the fused op.
    fn naive_lstm(x: &Tensor, p: &LstmParams) -> Vec<Vec<f64>> {
        let h_dim = p.hidden();
        let sig = |z: f64| 1.0 / (1.0 + libm::exp(-z));
        let (mut h, mut c) = (vec![0.0; h_dim], vec![0.0; h_dim]);
        let mut out = Vec::new();
        for t in 0..x.shape()[0] {
            let pre = |gate: usize, j: usize, h: &[f64]| {
                let col = gate * h_dim + j;
                let mut z = p.bias.get2(0, col);
                for (k, &xk) in x.row(t).iter().enumerate() {
                    z += xk * p.w_ih.get2(k, col);
                }
                for (k, &hk) in h.iter().enumerate() {
                    z += hk * p.w_hh.get2(k, col);
                }
                z
            };
            let mut nh = vec![0.0; h_dim];
            for j in 0..h_dim {
                let i = sig(pre(0, j, &h));
                let f = sig(pre(1, j, &h));
                let gg = libm::tanh(pre(2, j, &h));
                let o = sig(pre(3, j, &h));
                c[j] = f * c[j] + i * gg;
                nh[j] = o * libm::tanh(c[j]);
            }
            h = nh;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn fused_lstm_matches_naive_oracle() {
        let d = 4;
        let mut r = rng::seeded(1);
        let encoder = Encoder::new(d, &mut r);
        let mut p = encoder.micro.clone();
        p.bias = Tensor::randn(&[1, 4 * d], 0.3, &mut r);
        let x = Tensor::randn(&[3, d], 1.0, &mut r);
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = pv.forward(&mut g, xv).unwrap();
        let oracle = naive_lstm(&x, &p);
        for (t, row) in oracle.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((g.value(h).get2(t, j) - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_weights_zero_states() {
        let d = 3;
        let zero = |i: usize| LstmParams {
            w_ih: Tensor::zeros(&[i, 4 * d]),
            w_hh: Tensor::zeros(&[d, 4 * d]),
            bias: Tensor::zeros(&[1, 4 * d]),
        };
        let enc = Encoder {
            shared: zero(2 * d),
            micro: zero(d),
            macroscopic: zero(d),
        };
        let mut g = Graph::new();
        let t = tables(&mut g, 5, d, 0);
        let ev = enc.bind(&mut g, false);
        let repr = ev.encode(&mut g, &t, &[0, 3, 1]).unwrap();
        for v in [repr.h_s, repr.h_m, repr.h_p] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_step_shapes_and_empty_error() {
        let d = 4;
        let enc = Encoder::new(d, &mut rng::seeded(0));
        let mut g = Graph::new();
        let t = tables(&mut g, 6, d, 1);
        let ev = enc.bind(&mut g, false);
        let repr = ev.encode(&mut g, &t, &[2]).unwrap();
        let sm = repr.h_sm(&mut g).unwrap();
        assert_eq!(g.shape(sm), &[1, 2 * d]);
        let e = repr.summary(&mut g).unwrap();
        assert_eq!(g.shape(e), &[1, 4 * d]);
        assert!(ev.encode(&mut g, &t, &[]).is_err());
    }

    #[test]
    fn identity_adaptor_reproduces_plain_encoding() {
        let d = 4;
        let mut r = rng::seeded(9);
        let enc = Encoder::new(d, &mut r);
        let adaptor = Adaptor::new(d, &mut r);
        let mut g = Graph::new();
        let t = tables(&mut g, 7, d, 2);
        let ev = enc.bind(&mut g, false);
        let av = adaptor.bind(&mut g, false);
        let seq = [4, 1, 6, 0];
        let plain = ev.encode(&mut g, &t, &seq).unwrap();
        let adapted = ev.encode_adapted(&mut g, &av, &t, &seq).unwrap();
        for (a, b) in [(plain.h_s, adapted.h_s), (plain.h_m, adapted.h_m), (plain.h_p, adapted.h_p)] {
            assert_eq!(g.value(a), g.value(b));
        }
    }

    #[test]
    fn different_film_changes_output() {
        let d = 3;
        let mut r = rng::seeded(4);
        let enc = Encoder::new(d, &mut r);
        let mut adaptor = Adaptor::new(d, &mut r);
        adaptor.out = Linear::new(2 * d, 6 * d * d, &mut r);
        let mut g = Graph::new();
        let t = tables(&mut g, 5, d, 3);
        let ev = enc.bind(&mut g, false);
        let av = adaptor.bind(&mut g, false);
        let a = ev.encode_adapted(&mut g, &av, &t, &[0, 1, 2, 3]).unwrap();
        let b = ev.encode_adapted(&mut g, &av, &t, &[0, 1, 4, 3]).unwrap();
        // Positions 0 and 1 share inputs; step 0 never touches the recurrent
        // weights, so a difference at step 1 comes from Π.
        let ra = g.slice(a.h_s, 0, 1, 2).unwrap();
        let rb = g.slice(b.h_s, 0, 1, 2).unwrap();
        assert_ne!(g.value(ra), g.value(rb));
    }
}
