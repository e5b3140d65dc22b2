//! Inference networks producing pseudo-observation updates.
//!
//! The local network maps each `y_t` to `α_t = (a_t, A_t)`. A gated recurrent
//! network then runs backwards in time over `[β_{t+1}, α_t]` to give
//! `β_t = (b_t, B_t)`, with `β_{T+1} = 0`. The update applied at step `t` is
//! `λ̃_t = α_t + β_{t+1}`, i.e. `k = a_t + b_{t+1}`, `K = [A_t B_{t+1}]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Backend, Unary};
use crate::error::{Error, Result};
use crate::lowrank::LowRankNatUpdate;
use crate::nn::{Gru, Linear, Mlp};
use crate::params::{Bound, Layout, Params};
use crate::sequence::Sequence;

fn default_local_hidden() -> Vec<usize> {
    vec![64]
}

fn default_gru_hidden() -> usize {
    128
}

fn default_head_gain() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(default = "default_local_hidden")]
    pub local_hidden: Vec<usize>,
    #[serde(default = "default_gru_hidden")]
    pub gru_hidden: usize,
    /// Columns of `A_t`; defaults to `min(L, 16)`.
    #[serde(default)]
    pub rank_local: Option<usize>,
    /// Columns of `B_t`; defaults to `min(L, 16)`.
    #[serde(default)]
    pub rank_backward: Option<usize>,
    /// Observation dimensions never shown to the local network.
    #[serde(default)]
    pub blind_dims: Vec<usize>,
    /// Init scale of the output heads.
    #[serde(default = "default_head_gain")]
    pub head_gain: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            local_hidden: default_local_hidden(),
            gru_hidden: default_gru_hidden(),
            rank_local: None,
            rank_backward: None,
            blind_dims: Vec::new(),
            head_gain: default_head_gain(),
        }
    }
}

/// One natural-parameter increment `(v, V)`; `factor` is `None` at rank 0.
#[derive(Debug, Clone)]
pub struct Increment<M> {
    pub vec: M,
    pub factor: Option<M>,
}

impl<M: Clone> Increment<M> {
    pub fn to_update(&self) -> LowRankNatUpdate<M> {
        LowRankNatUpdate {
            k: Some(self.vec.clone()),
            factor: self.factor.clone(),
        }
    }
}

/// `λ̃ = α + β`; absent parts are dropped.
pub fn combine<O: Backend>(
    o: &O,
    alpha: Option<&Increment<O::M>>,
    beta: Option<&Increment<O::M>>,
) -> Result<LowRankNatUpdate<O::M>> {
    let (a, b) = match (alpha, beta) {
        (None, None) => return Ok(LowRankNatUpdate::empty()),
        (Some(a), None) => return Ok(a.to_update()),
        (None, Some(b)) => return Ok(b.to_update()),
        (Some(a), Some(b)) => (a, b),
    };
    if o.shape(&a.vec) != o.shape(&b.vec) {
        return Err(Error::shape(
            "combine",
            format!("{:?}", o.shape(&a.vec)),
            format!("{:?}", o.shape(&b.vec)),
        ));
    }
    let factor = match (&a.factor, &b.factor) {
        (Some(fa), Some(fb)) => Some(o.hcat(&[fa.clone(), fb.clone()])),
        (fa, fb) => fa.clone().or_else(|| fb.clone()),
    };
    Ok(LowRankNatUpdate {
        k: Some(o.add(&a.vec, &b.vec)),
        factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Hide `y_t` from the local network: `α_t = 0` before the backward pass.
    Local,
    /// Drop the combined update `λ̃_t` after combination.
    Pseudo,
}

/// Per-step masks; `true` means masked.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepMask {
    pub local: Vec<bool>,
    pub pseudo: Vec<bool>,
}

impl StepMask {
    pub fn none(t_len: usize) -> Self {
        StepMask {
            local: vec![false; t_len],
            pseudo: vec![false; t_len],
        }
    }

    pub fn from_pattern(t_len: usize, strategy: MaskStrategy, pattern: &[bool]) -> Self {
        let mut m = StepMask::none(t_len);
        m.apply(strategy, pattern);
        m
    }

    /// Adds `pattern` to the mask for `strategy`.
    pub fn apply(&mut self, strategy: MaskStrategy, pattern: &[bool]) {
        let target = match strategy {
            MaskStrategy::Local => &mut self.local,
            MaskStrategy::Pseudo => &mut self.pseudo,
        };
        for (t, m) in target.iter_mut().zip(pattern) {
            *t |= *m;
        }
    }

    fn pseudo(&self, t: usize) -> bool {
        self.pseudo.get(t).copied().unwrap_or(false)
    }
}

/// Encoded pseudo observations for one sequence (steps are 0-based).
#[derive(Debug, Clone)]
pub struct PseudoObsSeq<M> {
    /// `α_t`, `None` where the step is missing or locally masked.
    pub alphas: Vec<Option<Increment<M>>>,
    /// `β_t` for `t = 0..=T`; the last entry is the zero boundary (`None`).
    pub betas: Vec<Option<Increment<M>>>,
    /// `λ̃_t = α_t + β_{t+1}`, empty where pseudo-masked.
    pub updates: Vec<LowRankNatUpdate<M>>,
    pub mask: StepMask,
}

impl<M: Clone> PseudoObsSeq<M> {
    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// Filtering increment at step `t` (`α_t`, dropped when pseudo-masked).
    pub fn filter_update(&self, t: usize) -> LowRankNatUpdate<M> {
        match (&self.alphas[t], self.mask.pseudo(t)) {
            (Some(a), false) => a.to_update(),
            _ => LowRankNatUpdate::empty(),
        }
    }

    /// Smoothing increment at step `t` (`β_{t+1}`, dropped when pseudo-masked).
    pub fn backward_update(&self, t: usize) -> LowRankNatUpdate<M> {
        match (&self.betas[t + 1], self.mask.pseudo(t)) {
            (Some(b), false) => b.to_update(),
            _ => LowRankNatUpdate::empty(),
        }
    }

    /// Replaces `β` by zero everywhere, which turns smoothing into filtering.
    pub fn without_backward<O: Backend<M = M>>(&self, o: &O) -> Result<Self> {
        let betas = vec![None; self.betas.len()];
        let updates = (0..self.len())
            .map(|t| {
                if self.mask.pseudo(t) {
                    Ok(LowRankNatUpdate::empty())
                } else {
                    combine(o, self.alphas[t].as_ref(), None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(PseudoObsSeq {
            alphas: self.alphas.clone(),
            betas,
            updates,
            mask: self.mask.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Encoders {
    pub spec: EncoderSpec,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub rank_local: usize,
    pub rank_backward: usize,
    local: Mlp,
    gru: Gru,
    head: Linear,
}

impl Encoders {
    pub fn new(layout: &mut Layout, spec: EncoderSpec, latent_dim: usize, obs_dim: usize) -> Result<Self> {
        let l = latent_dim;
        let default_rank = l.min(16);
        let rank_local = spec.rank_local.unwrap_or(default_rank);
        let rank_backward = spec.rank_backward.unwrap_or(default_rank);
        if let Some(d) = spec.blind_dims.iter().find(|d| **d >= obs_dim) {
            return Err(Error::Invalid(format!("blind dimension {d} out of range")));
        }
        if spec.gru_hidden == 0 {
            return Err(Error::Invalid("recurrent width must be positive".into()));
        }
        let alpha_width = l * (1 + rank_local);
        let beta_width = l * (1 + rank_backward);
        let mut sizes = vec![obs_dim];
        sizes.extend(spec.local_hidden.iter().copied());
        sizes.push(alpha_width);
        let local = Mlp::new(layout, "enc_local", &sizes, Unary::Tanh);
        let gru = Gru::new(layout, "enc_back.gru", beta_width + alpha_width, spec.gru_hidden);
        let head = Linear::new(layout, "enc_back.head", spec.gru_hidden, beta_width);
        Ok(Encoders {
            spec,
            latent_dim,
            obs_dim,
            rank_local,
            rank_backward,
            local,
            gru,
            head,
        })
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.local.init(params, self.spec.head_gain, rng);
        self.gru.init(params, rng);
        self.head.init(params, self.spec.head_gain, rng);
    }

    fn split<O: Backend>(&self, o: &O, flat: &O::M, rank: usize) -> Increment<O::M> {
        let l = self.latent_dim;
        let vec = o.rows(flat, 0, l);
        let factor = (rank > 0).then(|| o.reshape(&o.rows(flat, l, l * rank), l, rank));
        Increment { vec, factor }
    }

    /// Local encodings for every step; missing steps give `None` (exactly zero).
    pub fn encode_local<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        seq: &Sequence,
        local_mask: &[bool],
    ) -> Result<Vec<Option<Increment<O::M>>>> {
        if seq.obs_dim() != self.obs_dim {
            return Err(Error::shape("encode_local", self.obs_dim, seq.obs_dim()));
        }
        let mut y = seq.y.clone();
        for d in &self.spec.blind_dims {
            y.row_mut(*d).fill(0.0);
        }
        let blind = |n: usize| self.spec.blind_dims.contains(&n);
        let visible: Vec<bool> = (0..seq.len())
            .map(|t| {
                !local_mask.get(t).copied().unwrap_or(false)
                    && (0..self.obs_dim).any(|n| seq.observed[(n, t)] && !blind(n))
            })
            .collect();
        if !visible.iter().any(|v| *v) {
            return Ok(vec![None; seq.len()]);
        }
        let out = self.local.forward(o, p, &o.lift(y));
        Ok(visible
            .iter()
            .enumerate()
            .map(|(t, v)| v.then(|| self.split(o, &o.cols(&out, t, 1), self.rank_local)))
            .collect())
    }

    /// Backward recursion `u_t = GRU([β_{t+1}, α_t], u_{t+1})`, `β_t = head(u_t)`.
    pub fn encode_backward<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        alphas: &[Option<Increment<O::M>>],
    ) -> Vec<Option<Increment<O::M>>> {
        let l = self.latent_dim;
        let t_len = alphas.len();
        let alpha_width = l * (1 + self.rank_local);
        let beta_width = l * (1 + self.rank_backward);
        let flat = |inc: &Option<Increment<O::M>>, width: usize| match inc {
            Some(i) => {
                let mut parts = vec![i.vec.clone()];
                if let Some(f) = &i.factor {
                    parts.push(o.flatten(f));
                }
                o.vcat(&parts)
            }
            None => o.zeros(width, 1),
        };
        let mut betas: Vec<Option<Increment<O::M>>> = vec![None; t_len + 1];
        let mut u = o.zeros(self.spec.gru_hidden, 1);
        for t in (0..t_len).rev() {
            let input = o.vcat(&[flat(&betas[t + 1], beta_width), flat(&alphas[t], alpha_width)]);
            u = self.gru.step(o, p, &input, &u);
            let out = self.head.forward(o, p, &u);
            betas[t] = Some(self.split(o, &out, self.rank_backward));
        }
        betas
    }

    /// Full encoding with masking: local masks act before the backward
    /// pass, pseudo masks after combination.
    pub fn encode<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        seq: &Sequence,
        mask: &StepMask,
    ) -> Result<PseudoObsSeq<O::M>> {
        let t_len = seq.len();
        let alphas = self.encode_local(o, p, seq, &mask.local)?;
        let betas = self.encode_backward(o, p, &alphas);
        let updates = (0..t_len)
            .map(|t| {
                if mask.pseudo(t) {
                    Ok(LowRankNatUpdate::empty())
                } else {
                    combine(o, alphas[t].as_ref(), betas[t + 1].as_ref())
                }
            })
            .collect::<Result<_>>()?;
        let mut full = mask.clone();
        full.local.resize(t_len, false);
        full.pseudo.resize(t_len, false);
        Ok(PseudoObsSeq {
            alphas,
            betas,
            updates,
            mask: full,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Eager;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(l: usize, n: usize, ra: usize, rb: usize) -> (Encoders, Params) {
        let spec = EncoderSpec {
            local_hidden: vec![6],
            gru_hidden: 5,
            rank_local: Some(ra),
            rank_backward: Some(rb),
            blind_dims: vec![],
            head_gain: 1.0,
        };
        let mut layout = Layout::new();
        let e = Encoders::new(&mut layout, spec, l, n).unwrap();
        let mut p = Params::zeros(layout);
        e.init(&mut p, &mut ChaCha8Rng::seed_from_u64(2));
        (e, p)
    }

    fn seq(n: usize, t: usize) -> Sequence {
        Sequence::fully_observed(DMatrix::from_fn(n, t, |i, j| ((i * 7 + j * 3) as f64).sin()))
    }

    #[test]
    fn missing_step_gives_no_alpha() {
        let (e, p) = setup(3, 4, 2, 1);
        let mut s = seq(4, 5);
        s.delete_step(2);
        let alphas = e.encode_local(&Eager, &p.bind(&Eager), &s, &[]).unwrap();
        assert!(alphas[2].is_none());
        assert!(alphas[1].is_some());
        let a = alphas[0].as_ref().unwrap();
        assert_eq!(a.vec.shape(), (3, 1));
        assert_eq!(a.factor.as_ref().unwrap().shape(), (3, 2));
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let (e, mut p) = setup(2, 3, 1, 1);
        for b in p.layout.clone().blocks() {
            if b.name.starts_with("enc_local.1") || b.name.starts_with("enc_back") {
                let id = p.layout.find(&b.name).unwrap();
                p.fill(id, 0.0);
            }
        }
        let bd = p.bind(&Eager);
        let s = seq(3, 4);
        let enc = e.encode(&Eager, &bd, &s, &StepMask::none(4)).unwrap();
        for u in &enc.updates {
            assert!(u.k.as_ref().unwrap().iter().all(|v| *v == 0.0));
            assert!(u.factor.as_ref().unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn combine_cases() {
        let o = Eager;
        let a = Increment {
            vec: DMatrix::from_element(4, 1, 1.0),
            factor: Some(DMatrix::from_fn(4, 2, |i, j| (i + j) as f64)),
        };
        let b = Increment {
            vec: DMatrix::from_element(4, 1, 0.5),
            factor: Some(DMatrix::from_fn(4, 1, |i, _| i as f64 - 1.0)),
        };
        assert!(combine(&o, None, None).unwrap().is_empty());
        let only = combine(&o, Some(&a), None).unwrap();
        assert_eq!(only.factor.as_ref().unwrap(), a.factor.as_ref().unwrap());
        let both = combine(&o, Some(&a), Some(&b)).unwrap();
        let k = both.factor.unwrap();
        assert_eq!(k.ncols(), 3);
        let fa = a.factor.as_ref().unwrap();
        let fb = b.factor.as_ref().unwrap();
        let want = fa * fa.transpose() + fb * fb.transpose();
        assert!((&k * k.transpose() - want).abs().max() < 1e-14);
        assert_eq!(both.k.unwrap(), DMatrix::from_element(4, 1, 1.5));
    }

    #[test]
    fn backward_pass_is_reverse_causal() {
        let (e, p) = setup(2, 3, 1, 1);
        let bd = p.bind(&Eager);
        let s = seq(3, 6);
        let base = e.encode(&Eager, &bd, &s, &StepMask::none(6)).unwrap();
        let t0 = 3;
        let mut s2 = s.clone();
        s2.y[(1, t0)] += 0.5;
        let pert = e.encode(&Eager, &bd, &s2, &StepMask::none(6)).unwrap();
        for t in 0..=6 {
            let same = match (&base.betas[t], &pert.betas[t]) {
                (Some(a), Some(b)) => a.vec == b.vec && a.factor == b.factor,
                (None, None) => true,
                _ => false,
            };
            assert_eq!(same, t > t0, "step {t}");
        }
    }

    #[test]
    fn local_mask_equals_deletion_bit_exactly() {
        let (e, p) = setup(3, 4, 2, 2);
        let bd = p.bind(&Eager);
        let s = seq(4, 7);
        let pattern = [false, true, false, false, true, true, false];
        let masked = e
            .encode(&Eager, &bd, &s, &StepMask::from_pattern(7, MaskStrategy::Local, &pattern))
            .unwrap();
        let mut deleted = s.clone();
        for (t, m) in pattern.iter().enumerate() {
            if *m {
                deleted.delete_step(t);
            }
        }
        let del = e.encode(&Eager, &bd, &deleted, &StepMask::none(7)).unwrap();
        for t in 0..7 {
            assert_eq!(masked.updates[t].k, del.updates[t].k);
            assert_eq!(masked.updates[t].factor, del.updates[t].factor);
        }
    }

    #[test]
    fn full_pseudo_mask_empties_everything() {
        let (e, p) = setup(2, 3, 1, 1);
        let s = seq(3, 4);
        let enc = e
            .encode(&Eager, &p.bind(&Eager), &s, &StepMask::from_pattern(4, MaskStrategy::Pseudo, &[true; 4]))
            .unwrap();
        assert!(enc.updates.iter().all(|u| u.is_empty()));
        assert!((0..4).all(|t| enc.filter_update(t).is_empty() && enc.backward_update(t).is_empty()));
    }
}
