//! Small network building blocks over any [`Backend`].
//!
//! Inputs are column-batched: an `n×B` matrix holds `B` inputs of width `n`.

use rand::Rng;

use crate::ad::{Backend, Unary};
use crate::params::{BlockId, Bound, Layout, Params};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: BlockId,
    pub b: BlockId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: layout.push(format!("{name}.w"), output, input),
            b: layout.push(format!("{name}.b"), output, 1),
            input,
            output,
        }
    }

    pub fn init(&self, params: &mut Params, gain: f64, rng: &mut impl Rng) {
        params.init_scaled_normal(self.w, gain, rng);
        params.fill(self.b, 0.0);
    }

    pub fn forward<O: Backend>(&self, o: &O, p: &Bound<O::M>, x: &O::M) -> O::M {
        o.add_col(&o.matmul(p.get(self.w), x), p.get(self.b))
    }
}

/// Fully connected stack; the activation is applied between layers only.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Unary,
}

impl Mlp {
    /// `sizes` lists the input width, each hidden width and the output width.
    pub fn new(layout: &mut Layout, name: &str, sizes: &[usize], act: Unary) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(layout, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, act }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().expect("nonempty").output
    }

    /// Hidden layers get unit-gain init; the last layer is scaled by `out_gain`.
    pub fn init(&self, params: &mut Params, out_gain: f64, rng: &mut impl Rng) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            l.init(params, if i + 1 == n { out_gain } else { 1.0 }, rng);
        }
    }

    pub fn forward<O: Backend>(&self, o: &O, p: &Bound<O::M>, x: &O::M) -> O::M {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(o, p, &h);
            if i + 1 < n {
                h = o.unary(&h, self.act);
            }
        }
        h
    }
}

/// Gated recurrent cell.
///
/// `z = σ(W_z x + U_z h + b_z)`, `ρ = σ(W_ρ x + U_ρ h + b_ρ)`,
/// `n = tanh(W_n x + b_n + ρ ⊙ U_n h)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
/// The three gates share stacked weight blocks.
#[derive(Debug, Clone)]
pub struct Gru {
    pub wx: BlockId,
    pub uh: BlockId,
    pub b: BlockId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize) -> Self {
        Gru {
            wx: layout.push(format!("{name}.wx"), 3 * hidden, input),
            uh: layout.push(format!("{name}.uh"), 3 * hidden, hidden),
            b: layout.push(format!("{name}.b"), 3 * hidden, 1),
            input,
            hidden,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.init_scaled_normal(self.wx, 1.0, rng);
        params.init_scaled_normal(self.uh, 1.0, rng);
        params.fill(self.b, 0.0);
    }

    pub fn step<O: Backend>(&self, o: &O, p: &Bound<O::M>, x: &O::M, h: &O::M) -> O::M {
        let hd = self.hidden;
        let gx = o.add_col(&o.matmul(p.get(self.wx), x), p.get(self.b));
        let gh = o.matmul(p.get(self.uh), h);
        let z = o.unary(&o.add(&o.rows(&gx, 0, hd), &o.rows(&gh, 0, hd)), Unary::Sigmoid);
        let rho = o.unary(&o.add(&o.rows(&gx, hd, hd), &o.rows(&gh, hd, hd)), Unary::Sigmoid);
        let n = o.unary(
            &o.add(&o.rows(&gx, 2 * hd, hd), &o.hadamard(&rho, &o.rows(&gh, 2 * hd, hd))),
            Unary::Tanh,
        );
        o.add(&n, &o.hadamard(&z, &o.sub(h, &n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Eager;
    use crate::params::value_and_grad;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut layout = Layout::new();
        let mlp = Mlp::new(&mut layout, "m", &[3, 5, 2], Unary::Tanh);
        let mut p = Params::zeros(layout);
        mlp.init(&mut p, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let y = mlp.forward(&Eager, &p.bind(&Eager), &DMatrix::from_element(3, 4, 0.7));
        assert_eq!(y, DMatrix::zeros(2, 4));
    }

    #[test]
    fn gru_matches_scalar_formula() {
        let mut layout = Layout::new();
        let g = Gru::new(&mut layout, "g", 1, 1);
        let p = Params::from_values(layout, vec![0.5, -0.3, 1.2, 0.4, 0.1, -0.7, 0.2, 0.0, 0.3]).unwrap();
        let (x, h) = (0.8f64, -0.4f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = sig(0.5 * x + 0.4 * h + 0.2);
        let r = sig(-0.3 * x + 0.1 * h + 0.0);
        let n = (1.2 * x + 0.3 + r * (-0.7 * h)).tanh();
        let want = (1.0 - z) * n + z * h;
        let got = g.step(
            &Eager,
            &p.bind(&Eager),
            &DMatrix::from_element(1, 1, x),
            &DMatrix::from_element(1, 1, h),
        );
        assert!((got[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut layout = Layout::new();
        let g = Gru::new(&mut layout, "g", 2, 3);
        let head = Linear::new(&mut layout, "h", 3, 1);
        let mut p = Params::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        g.init(&mut p, &mut rng);
        head.init(&mut p, 1.0, &mut rng);
        p.values.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * i as f64);
        let xs = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 0.5, 0.9, 0.1, -0.2]);
        let eval = |p: &Params| {
            let bd = p.bind(&Eager);
            let mut h = DMatrix::zeros(3, 1);
            for j in 0..3 {
                h = g.step(&Eager, &bd, &xs.columns(j, 1).into_owned(), &h);
            }
            head.forward(&Eager, &bd, &h)[(0, 0)]
        };
        let (v, grad) = value_and_grad(&p, |t, bd| {
            let mut h = t.zeros(3, 1);
            for j in 0..3 {
                let x = t.lift(xs.columns(j, 1).into_owned());
                h = g.step(t, bd, &x, &h);
            }
            Ok(head.forward(t, bd, &h))
        })
        .unwrap();
        assert!((v - eval(&p)).abs() < 1e-14);
        for i in 0..p.values.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.values[i] += 1e-6;
            lo.values[i] -= 1e-6;
            let fd = (eval(&hi) - eval(&lo)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
