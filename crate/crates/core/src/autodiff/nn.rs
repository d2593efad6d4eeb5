//! Layers built from tape primitives: affine maps, one-hidden-layer MLPs and a GRU cell.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore};
use super::AutodiffError;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(Linear {
            weight: store.add_weight(format!("{name}.weight"), in_dim, out_dim, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), vec![out_dim])?,
            in_dim,
            out_dim,
        })
    }

    /// `x[n,in] -> x W + b`
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// `Linear -> tanh -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), hidden_dim, out_dim, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, AutodiffError> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mlp input",
                lhs: (1, self.in_dim()),
                rhs: tape.shape(x),
            });
        }
        let h = self.hidden.forward(tape, x)?;
        let h = tape.tanh(h);
        self.output.forward(tape, h)
    }
}

/// Gated recurrent unit with reset gate `r`, update gate `z` and candidate `n`:
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ∘ (h W_hn + b_hn))
/// h' = (1 - z) ∘ n + z ∘ h
/// ```
///
/// The three gates are packed column-wise into one input and one hidden matrix.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub input_bias: ParamId,
    pub hidden_bias: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(GruCell {
            input_weight: store.add_weight(format!("{name}.w_input"), in_dim, 3 * hidden_dim, rng)?,
            hidden_weight: store.add_weight(format!("{name}.w_hidden"), hidden_dim, 3 * hidden_dim, rng)?,
            input_bias: store.add_zeros(format!("{name}.b_input"), vec![3 * hidden_dim])?,
            hidden_bias: store.add_zeros(format!("{name}.b_hidden"), vec![3 * hidden_dim])?,
            in_dim,
            hidden_dim,
        })
    }

    /// One update for a batch of rows: `x[n,in]`, `h[n,hidden] -> h'[n,hidden]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var, AutodiffError> {
        let (nx, cx) = tape.shape(x);
        let (nh, ch) = tape.shape(h);
        if cx != self.in_dim || ch != self.hidden_dim || nx != nh {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru_cell",
                lhs: (nx, cx),
                rhs: (nh, ch),
            });
        }
        let d = self.hidden_dim;
        let wi = tape.param(self.input_weight);
        let wh = tape.param(self.hidden_weight);
        let bi = tape.param(self.input_bias);
        let bh = tape.param(self.hidden_bias);
        let gi = tape.matmul(x, wi)?;
        let gi = tape.add_row(gi, bi)?;
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add_row(gh, bh)?;

        let gi_rz = tape.slice_cols(gi, 0, 2 * d)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * d)?;
        let rz = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, d)?;
        let z = tape.slice_cols(rz, d, d)?;

        let gi_n = tape.slice_cols(gi, 2 * d, d)?;
        let gh_n = tape.slice_cols(gh, 2 * d, d)?;
        let rgh = tape.mul(r, gh_n)?;
        let n = tape.add(gi_n, rgh)?;
        let n = tape.tanh(n);

        let h_minus_n = tape.sub(h, n)?;
        let zh = tape.mul(z, h_minus_n)?;
        tape.add(n, zh)
    }
}
