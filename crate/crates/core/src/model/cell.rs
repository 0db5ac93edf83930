//! LSTM and GRU cells with explicit per-step caches for backpropagation
//! through time.

use serde::{Deserialize, Serialize};

use super::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!(
                "unknown cell kind `{other}` (expected lstm or gru)"
            )),
        }
    }
}

/// Weights of one recurrent cell: `wx: [G·H, in]`, `wh: [G·H, H]`, `b: [G·H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        let g = kind.gates() * hidden;
        CellParams {
            wx: Tensor::zeros(&[g, input]),
            wh: Tensor::zeros(&[g, hidden]),
            b: Tensor::zeros(&[g]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }
}

/// Recurrent state. `c` is empty for GRU cells.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl State {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        State {
            h: vec![0.0; hidden],
            c: match kind {
                CellKind::Lstm => vec![0.0; hidden],
                CellKind::Gru => Vec::new(),
            },
        }
    }
}

/// Activations saved by one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// LSTM: i, f, g, o. GRU: r, u, n.
    pub gates: Vec<f64>,
    /// LSTM: tanh(c'). GRU: the recurrent candidate term `Wh_n · h`.
    pub aux: Vec<f64>,
}

pub fn step(kind: CellKind, p: &CellParams, x: &[f64], prev: &State) -> (State, StepCache) {
    let hd = p.hidden();
    match kind {
        CellKind::Lstm => {
            let mut z = p.b.data.clone();
            p.wx.matvec_acc(x, &mut z);
            p.wh.matvec_acc(&prev.h, &mut z);
            let mut gates = z;
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if k / hd == 2 { v.tanh() } else { sigmoid(*v) };
            }
            let (i, rest) = gates.split_at(hd);
            let (f, rest) = rest.split_at(hd);
            let (g, o) = rest.split_at(hd);
            let c: Vec<f64> = (0..hd).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
            let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h = (0..hd).map(|k| o[k] * tc[k]).collect();
            let cache = StepCache {
                x: x.to_vec(),
                h_prev: prev.h.clone(),
                c_prev: prev.c.clone(),
                gates,
                aux: tc,
            };
            (State { h, c }, cache)
        }
        CellKind::Gru => {
            let mut zx = p.b.data.clone();
            p.wx.matvec_acc(x, &mut zx);
            let zh = p.wh.matvec(&prev.h);
            let mut gates = vec![0.0; 3 * hd];
            for k in 0..hd {
                let r = sigmoid(zx[k] + zh[k]);
                let u = sigmoid(zx[hd + k] + zh[hd + k]);
                let n = (zx[2 * hd + k] + r * zh[2 * hd + k]).tanh();
                gates[k] = r;
                gates[hd + k] = u;
                gates[2 * hd + k] = n;
            }
            let h = (0..hd)
                .map(|k| {
                    let u = gates[hd + k];
                    (1.0 - u) * gates[2 * hd + k] + u * prev.h[k]
                })
                .collect();
            let cache = StepCache {
                x: x.to_vec(),
                h_prev: prev.h.clone(),
                c_prev: Vec::new(),
                gates,
                aux: zh[2 * hd..].to_vec(),
            };
            (State { h, c: Vec::new() }, cache)
        }
    }
}

/// Backpropagates one step. `dh`/`dc` are gradients on the step's output
/// state; returns gradients on `x` and on the previous state, accumulating
/// parameter gradients into `grad`.
pub fn step_backward(
    kind: CellKind,
    p: &CellParams,
    grad: &mut CellParams,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
) -> (Vec<f64>, State) {
    let hd = p.hidden();
    let mut dx = vec![0.0; cache.x.len()];
    let mut dh_prev = vec![0.0; hd];
    match kind {
        CellKind::Lstm => {
            let g = &cache.gates;
            let tc = &cache.aux;
            let mut dz = vec![0.0; 4 * hd];
            let mut dc_prev = vec![0.0; hd];
            for k in 0..hd {
                let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let dct = dc[k] + dh[k] * o * (1.0 - tc[k] * tc[k]);
                dz[k] = dct * gg * i * (1.0 - i);
                dz[hd + k] = dct * cache.c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dct * i * (1.0 - gg * gg);
                dz[3 * hd + k] = dh[k] * tc[k] * o * (1.0 - o);
                dc_prev[k] = dct * f;
            }
            grad.wx.outer_acc(&dz, &cache.x);
            grad.wh.outer_acc(&dz, &cache.h_prev);
            for (b, d) in grad.b.data.iter_mut().zip(&dz) {
                *b += d;
            }
            p.wx.matvec_t_acc(&dz, &mut dx);
            p.wh.matvec_t_acc(&dz, &mut dh_prev);
            (
                dx,
                State {
                    h: dh_prev,
                    c: dc_prev,
                },
            )
        }
        CellKind::Gru => {
            let g = &cache.gates;
            let mut dzx = vec![0.0; 3 * hd];
            let mut dzh = vec![0.0; 3 * hd];
            for k in 0..hd {
                let (r, u, n) = (g[k], g[hd + k], g[2 * hd + k]);
                let dn = dh[k] * (1.0 - u);
                let du = dh[k] * (cache.h_prev[k] - n);
                dh_prev[k] = dh[k] * u;
                let dzn = dn * (1.0 - n * n);
                let dr = dzn * cache.aux[k];
                let dzr = dr * r * (1.0 - r);
                let dzu = du * u * (1.0 - u);
                dzx[k] = dzr;
                dzx[hd + k] = dzu;
                dzx[2 * hd + k] = dzn;
                dzh[k] = dzr;
                dzh[hd + k] = dzu;
                dzh[2 * hd + k] = dzn * r;
            }
            grad.wx.outer_acc(&dzx, &cache.x);
            grad.wh.outer_acc(&dzh, &cache.h_prev);
            for (b, d) in grad.b.data.iter_mut().zip(&dzx) {
                *b += d;
            }
            p.wx.matvec_t_acc(&dzx, &mut dx);
            p.wh.matvec_t_acc(&dzh, &mut dh_prev);
            (
                dx,
                State {
                    h: dh_prev,
                    c: Vec::new(),
                },
            )
        }
    }
}
