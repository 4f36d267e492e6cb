//! Plain-loop S-LSTM over one sentence, written directly from the update
//! equations with explicit zero padding rows. Used as an oracle for the
//! batched tape implementation.

use aslstm_tensor::Tensor;

pub struct Params {
    pub w: Tensor<f64>,
    pub u: Tensor<f64>,
    pub v: Tensor<f64>,
    pub b: Tensor<f64>,
    pub gw: Tensor<f64>,
    pub gu: Tensor<f64>,
    pub gb: Tensor<f64>,
    pub fw: Tensor<f64>,
    pub fu: Tensor<f64>,
    pub fb: Tensor<f64>,
}

impl Params {
    pub fn from_slice(t: &[Tensor<f64>]) -> Self {
        Self {
            w: t[0].clone(),
            u: t[1].clone(),
            v: t[2].clone(),
            b: t[3].clone(),
            gw: t[4].clone(),
            gu: t[5].clone(),
            gb: t[6].clone(),
            fw: t[7].clone(),
            fu: t[8].clone(),
            fb: t[9].clone(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.v.rows()
    }
}

/// Word rows `0..=n+1` (padding at both ends) plus the global node.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub cg: Vec<f64>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// y[j] += sum_k x[k] * m[k, j]
fn acc(y: &mut [f64], x: &[f64], m: &Tensor<f64>) {
    for (k, &xk) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += xk * m.get(k, j);
        }
    }
}

impl State {
    pub fn initial(n: usize, hidden: usize, h0: Option<&[Vec<f64>]>) -> Self {
        let mut h = vec![vec![0.0; hidden]; n + 2];
        if let Some(h0) = h0 {
            for i in 0..n {
                h[i + 1] = h0[i].clone();
            }
        }
        Self {
            h,
            c: vec![vec![0.0; hidden]; n + 2],
            g: vec![0.0; hidden],
            cg: vec![0.0; hidden],
        }
    }
}

/// New `(h, c)` of word `i` (1-based) from the previous layer.
pub fn word(p: &Params, x: &[f64], s: &State, i: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = p.hidden();
    let mut pre = p.b.data().to_vec();
    let xi: Vec<f64> = [&s.h[i - 1][..], &s.h[i][..], &s.h[i + 1][..]].concat();
    acc(&mut pre, &xi, &p.w);
    acc(&mut pre, &s.g, &p.v);
    acc(&mut pre, x, &p.u);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for j in 0..hd {
        // blocks: input, left, right, forget, sentence, output, candidate
        let raw: Vec<f64> = (0..5).map(|k| sig(pre[k * hd + j])).collect();
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let (gi, gl, gr, gf, gs) = (e[0] / z, e[1] / z, e[2] / z, e[3] / z, e[4] / z);
        let o = sig(pre[5 * hd + j]);
        let u = pre[6 * hd + j].tanh();
        c[j] = gl * s.c[i - 1][j] + gf * s.c[i][j] + gr * s.c[i + 1][j] + gs * s.cg[j] + gi * u;
        h[j] = o * c[j].tanh();
    }
    (h, c)
}

/// New `(g, c_g)` from the previous layer's `n` words.
pub fn global(p: &Params, s: &State, n: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = p.hidden();
    let mut hbar = vec![0.0; hd];
    for i in 1..=n {
        for j in 0..hd {
            hbar[j] += s.h[i][j] / n as f64;
        }
    }
    let mut pre = p.gb.data().to_vec();
    acc(&mut pre, &s.g, &p.gw);
    acc(&mut pre, &hbar, &p.gu);
    let mut gate_words = Vec::with_capacity(n);
    for i in 1..=n {
        let mut f = p.fb.data().to_vec();
        acc(&mut f, &s.g, &p.fw);
        acc(&mut f, &s.h[i], &p.fu);
        gate_words.push(f.into_iter().map(sig).collect::<Vec<_>>());
    }
    let mut g = vec![0.0; hd];
    let mut cg = vec![0.0; hd];
    for j in 0..hd {
        let fg = sig(pre[j]);
        let o = sig(pre[hd + j]);
        let mut all: Vec<f64> = gate_words.iter().map(|f| f[j]).collect();
        all.push(fg);
        let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = all.iter().map(|a| (a - m).exp()).sum();
        let mut acc_c = (fg - m).exp() / z * s.cg[j];
        for i in 1..=n {
            acc_c += (all[i - 1] - m).exp() / z * s.c[i][j];
        }
        cg[j] = acc_c;
        g[j] = o * acc_c.tanh();
    }
    (g, cg)
}

/// States after every layer; word `i` updates while `l <= depths[i]`,
/// the global node for `max(depths)` layers.
pub fn run(p: &Params, x: &[Vec<f64>], depths: &[usize], h0: Option<&[Vec<f64>]>) -> Vec<State> {
    let n = x.len();
    let mut states = vec![State::initial(n, p.hidden(), h0)];
    let d_max = depths.iter().copied().max().unwrap_or(0);
    for l in 1..=d_max {
        let prev = states.last().unwrap().clone();
        let mut next = prev.clone();
        for i in 1..=n {
            if depths[i - 1] >= l {
                let (h, c) = word(p, &x[i - 1], &prev, i);
                next.h[i] = h;
                next.c[i] = c;
            }
        }
        let (g, cg) = global(p, &prev, n);
        next.g = g;
        next.cg = cg;
        states.push(next);
    }
    states
}
