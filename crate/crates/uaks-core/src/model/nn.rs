//! Recurrent layer primitives with exact analytic gradients: GRU and LSTM
//! directions, bidirectional wrappers, affine projections, inverted
//! dropout, temporal sum pooling and pair-average downsampling.
//!
//! Everything runs in f64; the time-batched input matmuls carry most of
//! the arithmetic, the recurrent part is sequential per step.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AffineParams {
    /// out x in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl AffineParams {
    pub fn zeros(out: usize, input: usize) -> Self {
        AffineParams {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }

    /// y = x W^T + b for a time-major input (T x in) -> (T x out).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grad: &mut AffineParams,
    ) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Weights of one recurrent direction; gate blocks are stacked in the
/// leading dimension (3 blocks for GRU: r, z, n; 4 for LSTM: i, f, g, o).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RnnDirParams {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
}

impl RnnDirParams {
    pub fn zeros(gates: usize, hidden: usize, input: usize) -> Self {
        RnnDirParams {
            w_ih: Array2::zeros((gates * hidden, input)),
            w_hh: Array2::zeros((gates * hidden, hidden)),
            b_ih: Array1::zeros(gates * hidden),
            b_hh: Array1::zeros(gates * hidden),
        }
    }

    pub fn hidden(&self, gates: usize) -> usize {
        self.w_hh.nrows() / gates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BiRnnParams {
    pub fwd: RnnDirParams,
    pub bwd: RnnDirParams,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------

pub(crate) struct GruDirCache {
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    /// Hidden-side pre-activation of the candidate gate, needed for dr.
    hn_pre: Array2<f64>,
    out: Array2<f64>,
}

/// r = sig(Wr x + Ur h + br), z = sig(Wz x + Uz h + bz),
/// n = tanh(Wn x + bn_i + r * (Un h + bn_h)), h' = (1-z) n + z h.
pub(crate) fn gru_forward(p: &RnnDirParams, x: &Array2<f64>) -> GruDirCache {
    let t_len = x.nrows();
    let h = p.hidden(3);
    let pre_i = x.dot(&p.w_ih.t()) + &p.b_ih;
    let mut cache = GruDirCache {
        r: Array2::zeros((t_len, h)),
        z: Array2::zeros((t_len, h)),
        n: Array2::zeros((t_len, h)),
        hn_pre: Array2::zeros((t_len, h)),
        out: Array2::zeros((t_len, h)),
    };
    let mut hidden = Array1::<f64>::zeros(h);
    for t in 0..t_len {
        let pre_h = p.w_hh.dot(&hidden) + &p.b_hh;
        for j in 0..h {
            let r = sigmoid(pre_i[[t, j]] + pre_h[j]);
            let z = sigmoid(pre_i[[t, h + j]] + pre_h[h + j]);
            let hn = pre_h[2 * h + j];
            let n = (pre_i[[t, 2 * h + j]] + r * hn).tanh();
            let out = (1.0 - z) * n + z * hidden[j];
            cache.r[[t, j]] = r;
            cache.z[[t, j]] = z;
            cache.n[[t, j]] = n;
            cache.hn_pre[[t, j]] = hn;
            cache.out[[t, j]] = out;
        }
        hidden.assign(&cache.out.row(t));
    }
    cache
}

pub(crate) fn gru_backward(
    p: &RnnDirParams,
    x: &Array2<f64>,
    cache: &GruDirCache,
    dy: &Array2<f64>,
    grad: &mut RnnDirParams,
) -> Array2<f64> {
    let t_len = x.nrows();
    let h = p.hidden(3);
    let mut dpre_i = Array2::<f64>::zeros((t_len, 3 * h));
    let mut dpre_h = Array2::<f64>::zeros((t_len, 3 * h));
    let mut dh_next = Array1::<f64>::zeros(h);
    for t in (0..t_len).rev() {
        let mut dh_carry = Array1::<f64>::zeros(h);
        {
            let mut dph = vec![0.0f64; 3 * h];
            for j in 0..h {
                let dh = dy[[t, j]] + dh_next[j];
                let r = cache.r[[t, j]];
                let z = cache.z[[t, j]];
                let n = cache.n[[t, j]];
                let h_prev = if t == 0 { 0.0 } else { cache.out[[t - 1, j]] };
                let dz = dh * (h_prev - n) * z * (1.0 - z);
                let dn = dh * (1.0 - z) * (1.0 - n * n);
                let dr = dn * cache.hn_pre[[t, j]] * r * (1.0 - r);
                dpre_i[[t, j]] = dr;
                dpre_i[[t, h + j]] = dz;
                dpre_i[[t, 2 * h + j]] = dn;
                dph[j] = dr;
                dph[h + j] = dz;
                dph[2 * h + j] = dn * r;
                dh_carry[j] = dh * z;
            }
            for (j, v) in dph.iter().enumerate() {
                dpre_h[[t, j]] = *v;
            }
        }
        // dh_{t-1} = dh * z + W_hh^T dpre_h
        let dph_row = dpre_h.row(t).to_owned();
        dh_next = dh_carry + p.w_hh.t().dot(&dph_row);
    }
    // Hidden-state inputs per step: row t holds h_{t-1}.
    let mut h_prev_all = Array2::<f64>::zeros((t_len, h));
    if t_len > 1 {
        h_prev_all
            .slice_mut(s![1.., ..])
            .assign(&cache.out.slice(s![..t_len - 1, ..]));
    }
    grad.w_ih += &dpre_i.t().dot(x);
    grad.w_hh += &dpre_h.t().dot(&h_prev_all);
    grad.b_ih += &dpre_i.sum_axis(Axis(0));
    grad.b_hh += &dpre_h.sum_axis(Axis(0));
    dpre_i.dot(&p.w_ih)
}

// ---------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------

pub(crate) struct LstmDirCache {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
    c: Array2<f64>,
    out: Array2<f64>,
}

pub(crate) fn lstm_forward(p: &RnnDirParams, x: &Array2<f64>) -> LstmDirCache {
    let t_len = x.nrows();
    let h = p.hidden(4);
    let pre_i = x.dot(&p.w_ih.t()) + &p.b_ih;
    let mut cache = LstmDirCache {
        i: Array2::zeros((t_len, h)),
        f: Array2::zeros((t_len, h)),
        g: Array2::zeros((t_len, h)),
        o: Array2::zeros((t_len, h)),
        tanh_c: Array2::zeros((t_len, h)),
        c: Array2::zeros((t_len, h)),
        out: Array2::zeros((t_len, h)),
    };
    let mut hidden = Array1::<f64>::zeros(h);
    let mut cell = Array1::<f64>::zeros(h);
    for t in 0..t_len {
        let pre_h = p.w_hh.dot(&hidden) + &p.b_hh;
        for j in 0..h {
            let i = sigmoid(pre_i[[t, j]] + pre_h[j]);
            let f = sigmoid(pre_i[[t, h + j]] + pre_h[h + j]);
            let g = (pre_i[[t, 2 * h + j]] + pre_h[2 * h + j]).tanh();
            let o = sigmoid(pre_i[[t, 3 * h + j]] + pre_h[3 * h + j]);
            let c = f * cell[j] + i * g;
            let tc = c.tanh();
            cache.i[[t, j]] = i;
            cache.f[[t, j]] = f;
            cache.g[[t, j]] = g;
            cache.o[[t, j]] = o;
            cache.c[[t, j]] = c;
            cache.tanh_c[[t, j]] = tc;
            cache.out[[t, j]] = o * tc;
        }
        hidden.assign(&cache.out.row(t));
        cell.assign(&cache.c.row(t));
    }
    cache
}

pub(crate) fn lstm_backward(
    p: &RnnDirParams,
    x: &Array2<f64>,
    cache: &LstmDirCache,
    dy: &Array2<f64>,
    grad: &mut RnnDirParams,
) -> Array2<f64> {
    let t_len = x.nrows();
    let h = p.hidden(4);
    let mut dpre = Array2::<f64>::zeros((t_len, 4 * h));
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    for t in (0..t_len).rev() {
        for j in 0..h {
            let dh = dy[[t, j]] + dh_next[j];
            let i = cache.i[[t, j]];
            let f = cache.f[[t, j]];
            let g = cache.g[[t, j]];
            let o = cache.o[[t, j]];
            let tc = cache.tanh_c[[t, j]];
            let c_prev = if t == 0 { 0.0 } else { cache.c[[t - 1, j]] };
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let d_o = dh * tc * o * (1.0 - o);
            let di = dc * g * i * (1.0 - i);
            let df = dc * c_prev * f * (1.0 - f);
            let dg = dc * i * (1.0 - g * g);
            dpre[[t, j]] = di;
            dpre[[t, h + j]] = df;
            dpre[[t, 2 * h + j]] = dg;
            dpre[[t, 3 * h + j]] = d_o;
            dc_next[j] = dc * f;
        }
        let dpre_row = dpre.row(t).to_owned();
        dh_next = p.w_hh.t().dot(&dpre_row);
    }
    let mut h_prev_all = Array2::<f64>::zeros((t_len, h));
    if t_len > 1 {
        h_prev_all
            .slice_mut(s![1.., ..])
            .assign(&cache.out.slice(s![..t_len - 1, ..]));
    }
    grad.w_ih += &dpre.t().dot(x);
    grad.w_hh += &dpre.t().dot(&h_prev_all);
    grad.b_ih += &dpre.sum_axis(Axis(0));
    grad.b_hh += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w_ih)
}

// ---------------------------------------------------------------------
// Bidirectional wrappers
// ---------------------------------------------------------------------

fn reverse_time(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

pub(crate) enum BiCache {
    Gru(GruDirCache, GruDirCache),
    Lstm(LstmDirCache, LstmDirCache),
}

impl BiCache {
    pub fn output(&self) -> Array2<f64> {
        let (f_out, b_out) = match self {
            BiCache::Gru(f, b) => (&f.out, &b.out),
            BiCache::Lstm(f, b) => (&f.out, &b.out),
        };
        concatenate(Axis(1), &[f_out.view(), reverse_time(b_out).view()])
            .expect("matching time dimension")
    }
}

/// Runs both directions; the output at time t is the concatenation of the
/// forward state at t and the backward state at t (computed over the
/// reversed sequence).
pub(crate) fn bi_forward(p: &BiRnnParams, x: &Array2<f64>, gru: bool) -> BiCache {
    let x_rev = reverse_time(x);
    if gru {
        BiCache::Gru(gru_forward(&p.fwd, x), gru_forward(&p.bwd, &x_rev))
    } else {
        BiCache::Lstm(lstm_forward(&p.fwd, x), lstm_forward(&p.bwd, &x_rev))
    }
}

pub(crate) fn bi_backward(
    p: &BiRnnParams,
    x: &Array2<f64>,
    cache: &BiCache,
    dy: &Array2<f64>,
    grad: &mut BiRnnParams,
) -> Array2<f64> {
    let h = dy.ncols() / 2;
    let dy_f = dy.slice(s![.., ..h]).to_owned();
    let dy_b = reverse_time(&dy.slice(s![.., h..]).to_owned());
    let x_rev = reverse_time(x);
    let (dx_f, dx_b_rev) = match cache {
        BiCache::Gru(cf, cb) => (
            gru_backward(&p.fwd, x, cf, &dy_f, &mut grad.fwd),
            gru_backward(&p.bwd, &x_rev, cb, &dy_b, &mut grad.bwd),
        ),
        BiCache::Lstm(cf, cb) => (
            lstm_backward(&p.fwd, x, cf, &dy_f, &mut grad.fwd),
            lstm_backward(&p.bwd, &x_rev, cb, &dy_b, &mut grad.bwd),
        ),
    };
    dx_f + reverse_time(&dx_b_rev)
}

// ---------------------------------------------------------------------
// Downsampling, dropout
// ---------------------------------------------------------------------

/// Averages adjacent frame pairs; an unpaired final frame passes through.
pub(crate) fn pair_average(x: &Array2<f64>) -> Array2<f64> {
    let t_len = x.nrows();
    let out_len = t_len.div_ceil(2);
    let mut out = Array2::zeros((out_len, x.ncols()));
    for k in 0..out_len {
        if 2 * k + 1 < t_len {
            let avg = (&x.row(2 * k) + &x.row(2 * k + 1)) * 0.5;
            out.row_mut(k).assign(&avg);
        } else {
            out.row_mut(k).assign(&x.row(2 * k));
        }
    }
    out
}

pub(crate) fn pair_average_backward(dy: &Array2<f64>, in_len: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((in_len, dy.ncols()));
    for k in 0..dy.nrows() {
        if 2 * k + 1 < in_len {
            let half = &dy.row(k) * 0.5;
            dx.row_mut(2 * k).assign(&half);
            dx.row_mut(2 * k + 1).assign(&half);
        } else {
            dx.row_mut(2 * k).assign(&dy.row(k));
        }
    }
    dx
}

/// Inverted dropout mask: entries are 0 or 1/(1-p).
pub(crate) fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn(shape, |_| {
        if rng.random_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_dir(gates: usize, hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> RnnDirParams {
        let mut p = RnnDirParams::zeros(gates, hidden, input);
        for v in p.w_ih.iter_mut().chain(p.w_hh.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in p.b_ih.iter_mut().chain(p.b_hh.iter_mut()) {
            *v = rng.random_range(-0.2..0.2);
        }
        p
    }

    /// Finite-difference check of d(sum of outputs)/d(param) for one
    /// recurrent direction.
    fn check_dir_gradients(gru: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let gates = if gru { 3 } else { 4 };
        let (t_len, input, hidden) = (5, 3, 4);
        let p = random_dir(gates, hidden, input, &mut rng);
        let x = Array2::from_shape_fn((t_len, input), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &RnnDirParams, x: &Array2<f64>| -> f64 {
            if gru {
                gru_forward(p, x).out.sum()
            } else {
                lstm_forward(p, x).out.sum()
            }
        };
        let dy = Array2::ones((t_len, hidden));
        let mut grad = RnnDirParams::zeros(gates, hidden, input);
        let dx = if gru {
            let c = gru_forward(&p, &x);
            gru_backward(&p, &x, &c, &dy, &mut grad)
        } else {
            let c = lstm_forward(&p, &x);
            lstm_backward(&p, &x, &c, &dy, &mut grad)
        };
        let eps = 1e-6;
        let mut check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-5,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };
        for (r, c) in [(0, 0), (1, 2), (gates * hidden - 1, input - 1)] {
            let mut pp = p.clone();
            pp.w_ih[[r, c]] += eps;
            let plus = loss(&pp, &x);
            pp.w_ih[[r, c]] -= 2.0 * eps;
            let minus = loss(&pp, &x);
            check(grad.w_ih[[r, c]], plus, minus, "w_ih");
        }
        for (r, c) in [(0, 0), (2, 1), (gates * hidden - 1, hidden - 1)] {
            let mut pp = p.clone();
            pp.w_hh[[r, c]] += eps;
            let plus = loss(&pp, &x);
            pp.w_hh[[r, c]] -= 2.0 * eps;
            let minus = loss(&pp, &x);
            check(grad.w_hh[[r, c]], plus, minus, "w_hh");
        }
        for i in [0, hidden, gates * hidden - 1] {
            let mut pp = p.clone();
            pp.b_ih[i] += eps;
            let plus = loss(&pp, &x);
            pp.b_ih[i] -= 2.0 * eps;
            let minus = loss(&pp, &x);
            check(grad.b_ih[i], plus, minus, "b_ih");

            let mut ph = p.clone();
            ph.b_hh[i] += eps;
            let plus = loss(&ph, &x);
            ph.b_hh[i] -= 2.0 * eps;
            let minus = loss(&ph, &x);
            check(grad.b_hh[i], plus, minus, "b_hh");
        }
        // Input gradients.
        for (r, c) in [(0, 0), (2, 2), (t_len - 1, input - 1)] {
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let plus = loss(&p, &xp);
            xp[[r, c]] -= 2.0 * eps;
            let minus = loss(&p, &xp);
            check(dx[[r, c]], plus, minus, "x");
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        check_dir_gradients(true);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        check_dir_gradients(false);
    }

    #[test]
    fn bidirectional_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t_len, input, hidden) = (4, 2, 3);
        let p = BiRnnParams {
            fwd: random_dir(4, hidden, input, &mut rng),
            bwd: random_dir(4, hidden, input, &mut rng),
        };
        let x = Array2::from_shape_fn((t_len, input), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &BiRnnParams, x: &Array2<f64>| bi_forward(p, x, false).output().sum();
        let cache = bi_forward(&p, &x, false);
        let dy = Array2::ones((t_len, 2 * hidden));
        let mut grad = BiRnnParams {
            fwd: RnnDirParams::zeros(4, hidden, input),
            bwd: RnnDirParams::zeros(4, hidden, input),
        };
        let dx = bi_backward(&p, &x, &cache, &dy, &mut grad);
        let eps = 1e-6;
        for (r, c) in [(0, 0), (3, 1)] {
            let mut pp = p.clone();
            pp.bwd.w_ih[[r, c]] += eps;
            let plus = loss(&pp, &x);
            pp.bwd.w_ih[[r, c]] -= 2.0 * eps;
            let minus = loss(&pp, &x);
            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.bwd.w_ih[[r, c]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5);
        }
        for (r, c) in [(0, 0), (t_len - 1, input - 1)] {
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let plus = loss(&p, &xp);
            xp[[r, c]] -= 2.0 * eps;
            let minus = loss(&p, &xp);
            let fd = (plus - minus) / (2.0 * eps);
            let a = dx[[r, c]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn pair_average_shapes_and_gradient() {
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let y = pair_average(&x);
        assert_eq!(y.nrows(), 3);
        assert_eq!(y[[0, 0]], 1.0); // (0 + 2) / 2
        assert_eq!(y[[2, 0]], 8.0); // unpaired last frame
        let dy = Array2::ones((3, 2));
        let dx = pair_average_backward(&dy, 5);
        assert_eq!(dx[[0, 0]], 0.5);
        assert_eq!(dx[[4, 0]], 1.0);
        // Gradient sums are conserved.
        assert!((dx.sum() - dy.sum()).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask((50, 40), 0.4, &mut rng);
        for &v in m.iter() {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let m2 = dropout_mask((50, 40), 0.4, &mut rng2);
        assert_eq!(m, m2);
        // Keep rate is near 60%.
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 2000.0;
        assert!((kept - 0.6).abs() < 0.05, "keep rate {kept}");
    }
}
