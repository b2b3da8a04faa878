use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::layers::init_weight;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::{axpy, dot, Scalar, Tensor};

/// Single-direction LSTM. Weights: `w_ih [4H, I]`, `w_hh [4H, H]`,
/// `bias [4H]`, gate order `i, f, g, o`. The forget-gate bias starts at 1.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![S::zero(); hidden],
            c: vec![S::zero(); hidden],
        }
    }
}

pub struct LstmStepCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    i: Vec<S>,
    f: Vec<S>,
    g: Vec<S>,
    o: Vec<S>,
    c: Vec<S>,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Lstm {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.name("w_ih"), self.name("w_hh"), self.name("bias")]
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        let h = self.hidden;
        ps.insert(
            self.name("w_ih"),
            init_weight(rng, &[4 * h, self.input], self.input),
        );
        ps.insert(self.name("w_hh"), init_weight(rng, &[4 * h, h], h));
        let mut bias = Tensor::zeros(&[4 * h]);
        for v in &mut bias.data_mut()[h..2 * h] {
            *v = S::one();
        }
        ps.insert(self.name("bias"), bias);
    }

    pub fn step<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &[S],
        state: &mut LstmState<S>,
    ) -> Result<LstmStepCache<S>> {
        if x.len() != self.input {
            return Err(Error::shape(&self.prefix, self.input, x.len()));
        }
        let h = self.hidden;
        let w_ih = ps.get(&self.name("w_ih"))?;
        let w_hh = ps.get(&self.name("w_hh"))?;
        let bias = ps.get(&self.name("bias"))?;
        let mut pre = vec![S::zero(); 4 * h];
        for (u, p) in pre.iter_mut().enumerate() {
            *p = dot(w_ih.row(u), x) + dot(w_hh.row(u), &state.h) + bias.data()[u];
        }
        let sig = |v: S| S::from_f64(crate::ndiff::layers::sigmoid_f64(v.to_f64()));
        let i: Vec<S> = pre[0..h].iter().map(|&v| sig(v)).collect();
        let f: Vec<S> = pre[h..2 * h].iter().map(|&v| sig(v)).collect();
        let g: Vec<S> = pre[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
        let o: Vec<S> = pre[3 * h..4 * h].iter().map(|&v| sig(v)).collect();
        let mut c = vec![S::zero(); h];
        for u in 0..h {
            c[u] = f[u] * state.c[u] + i[u] * g[u];
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            g,
            o,
            c: c.clone(),
        };
        for u in 0..h {
            state.h[u] = cache.o[u] * c[u].tanh();
        }
        state.c = c;
        Ok(cache)
    }

    /// Backprop for one step. `dh` is the total gradient arriving at
    /// `h_t`, `dc` the carry arriving at `c_t` from the following step.
    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &LstmStepCache<S>,
        dh: &[S],
        dc: &[S],
    ) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
        let h = self.hidden;
        let one = S::one();
        let mut dpre = vec![S::zero(); 4 * h];
        let mut dc_total = vec![S::zero(); h];
        for u in 0..h {
            let tc = cache.c[u].tanh();
            let do_ = dh[u] * tc;
            dpre[3 * h + u] = do_ * cache.o[u] * (one - cache.o[u]);
            dc_total[u] = dc[u] + dh[u] * cache.o[u] * (one - tc * tc);
            let di = dc_total[u] * cache.g[u];
            dpre[u] = di * cache.i[u] * (one - cache.i[u]);
            let df = dc_total[u] * cache.c_prev[u];
            dpre[h + u] = df * cache.f[u] * (one - cache.f[u]);
            let dg = dc_total[u] * cache.i[u];
            dpre[2 * h + u] = dg * (one - cache.g[u] * cache.g[u]);
        }
        let w_ih = ps.get(&self.name("w_ih"))?.clone();
        let w_hh = ps.get(&self.name("w_hh"))?.clone();
        {
            let dw_ih = grads.get_mut(&self.name("w_ih"))?;
            for (u, &g) in dpre.iter().enumerate() {
                axpy(dw_ih.row_mut(u), g, &cache.x);
            }
        }
        {
            let dw_hh = grads.get_mut(&self.name("w_hh"))?;
            for (u, &g) in dpre.iter().enumerate() {
                axpy(dw_hh.row_mut(u), g, &cache.h_prev);
            }
        }
        {
            let dbias = grads.get_mut(&self.name("bias"))?;
            axpy(dbias.data_mut(), one, &dpre);
        }
        let mut dx = vec![S::zero(); self.input];
        let mut dh_prev = vec![S::zero(); h];
        for (u, &g) in dpre.iter().enumerate() {
            axpy(&mut dx, g, w_ih.row(u));
            axpy(&mut dh_prev, g, w_hh.row(u));
        }
        let mut dc_prev = vec![S::zero(); h];
        for u in 0..h {
            dc_prev[u] = dc_total[u] * cache.f[u];
        }
        Ok((dx, dh_prev, dc_prev))
    }

    pub fn forward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<LstmStepCache<S>>)> {
        let n = x.rows();
        let mut state = LstmState::zeros(self.hidden);
        let mut out = Tensor::zeros(&[n, self.hidden]);
        let mut caches = Vec::with_capacity(n);
        for t in 0..n {
            caches.push(self.step(ps, x.row(t), &mut state)?);
            out.row_mut(t).copy_from_slice(&state.h);
        }
        Ok((out, caches))
    }

    pub fn backward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        caches: &[LstmStepCache<S>],
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = caches.len();
        let mut dx = Tensor::zeros(&[n, self.input]);
        let mut dh_carry = vec![S::zero(); self.hidden];
        let mut dc_carry = vec![S::zero(); self.hidden];
        for t in (0..n).rev() {
            let mut dh = dy.row(t).to_vec();
            axpy(&mut dh, S::one(), &dh_carry);
            let (dxt, dhp, dcp) =
                self.step_backward(ps, grads, &caches[t], &dh, &dc_carry)?;
            dx.row_mut(t).copy_from_slice(&dxt);
            dh_carry = dhp;
            dc_carry = dcp;
        }
        Ok(dx)
    }
}

/// Bidirectional LSTM; output is the per-step concatenation
/// `[forward_h, backward_h]`, so `cols = 2 * hidden`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

pub struct BiLstmCache<S> {
    fwd: Vec<LstmStepCache<S>>,
    bwd: Vec<LstmStepCache<S>>,
}

impl BiLstm {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: Lstm::new(format!("{prefix}.fwd"), input, hidden),
            bwd: Lstm::new(format!("{prefix}.bwd"), input, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.fwd.param_names();
        v.extend(self.bwd.param_names());
        v
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.fwd.init(ps, rng);
        self.bwd.init(ps, rng);
    }

    pub fn forward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, BiLstmCache<S>)> {
        let n = x.rows();
        let h = self.hidden();
        let mut out = Tensor::zeros(&[n, 2 * h]);
        let mut state = LstmState::zeros(h);
        let mut fwd = Vec::with_capacity(n);
        for t in 0..n {
            fwd.push(self.fwd.step(ps, x.row(t), &mut state)?);
            out.row_mut(t)[..h].copy_from_slice(&state.h);
        }
        let mut state = LstmState::zeros(h);
        let mut bwd = Vec::with_capacity(n);
        for t in (0..n).rev() {
            bwd.push(self.bwd.step(ps, x.row(t), &mut state)?);
            out.row_mut(t)[h..].copy_from_slice(&state.h);
        }
        Ok((out, BiLstmCache { fwd, bwd }))
    }

    pub fn backward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &BiLstmCache<S>,
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = cache.fwd.len();
        let h = self.hidden();
        let mut dx = Tensor::zeros(&[n, self.fwd.input]);
        let mut dh_carry = vec![S::zero(); h];
        let mut dc_carry = vec![S::zero(); h];
        for t in (0..n).rev() {
            let mut dh = dy.row(t)[..h].to_vec();
            axpy(&mut dh, S::one(), &dh_carry);
            let (dxt, dhp, dcp) =
                self.fwd
                    .step_backward(ps, grads, &cache.fwd[t], &dh, &dc_carry)?;
            axpy(dx.row_mut(t), S::one(), &dxt);
            dh_carry = dhp;
            dc_carry = dcp;
        }
        let mut dh_carry = vec![S::zero(); h];
        let mut dc_carry = vec![S::zero(); h];
        // Backward direction consumed rows n-1..0; cache.bwd[k] holds row n-1-k.
        for k in (0..n).rev() {
            let t = n - 1 - k;
            let mut dh = dy.row(t)[h..].to_vec();
            axpy(&mut dh, S::one(), &dh_carry);
            let (dxt, dhp, dcp) =
                self.bwd
                    .step_backward(ps, grads, &cache.bwd[k], &dh, &dc_carry)?;
            axpy(dx.row_mut(t), S::one(), &dxt);
            dh_carry = dhp;
            dc_carry = dcp;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lstm_gates_stay_bounded() {
        let lstm = Lstm::new("l", 3, 4);
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        lstm.init(&mut ps, &mut rng);
        let x = Tensor::from_vec(&[5, 3], (0..15).map(|i| (i as f64) * 0.1).collect()).unwrap();
        let (y, _) = lstm.forward_seq(&ps, &x).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1.0);
        }
    }

    #[test]
    fn bilstm_output_width() {
        let b = BiLstm::new("b", 3, 4);
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.init(&mut ps, &mut rng);
        let x = Tensor::zeros(&[6, 3]);
        let (y, _) = b.forward_seq(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[6, 8]);
    }

    #[test]
    fn bilstm_is_direction_symmetric_on_reversed_input() {
        // Reversing the input sequence must swap the two halves of the
        // output (with rows reversed) when both directions share weights.
        let b = BiLstm::new("b", 2, 3);
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.init(&mut ps, &mut rng);
        // copy fwd weights onto bwd
        for leaf in ["w_ih", "w_hh", "bias"] {
            let t = ps.get(&format!("b.fwd.{leaf}")).unwrap().clone();
            ps.insert(format!("b.bwd.{leaf}"), t);
        }
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.5, -0.5, -1.0, 2.0, 0.1, 0.2])
            .unwrap();
        let mut xr = Tensor::zeros(&[4, 2]);
        for t in 0..4 {
            xr.row_mut(t).copy_from_slice(x.row(3 - t));
        }
        let (y, _) = b.forward_seq(&ps, &x).unwrap();
        let (yr, _) = b.forward_seq(&ps, &xr).unwrap();
        for t in 0..4 {
            let a = y.row(t);
            let c = yr.row(3 - t);
            for u in 0..3 {
                assert!((a[u] - c[3 + u]).abs() < 1e-12);
                assert!((a[3 + u] - c[u]).abs() < 1e-12);
            }
        }
    }
}
