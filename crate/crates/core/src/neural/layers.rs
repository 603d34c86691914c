//! Layer primitives with explicit forward and backward passes.
//!
//! Layers hold their parameters directly and never own activations; a
//! forward pass returns whatever the matching backward pass needs, so the
//! caller controls activation lifetime.

use rand::Rng;

use super::{check_shape, Mode, NeuralError, Tensor};

/// 2-D convolution over [n, c, h, w] tensors with a square kernel,
/// zero padding, and no dilation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    /// [out_ch, in_ch, ksize, ksize]
    pub weight: Tensor,
    /// [out_ch]
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let wlen = out_ch * in_ch * ksize * ksize;
        let weight = Tensor::from_vec(
            &[out_ch, in_ch, ksize, ksize],
            (0..wlen).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("weight shape");
        let bias = Tensor::from_vec(
            &[out_ch],
            (0..out_ch).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("bias shape");
        Conv2d {
            in_ch,
            out_ch,
            ksize,
            stride,
            padding,
            weight,
            bias,
        }
    }

    /// Output spatial size: floor((n + 2p - k) / s) + 1 per dimension.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.ksize) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.ksize) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NeuralError> {
        let (n, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Tensor::zeros(&[n, self.out_ch, oh, ow]);
        if self.ksize == 3 && self.stride == 1 && self.padding == 1 {
            self.forward_k3s1p1(x, &mut out, n, h, w);
        } else {
            self.forward_generic(x, &mut out, n, h, w, oh, ow);
        }
        Ok(out)
    }

    /// Gradients of a scalar loss wrt weight, bias, and (optionally) input.
    pub fn backward(
        &self,
        x: &Tensor,
        gout: &Tensor,
        need_dx: bool,
    ) -> Result<(Tensor, Tensor, Option<Tensor>), NeuralError> {
        let (n, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w);
        check_shape("Conv2d::backward gout", &[n, self.out_ch, oh, ow], gout.shape())?;

        let mut dw = Tensor::zeros_like(&self.weight);
        let mut db = Tensor::zeros_like(&self.bias);
        let g = gout.data();
        let ochw = self.out_ch * oh * ow;
        for ni in 0..n {
            for co in 0..self.out_ch {
                let base = ni * ochw + co * oh * ow;
                db.data_mut()[co] += g[base..base + oh * ow].iter().sum::<f64>();
            }
        }

        let fast = self.ksize == 3 && self.stride == 1 && self.padding == 1;
        if fast {
            self.dweight_k3s1p1(x, gout, &mut dw, n, h, w);
        } else {
            self.dweight_generic(x, gout, &mut dw, n, h, w, oh, ow);
        }

        let dx = if need_dx {
            let mut dx = Tensor::zeros_like(x);
            if fast {
                self.dinput_k3s1p1(gout, &mut dx, n, h, w);
            } else {
                self.dinput_generic(gout, &mut dx, n, h, w, oh, ow);
            }
            Some(dx)
        } else {
            None
        };
        Ok((dw, db, dx))
    }

    /// Gradient wrt input only, skipping the weight-gradient work.
    /// `in_hw` is the spatial size of the forward input.
    pub fn backward_input_only(
        &self,
        in_hw: (usize, usize),
        gout: &Tensor,
    ) -> Result<Tensor, NeuralError> {
        let (h, w) = in_hw;
        let n = gout.shape().first().copied().unwrap_or(0);
        let (oh, ow) = self.out_hw(h, w);
        check_shape(
            "Conv2d::backward_input_only gout",
            &[n, self.out_ch, oh, ow],
            gout.shape(),
        )?;
        let mut dx = Tensor::zeros(&[n, self.in_ch, h, w]);
        if self.ksize == 3 && self.stride == 1 && self.padding == 1 {
            self.dinput_k3s1p1(gout, &mut dx, n, h, w);
        } else {
            self.dinput_generic(gout, &mut dx, n, h, w, oh, ow);
        }
        Ok(dx)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize), NeuralError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(NeuralError::ShapeMismatch {
                context: "Conv2d input".into(),
                expected: vec![0, self.in_ch, 0, 0],
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[2], s[3]))
    }

    // The k3/s1/p1 kernels accumulate whole rows per kernel tap so the inner
    // loops stay contiguous.
    fn forward_k3s1p1(&self, x: &Tensor, out: &mut Tensor, n: usize, h: usize, w: usize) {
        let xin = x.data();
        let wt = self.weight.data();
        let b = self.bias.data();
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * h * w;
        let odata = out.data_mut();
        for ni in 0..n {
            for co in 0..self.out_ch {
                let obase = ni * ochw + co * h * w;
                for y in 0..h {
                    let orow = &mut odata[obase + y * w..obase + (y + 1) * w];
                    let bias = b[co];
                    for v in orow.iter_mut() {
                        *v = bias;
                    }
                    for ci in 0..self.in_ch {
                        let ibase = ni * ichw + ci * h * w;
                        let wbase = (co * self.in_ch + ci) * 9;
                        for ky in 0..3usize {
                            let iy = y as i64 + ky as i64 - 1;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let irow = &xin[ibase + iy as usize * w..ibase + (iy as usize + 1) * w];
                            let w0 = wt[wbase + ky * 3];
                            let w1 = wt[wbase + ky * 3 + 1];
                            let w2 = wt[wbase + ky * 3 + 2];
                            for k in 1..w {
                                orow[k] += w0 * irow[k - 1];
                            }
                            for k in 0..w {
                                orow[k] += w1 * irow[k];
                            }
                            for k in 0..w - 1 {
                                orow[k] += w2 * irow[k + 1];
                            }
                        }
                    }
                }
            }
        }
    }

    fn dinput_k3s1p1(&self, gout: &Tensor, dx: &mut Tensor, n: usize, h: usize, w: usize) {
        let g = gout.data();
        let wt = self.weight.data();
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * h * w;
        let dxd = dx.data_mut();
        for ni in 0..n {
            for ci in 0..self.in_ch {
                let dbase = ni * ichw + ci * h * w;
                for y in 0..h {
                    let drow = &mut dxd[dbase + y * w..dbase + (y + 1) * w];
                    for co in 0..self.out_ch {
                        let gbase = ni * ochw + co * h * w;
                        let wbase = (co * self.in_ch + ci) * 9;
                        for ky in 0..3usize {
                            // dx[y][x] += w[ky][kx] * g[y - ky + 1][x - kx + 1]
                            let gy = y as i64 - ky as i64 + 1;
                            if gy < 0 || gy >= h as i64 {
                                continue;
                            }
                            let grow = &g[gbase + gy as usize * w..gbase + (gy as usize + 1) * w];
                            let w0 = wt[wbase + ky * 3];
                            let w1 = wt[wbase + ky * 3 + 1];
                            let w2 = wt[wbase + ky * 3 + 2];
                            for k in 0..w - 1 {
                                drow[k] += w0 * grow[k + 1];
                            }
                            for k in 0..w {
                                drow[k] += w1 * grow[k];
                            }
                            for k in 1..w {
                                drow[k] += w2 * grow[k - 1];
                            }
                        }
                    }
                }
            }
        }
    }

    fn dweight_k3s1p1(&self, x: &Tensor, gout: &Tensor, dw: &mut Tensor, n: usize, h: usize, w: usize) {
        let xin = x.data();
        let g = gout.data();
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * h * w;
        let dwd = dw.data_mut();
        for ni in 0..n {
            for co in 0..self.out_ch {
                let gbase = ni * ochw + co * h * w;
                for ci in 0..self.in_ch {
                    let ibase = ni * ichw + ci * h * w;
                    let wbase = (co * self.in_ch + ci) * 9;
                    for ky in 0..3usize {
                        let mut acc = [0.0f64; 3];
                        for y in 0..h {
                            let iy = y as i64 + ky as i64 - 1;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let grow = &g[gbase + y * w..gbase + (y + 1) * w];
                            let irow = &xin[ibase + iy as usize * w..ibase + (iy as usize + 1) * w];
                            let mut a0 = 0.0;
                            for k in 1..w {
                                a0 += grow[k] * irow[k - 1];
                            }
                            let mut a1 = 0.0;
                            for k in 0..w {
                                a1 += grow[k] * irow[k];
                            }
                            let mut a2 = 0.0;
                            for k in 0..w - 1 {
                                a2 += grow[k] * irow[k + 1];
                            }
                            acc[0] += a0;
                            acc[1] += a1;
                            acc[2] += a2;
                        }
                        for kx in 0..3 {
                            dwd[wbase + ky * 3 + kx] += acc[kx];
                        }
                    }
                }
            }
        }
    }

    fn forward_generic(
        &self,
        x: &Tensor,
        out: &mut Tensor,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let xin = x.data();
        let wt = self.weight.data();
        let b = self.bias.data();
        let k = self.ksize;
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * oh * ow;
        let odata = out.data_mut();
        for ni in 0..n {
            for co in 0..self.out_ch {
                let obase = ni * ochw + co * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..self.in_ch {
                            let ibase = ni * ichw + ci * h * w;
                            let wbase = ((co * self.in_ch + ci) * k) * k;
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as i64 - self.padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as i64 - self.padding as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += wt[wbase + ky * k + kx]
                                        * xin[ibase + iy as usize * w + ix as usize];
                                }
                            }
                        }
                        odata[obase + oy * ow + ox] = acc;
                    }
                }
            }
        }
    }

    fn dinput_generic(
        &self,
        gout: &Tensor,
        dx: &mut Tensor,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let g = gout.data();
        let wt = self.weight.data();
        let k = self.ksize;
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * oh * ow;
        let dxd = dx.data_mut();
        for ni in 0..n {
            for co in 0..self.out_ch {
                let gbase = ni * ochw + co * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[gbase + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..self.in_ch {
                            let ibase = ni * ichw + ci * h * w;
                            let wbase = ((co * self.in_ch + ci) * k) * k;
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as i64 - self.padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as i64 - self.padding as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    dxd[ibase + iy as usize * w + ix as usize] +=
                                        wt[wbase + ky * k + kx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn dweight_generic(
        &self,
        x: &Tensor,
        gout: &Tensor,
        dw: &mut Tensor,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let xin = x.data();
        let g = gout.data();
        let k = self.ksize;
        let ichw = self.in_ch * h * w;
        let ochw = self.out_ch * oh * ow;
        let dwd = dw.data_mut();
        for ni in 0..n {
            for co in 0..self.out_ch {
                let gbase = ni * ochw + co * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[gbase + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..self.in_ch {
                            let ibase = ni * ichw + ci * h * w;
                            let wbase = ((co * self.in_ch + ci) * k) * k;
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as i64 - self.padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as i64 - self.padding as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    dwd[wbase + ky * k + kx] +=
                                        gv * xin[ibase + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization over [n, c, h, w].
///
/// Training uses biased batch variance and folds batch statistics into the
/// running estimates with `running <- (1 - momentum) * running + momentum *
/// batch`; the running update is deferred to [`BatchNorm2d::commit_running`]
/// so `forward` can take `&self`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub ch: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

/// Activation statistics needed by the backward pass and the running-stat
/// update.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            ch,
            gamma: Tensor::from_vec(&[ch], vec![1.0; ch]).expect("gamma"),
            beta: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::from_vec(&[ch], vec![1.0; ch]).expect("running_var"),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache), NeuralError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.ch {
            return Err(NeuralError::ShapeMismatch {
                context: "BatchNorm2d input".into(),
                expected: vec![0, self.ch, 0, 0],
                got: s.to_vec(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let count = (n * plane) as f64;
        let xd = x.data();

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ci in 0..c {
                    let mut sum = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        sum += xd[base..base + plane].iter().sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for v in &xd[base..base + plane] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq / count;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let (gm, bt) = (self.gamma.data()[ci], self.beta.data()[ci]);
                    for k in base..base + plane {
                        let v = (xd[k] - m) * is;
                        xh[k] = v;
                        od[k] = gm * v + bt;
                    }
                }
            }
        }
        Ok((
            out,
            BnCache {
                xhat,
                mean,
                var,
                inv_std,
                mode,
            },
        ))
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// estimates. No-op for an Eval-mode cache.
    pub fn commit_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn backward(&self, cache: &BnCache, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
        let s = gout.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let count = (n * plane) as f64;
        let g = gout.data();
        let xh = cache.xhat.data();

        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mut dg = 0.0;
            let mut db = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for k in base..base + plane {
                    dg += g[k] * xh[k];
                    db += g[k];
                }
            }
            dgamma.data_mut()[ci] = dg;
            dbeta.data_mut()[ci] = db;
        }

        let mut dx = Tensor::zeros(s);
        let dxd = dx.data_mut();
        match cache.mode {
            Mode::Train => {
                // dx = gamma * inv_std / m * (m*g - sum(g) - xhat * sum(g*xhat))
                for ci in 0..c {
                    let coef = self.gamma.data()[ci] * cache.inv_std[ci] / count;
                    let sg = dbeta.data()[ci];
                    let sgx = dgamma.data()[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for k in base..base + plane {
                            dxd[k] = coef * (count * g[k] - sg - xh[k] * sgx);
                        }
                    }
                }
            }
            Mode::Eval => {
                // Running statistics are constants, so the layer is affine.
                for ci in 0..c {
                    let coef = self.gamma.data()[ci] * cache.inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for k in base..base + plane {
                            dxd[k] = coef * g[k];
                        }
                    }
                }
            }
        }
        (dgamma, dbeta, dx)
    }
}

/// Fully connected layer over [n, in_dim] tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// [out_dim, in_dim]
    pub weight: Tensor,
    /// [out_dim]
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = Tensor::from_vec(
            &[out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )
        .expect("weight");
        let bias = Tensor::from_vec(
            &[out_dim],
            (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("bias");
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NeuralError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(NeuralError::ShapeMismatch {
                context: "Linear input".into(),
                expected: vec![0, self.in_dim],
                got: s.to_vec(),
            });
        }
        let n = s[0];
        let xd = x.data();
        let wd = self.weight.data();
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        let od = out.data_mut();
        for ni in 0..n {
            let xrow = &xd[ni * self.in_dim..(ni + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let wrow = &wd[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias.data()[o];
                for (a, b) in xrow.iter().zip(wrow) {
                    acc += a * b;
                }
                od[ni * self.out_dim + o] = acc;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
        let n = x.shape()[0];
        let xd = x.data();
        let g = gout.data();
        let wd = self.weight.data();
        let mut dw = Tensor::zeros_like(&self.weight);
        let mut db = Tensor::zeros_like(&self.bias);
        let mut dx = Tensor::zeros_like(x);
        {
            let dwd = dw.data_mut();
            let dbd = db.data_mut();
            let dxd = dx.data_mut();
            for ni in 0..n {
                let xrow = &xd[ni * self.in_dim..(ni + 1) * self.in_dim];
                let dxrow = &mut dxd[ni * self.in_dim..(ni + 1) * self.in_dim];
                for o in 0..self.out_dim {
                    let gv = g[ni * self.out_dim + o];
                    dbd[o] += gv;
                    let wrow = &wd[o * self.in_dim..(o + 1) * self.in_dim];
                    let dwrow = &mut dwd[o * self.in_dim..(o + 1) * self.in_dim];
                    for k in 0..self.in_dim {
                        dwrow[k] += gv * xrow[k];
                        dxrow[k] += gv * wrow[k];
                    }
                }
            }
        }
        (dw, db, dx)
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// `y` must be the output of [`relu_forward`]; the zero set of the output
/// identifies the clamped inputs.
pub fn relu_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), gout.shape());
    let mut dx = gout.clone();
    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
        if *yv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut c = Conv2d::new(1, 1, 3, 1, 1, &mut rng());
        c.weight = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        c.bias = Tensor::zeros(&[1]);
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_fast_and_generic_paths_agree() {
        let mut r = rng();
        let c = Conv2d::new(2, 3, 3, 1, 1, &mut r);
        let x = Tensor::from_vec(
            &[2, 2, 5, 7],
            (0..2 * 2 * 5 * 7).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fast = c.forward(&x).unwrap();
        let mut slow = Tensor::zeros(fast.shape());
        c.forward_generic(&x, &mut slow, 2, 5, 7, 5, 7);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let g = Tensor::from_vec(
            fast.shape(),
            (0..fast.numel()).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (dw_f, _, dx_f) = c.backward(&x, &g, true).unwrap();
        let mut dw_s = Tensor::zeros_like(&c.weight);
        c.dweight_generic(&x, &g, &mut dw_s, 2, 5, 7, 5, 7);
        let mut dx_s = Tensor::zeros_like(&x);
        c.dinput_generic(&g, &mut dx_s, 2, 5, 7, 5, 7);
        for (a, b) in dw_f.data().iter().zip(dw_s.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dx_f.unwrap().data().iter().zip(dx_s.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_strided_output_shape() {
        let c = Conv2d::new(1, 8, 3, 3, 0, &mut rng());
        assert_eq!(c.out_hw(128, 40), (42, 13));
        let c2 = Conv2d::new(8, 16, 3, 3, 0, &mut rng());
        assert_eq!(c2.out_hw(42, 13), (14, 4));
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((cache.mean[0] - 2.5).abs() < 1e-12);
        assert!((cache.var[0] - 1.25).abs() < 1e-12);

        bn.commit_running(&cache);
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-12);

        let (y_eval, _) = bn.forward(&x, Mode::Eval).unwrap();
        let expect = (1.0 - 0.25) / (1.025f64 + 1e-5).sqrt();
        assert!((y_eval.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dx = relu_backward(&y, &g);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut l = Linear::new(2, 2, &mut rng());
        l.weight = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        l.bias = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.5, 6.5]);
    }
}
