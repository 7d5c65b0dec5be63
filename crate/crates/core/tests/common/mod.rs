//! Oracles shared by the integration tests and the acceptance suite. They are
//! written against plain scalars and pixel loops, not the library's tensors.
#![allow(dead_code)]

use futureseg::convlstm::ConvLstmParams;
use futureseg::data::SegMap;
use futureseg::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct Scalar {
    w_fi: f64,
    w_ff: f64,
    w_fc: f64,
    w_fo: f64,
    w_hi: f64,
    w_hf: f64,
    w_hc: f64,
    w_ho: f64,
    w_ci: f64,
    w_cf: f64,
    w_co: f64,
    b_i: f64,
    b_f: f64,
    b_c: f64,
    b_o: f64,
}

fn sigma(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Scalar {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut u = || rng.random_range(-2.0..2.0);
        Scalar {
            w_fi: u(),
            w_ff: u(),
            w_fc: u(),
            w_fo: u(),
            w_hi: u(),
            w_hf: u(),
            w_hc: u(),
            w_ho: u(),
            w_ci: u(),
            w_cf: u(),
            w_co: u(),
            b_i: u(),
            b_f: u(),
            b_c: u(),
            b_o: u(),
        }
    }

    /// `(h, c)` after one step from `(h, c)` with input `x`.
    pub fn step(&self, x: f64, h: f64, c: f64) -> (f64, f64) {
        let i = sigma(self.w_fi * x + self.w_hi * h + self.w_ci * c + self.b_i);
        let f = sigma(self.w_ff * x + self.w_hf * h + self.w_cf * c + self.b_f);
        let c_new = f * c + i * (self.w_fc * x + self.w_hc * h + self.b_c).tanh();
        let o = sigma(self.w_fo * x + self.w_ho * h + self.w_co * c_new + self.b_o);
        (o * c_new.tanh(), c_new)
    }

    pub fn as_params(&self) -> ConvLstmParams<Tensor<f64>> {
        let t = |v: f64| Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap();
        ConvLstmParams {
            w_fi: t(self.w_fi),
            w_ff: t(self.w_ff),
            w_fc: t(self.w_fc),
            w_fo: t(self.w_fo),
            w_hi: t(self.w_hi),
            w_hf: t(self.w_hf),
            w_hc: t(self.w_hc),
            w_ho: t(self.w_ho),
            w_ci: t(self.w_ci),
            w_cf: t(self.w_cf),
            w_co: t(self.w_co),
            b_i: t(self.b_i),
            b_f: t(self.b_f),
            b_c: t(self.b_c),
            b_o: t(self.b_o),
        }
    }
}

/// Per-class IoU by direct counting; `None` for classes in neither map.
pub fn brute_force(preds: &[SegMap], gts: &[SegMap], k: u8) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..k {
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for y in 0..p.height() {
                for x in 0..p.width() {
                    let (a, b) = (p.get(y, x) == c, g.get(y, x) == c);
                    inter += u64::from(a && b);
                    union += u64::from(a || b);
                }
            }
        }
        ious.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    (ious, miou)
}

