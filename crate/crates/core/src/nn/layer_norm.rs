use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array2::ones((1, width))),
            beta: Param::new(Array2::zeros((1, width))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let width = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            *s = inv;
        }
        let mut y = &xhat * &self.gamma.value.row(0);
        y += &self.beta.value.row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let width = dy.ncols() as f64;
        {
            let mut dg = self.gamma.grad.row_mut(0);
            dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
            let mut db = self.beta.grad.row_mut(0);
            db += &dy.sum_axis(Axis(0));
        }
        let dxhat = &dy * &self.gamma.value.row(0);
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &inv| {
                let sum_g = g.sum();
                let sum_gx = g.dot(&xh);
                Zip::from(&mut out)
                    .and(&g)
                    .and(&xh)
                    .for_each(|o, &gi, &xi| {
                        *o = inv / width * (width * gi - sum_g - xi * sum_gx);
                    });
            });
        dx
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}
