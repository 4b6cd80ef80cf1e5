//! Nested-loop reimplementation of the guidance fusion block.

use latrex::gftb::{gftb_trace, GftbConfig, GftbWeights, GuidanceFusion};
use latrex::params::ParamStore;
use latrex::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[c][y][x]` feature map.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor) -> Map {
    let [_, c, h, w] = t.shape();
    (0..c)
        .map(|ci| {
            (0..h)
                .map(|y| (0..w).map(|x| t.at(0, ci, y, x)).collect())
                .collect()
        })
        .collect()
}

pub fn p<'a>(params: &'a ParamStore, name: &str) -> &'a Tensor {
    params
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

pub fn conv(x: &Map, w: &Tensor, b: &Tensor) -> Map {
    let [co, ci, k, _] = w.shape();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; wd]; h]; co];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(o, i, ky, kx) * x[i][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

pub fn depthwise(x: &Map, w: &Tensor, b: &Tensor) -> Map {
    let (h, wd) = (x[0].len(), x[0][0].len());
    let mut out = x.clone();
    for (c, plane) in out.iter_mut().enumerate() {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[c];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(c, 0, ky, kx) * x[c][iy as usize][ix as usize];
                        }
                    }
                }
                plane[y][xx] = acc;
            }
        }
    }
    out
}

pub fn layer_norm(x: &Map, gamma: &Tensor, beta: &Tensor) -> Map {
    let c = x.len();
    let mut out = x.clone();
    for y in 0..x[0].len() {
        for xx in 0..x[0][0].len() {
            let mu: f64 = (0..c).map(|i| x[i][y][xx]).sum::<f64>() / c as f64;
            let var: f64 = (0..c).map(|i| (x[i][y][xx] - mu).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                out[i][y][xx] =
                    gamma.data()[i] * (x[i][y][xx] - mu) / (var + 1e-5).sqrt() + beta.data()[i];
            }
        }
    }
    out
}

pub fn zip(a: &Map, b: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| {
            pa.iter()
                .zip(pb)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| f(*x, *y)).collect())
                .collect()
        })
        .collect()
}

/// Channel attention; returns the output and the row-stochastic matrices.
pub fn attention(q: &Map, k: &Map, v: &Map, temps: &[f64]) -> (Map, Vec<Vec<f64>>) {
    let heads = temps.len();
    let d = q.len() / heads;
    let (h, w) = (q[0].len(), q[0][0].len());
    let mut out = v.clone();
    let mut mats = Vec::new();
    for (hd, t) in temps.iter().enumerate() {
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += q[hd * d + i][y][x] * k[hd * d + j][y][x];
                    }
                }
                a[i][j] = s / t;
            }
            let m = a[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a[i].iter().map(|l| (l - m).exp()).sum();
            for j in 0..d {
                a[i][j] = (a[i][j] - m).exp() / z;
            }
        }
        for i in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out[hd * d + i][y][x] = (0..d).map(|j| a[i][j] * v[hd * d + j][y][x]).sum();
                }
            }
        }
        mats.push(a);
    }
    (out, mats.into_iter().flatten().collect())
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

pub struct Reference {
    pub out: Map,
    pub y_m: Map,
    pub y_g: Option<Map>,
    pub rows: Vec<Vec<f64>>,
}

pub fn reference(x: &Tensor, guide: Option<&Tensor>, w: &GftbWeights) -> Reference {
    let cfg = w.config();
    let ps = &w.params;
    let f_in = to_map(x);
    let proj = guide
        .filter(|_| cfg.fusion != GuidanceFusion::None)
        .map(|g| {
            conv(
                &to_map(g),
                p(ps, "guide_proj.weight"),
                p(ps, "guide_proj.bias"),
            )
        });
    let mut xn = layer_norm(&f_in, p(ps, "norm1.weight"), p(ps, "norm1.bias"));
    if let (GuidanceFusion::ScaleInput, Some(gf)) = (cfg.fusion, &proj) {
        xn = zip(&xn, gf, |a, b| a * b);
    }
    let q = conv(&xn, p(ps, "q.weight"), p(ps, "q.bias"));
    let k = conv(&xn, p(ps, "k.weight"), p(ps, "k.bias"));
    let mut v = conv(&xn, p(ps, "v.weight"), p(ps, "v.bias"));
    if let (GuidanceFusion::ScaleValue, Some(gf)) = (cfg.fusion, &proj) {
        v = zip(&v, gf, |a, b| a * b);
    }
    let (y_m, mut rows) = attention(&q, &k, &v, p(ps, "temperature").data());
    let y_g = match (cfg.fusion, &proj) {
        (GuidanceFusion::CrossAttention, Some(gf)) => {
            let qg = conv(gf, p(ps, "guide_query.weight"), p(ps, "guide_query.bias"));
            let (y, r) = attention(&qg, &k, &v, p(ps, "guide_temperature").data());
            rows.extend(r);
            Some(y)
        }
        _ => None,
    };
    let mut hres = zip(&f_in, &y_m, |a, b| a + b);
    if let Some(yg) = &y_g {
        hres = zip(&hres, yg, |a, b| a + b);
    }
    let hn = layer_norm(&hres, p(ps, "norm2.weight"), p(ps, "norm2.bias"));
    let u = conv(&hn, p(ps, "ffn_in.weight"), p(ps, "ffn_in.bias"));
    let hidden = u.len() / 2;
    let gated: Map = (0..hidden)
        .map(|i| {
            zip(&vec![u[i].clone()], &vec![u[hidden + i].clone()], |a, b| {
                gelu(a) * b
            })
            .remove(0)
        })
        .collect();
    let z = conv(&gated, p(ps, "ffn_out.weight"), p(ps, "ffn_out.bias"));
    let z = zip(
        &z,
        &depthwise(&z, p(ps, "pos.weight"), p(ps, "pos.bias")),
        |a, b| a + b,
    );
    Reference {
        out: zip(&hres, &z, |a, b| a + b),
        y_m,
        y_g,
        rows,
    }
}

pub fn max_diff(a: &Map, t: &Tensor) -> f64 {
    let b = to_map(t);
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// Block weights with every tensor redrawn at unit scale, so attention is far
/// from uniform; temperatures stay positive.
pub fn weights(c: usize, heads: usize, fusion: GuidanceFusion, seed: u64) -> GftbWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = GftbWeights::init(GftbConfig::new(c, heads, fusion), &mut rng).unwrap();
    let names: Vec<String> = w.params.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(w.params.tensors_mut()) {
        let shape = t.shape();
        *t = if name.contains("temperature") {
            Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.5..2.0))
        } else {
            random(shape, &mut rng, 1.0)
        };
    }
    w
}

/// Block output and attention-probability discrepancies against the loop
/// reference on a random fixture; also returns the largest row-sum error.
pub struct Comparison {
    pub max_abs: f64,
    pub max_prob: f64,
    pub max_row_sum_err: f64,
}

pub fn compare(
    c: usize,
    heads: usize,
    fusion: GuidanceFusion,
    h: usize,
    w: usize,
    seed: u64,
) -> Comparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let wts = weights(c, heads, fusion, seed);
    let x = random([1, c, h, w], &mut rng, 1.0);
    let g = random([1, 1, h, w], &mut rng, 1.0);
    let r = reference(&x, Some(&g), &wts);
    let tr = gftb_trace(&x, Some(&g), &wts).unwrap();
    let mut max_abs = max_diff(&r.y_m, &tr.y_m).max(max_diff(&r.out, &tr.out));
    match (&r.y_g, &tr.y_g) {
        (Some(a), Some(b)) => max_abs = max_abs.max(max_diff(a, b)),
        (None, None) => {}
        _ => max_abs = f64::INFINITY,
    }
    let mut probs = tr.attn_m.clone();
    probs.extend(tr.attn_g.clone().unwrap_or_default());
    let flat: Vec<f64> = r.rows.iter().flatten().copied().collect();
    let max_prob = if probs.len() == flat.len() {
        probs
            .iter()
            .zip(&flat)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let d = c / heads;
    let max_row_sum_err = probs
        .chunks(d)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Comparison {
        max_abs,
        max_prob,
        max_row_sum_err,
    }
}

pub fn check(c: usize, heads: usize, fusion: GuidanceFusion, h: usize, w: usize, seed: u64) {
    let r = compare(c, heads, fusion, h, w, seed);
    assert!(
        r.max_abs < 1e-9,
        "{fusion:?} c={c} heads={heads}: max abs {}",
        r.max_abs
    );
    assert!(
        r.max_prob < 1e-12,
        "{fusion:?} c={c} heads={heads}: prob diff {}",
        r.max_prob
    );
}
