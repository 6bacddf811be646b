use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Frame, ScoreProvider};
use crate::error::{Error, Result};
use crate::geometry::{add, dist_sq, scale, sub, NeighborIndex, Point3};
use crate::nn::{Graph, Linear, Mlp, ModelParams, Tensor, Var};

/// Raw coordinates plus sin/cos at four frequencies per axis.
pub const POSITION_ENCODING_DIM: usize = 3 + 3 * 2 * FREQUENCIES;
/// sin/cos of the timestep ratio at four frequencies.
pub const TIME_EMBEDDING_DIM: usize = 2 * FREQUENCIES;
const FREQUENCIES: usize = 4;

/// How the features of the current cloud and the original noisy cloud are
/// combined before gradient prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureFusion {
    /// Position- and timestep-conditioned gating of both feature sets.
    #[default]
    Fused,
    /// Original cloud features only.
    Original,
    /// Current cloud features only.
    Current,
    /// Plain average of both.
    Mean,
}

impl FromStr for FeatureFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "FT" => Ok(Self::Original),
            "Ft" => Ok(Self::Current),
            "Fmean" => Ok(Self::Mean),
            _ => Err(Error::invalid(format!(
                "unknown feature fusion `{s}` (expected fused, FT, Ft or Fmean)"
            ))),
        }
    }
}

impl fmt::Display for FeatureFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::Original => "FT",
            Self::Current => "Ft",
            Self::Mean => "Fmean",
        })
    }
}

/// How the gradient candidates from neighbouring points are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientFusion {
    /// Softmax over the predicted importance logits.
    #[default]
    Weighted,
    /// Arithmetic mean.
    Const,
    /// Only the point's own prediction (k = 1).
    Nearest,
}

impl FromStr for GradientFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "const" => Ok(Self::Const),
            "k1" => Ok(Self::Nearest),
            _ => Err(Error::invalid(format!(
                "unknown gradient fusion `{s}` (expected weighted, const or k1)"
            ))),
        }
    }
}

impl fmt::Display for GradientFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Const => "const",
            Self::Nearest => "k1",
        })
    }
}

/// Merges gradient candidates `gs` with importance logits `ws`. In
/// [`GradientFusion::Nearest`] mode the first candidate is taken to be the
/// point's own.
pub fn fuse_gradients(gs: &[Point3], ws: &[f64], mode: GradientFusion) -> Result<Point3> {
    if gs.is_empty() || gs.len() != ws.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty gradients and weights, got {} and {}",
            gs.len(),
            ws.len()
        )));
    }
    let weights: Vec<f64> = match mode {
        GradientFusion::Nearest => return Ok(gs[0]),
        GradientFusion::Const => vec![1.0 / gs.len() as f64; gs.len()],
        GradientFusion::Weighted => {
            let max = ws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = ws.iter().map(|w| (w - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        }
    };
    let mut out = [0.0; 3];
    for (g, w) in gs.iter().zip(weights) {
        for a in 0..3 {
            out[a] += w * g[a];
        }
    }
    Ok(out)
}

/// Architecture hyperparameters, stored in the checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetHyper {
    pub width: usize,
    pub graph_layers: usize,
    pub graph_k: usize,
    pub fusion_k: usize,
    pub residual_blocks: usize,
    pub feature_fusion: FeatureFusion,
    pub gradient_fusion: GradientFusion,
}

impl Default for NetHyper {
    fn default() -> Self {
        Self {
            width: 32,
            graph_layers: 3,
            graph_k: 16,
            fusion_k: 32,
            residual_blocks: 4,
            feature_fusion: FeatureFusion::Fused,
            gradient_fusion: GradientFusion::Weighted,
        }
    }
}

impl NetHyper {
    pub fn to_header(&self) -> String {
        format!(
            "width = {}\ngraph_layers = {}\ngraph_k = {}\nfusion_k = {}\nresidual_blocks = {}\n\
             feature_fusion = {}\ngradient_fusion = {}\n\
             position_encoding = xyz + sin/cos(2^f pi/2 x), f = 0..{}\n\
             time_embedding = sin/cos(2^f pi/2 t/t_start), f = 0..{}\n",
            self.width,
            self.graph_layers,
            self.graph_k,
            self.fusion_k,
            self.residual_blocks,
            self.feature_fusion,
            self.gradient_fusion,
            FREQUENCIES - 1,
            FREQUENCIES - 1,
        )
    }

    /// Parses the `key = value` lines written by [`to_header`](Self::to_header);
    /// unknown keys are ignored, missing ones keep their defaults.
    pub fn from_header(header: &str) -> Result<Self> {
        let mut h = Self::default();
        for line in header.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            let (key, value) = (key.trim(), value.trim());
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("checkpoint header: bad value for {key}: `{value}`")))
            };
            match key {
                "width" => h.width = int()?,
                "graph_layers" => h.graph_layers = int()?,
                "graph_k" => h.graph_k = int()?,
                "fusion_k" => h.fusion_k = int()?,
                "residual_blocks" => h.residual_blocks = int()?,
                "feature_fusion" => h.feature_fusion = value.parse()?,
                "gradient_fusion" => h.gradient_fusion = value.parse()?,
                _ => {}
            }
        }
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.graph_layers == 0 || self.graph_k == 0 || self.fusion_k == 0 {
            return Err(Error::invalid(format!("network sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Neighbours merged per point by gradient fusion.
    pub fn effective_fusion_k(&self) -> usize {
        match self.gradient_fusion {
            GradientFusion::Nearest => 1,
            _ => self.fusion_k,
        }
    }
}

#[derive(Debug, Clone)]
struct Layers {
    conv: Vec<Linear>,
    encode_out: Linear,
    embed: Mlp,
    gate_current: Mlp,
    gate_original: Mlp,
    fuse_out: Mlp,
    grad_in: Linear,
    blocks: Vec<(Linear, Linear)>,
    grad_out: Linear,
}

impl Layers {
    fn build(hyper: &NetHyper, params: &mut ModelParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hyper.width;
        let mut conv = Vec::with_capacity(hyper.graph_layers);
        for l in 0..hyper.graph_layers {
            let c_in = if l == 0 { 3 } else { d };
            conv.push(Linear::new(params, &format!("encode.conv{l}"), 2 * c_in, d, &mut rng)?);
        }
        let encode_out = Linear::new(params, "encode.out", hyper.graph_layers * d, d, &mut rng)?;
        let e_in = POSITION_ENCODING_DIM + TIME_EMBEDDING_DIM;
        let embed = Mlp::new(params, "fuse.embed", &[e_in, d, d, d], &mut rng)?;
        let gate_current = Mlp::new(params, "fuse.gate_current", &[2 * d, d, d, d], &mut rng)?;
        let gate_original = Mlp::new(params, "fuse.gate_original", &[2 * d, d, d, d], &mut rng)?;
        let fuse_out = Mlp::new(params, "fuse.out", &[d, d, d, d], &mut rng)?;
        let grad_in = Linear::new(params, "grad.in", 3 + d, d, &mut rng)?;
        let mut blocks = Vec::with_capacity(hyper.residual_blocks);
        for b in 0..hyper.residual_blocks {
            blocks.push((
                Linear::new(params, &format!("grad.block{b}.0"), d, d, &mut rng)?,
                Linear::with_gain(params, &format!("grad.block{b}.1"), d, d, 0.5, &mut rng)?,
            ));
        }
        // small initial outputs keep early scores near the scale of real noise
        let grad_out = Linear::with_gain(params, "grad.out", d, 4, 0.1, &mut rng)?;
        Ok(Self {
            conv,
            encode_out,
            embed,
            gate_current,
            gate_original,
            fuse_out,
            grad_in,
            blocks,
            grad_out,
        })
    }
}

/// The learned score network: dynamic graph-convolution features for both
/// clouds, conditioned fusion, a residual gradient predictor, and fusion of
/// the gradient candidates of each point's neighbours.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    hyper: NetHyper,
    layers: Layers,
    params: ModelParams,
}

impl ScoreNet {
    pub fn new(hyper: NetHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut params = ModelParams::new();
        let layers = Layers::build(&hyper, &mut params, seed)?;
        Ok(Self { hyper, layers, params })
    }

    /// Wraps existing parameters, checking names and shapes against `hyper`.
    pub fn from_params(hyper: NetHyper, params: ModelParams) -> Result<Self> {
        let template = Self::new(hyper, 0)?;
        let compatible = template.params.len() == params.len()
            && template.params.ids().all(|id| {
                template.params.name(id) == params.name(id) && template.params.get(id).shape() == params.get(id).shape()
            });
        if !compatible {
            return Err(Error::invalid("parameters do not match the network hyperparameters"));
        }
        Ok(Self {
            hyper,
            layers: template.layers,
            params,
        })
    }

    pub fn hyper(&self) -> &NetHyper {
        &self.hyper
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Switches the ablation modes, which do not change the parameter set.
    pub fn set_modes(&mut self, feature: FeatureFusion, gradient: GradientFusion) {
        self.hyper.feature_fusion = feature;
        self.hyper.gradient_fusion = gradient;
    }

    pub fn set_fusion_k(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("fusion k must be positive"));
        }
        self.hyper.fusion_k = k;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, extra_header: &str, w: &mut W) -> std::io::Result<()> {
        let header = format!("{}{}", self.hyper.to_header(), extra_header);
        self.params.write_checkpoint(&header, w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let (params, header) = ModelParams::read_checkpoint(r)?;
        Self::from_params(NetHyper::from_header(&header)?, params)
    }

    /// One edge-convolution layer: for each point, `[f_i, f_j - f_i]` over its
    /// `k` listed neighbours, a shared linear map with ReLU, then max-pooling.
    pub fn edge_conv(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        layer: usize,
        feats: Var,
        neighbors: &[usize],
    ) -> Result<Var> {
        let n = g.value(feats).rows();
        if n == 0 || !neighbors.len().is_multiple_of(n) {
            return Err(Error::invalid(format!("{} neighbour indices for {n} points", neighbors.len())));
        }
        let k = neighbors.len() / n;
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let ctr = g.gather(feats, &centers)?;
        let nb = g.gather(feats, neighbors)?;
        let diff = g.sub(nb, ctr)?;
        let edge = g.concat(&[ctr, diff])?;
        let conv = self
            .layers
            .conv
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no edge-conv layer {layer}")))?;
        let h = conv.forward(g, params, edge)?;
        let h = g.relu(h)?;
        g.group_max(h, k)
    }

    /// Per-point features of `points`: edge convolutions whose neighbourhoods
    /// are recomputed in each layer's input space, concatenated and projected
    /// to `width` channels.
    pub fn extract_features(&self, g: &mut Graph, params: &ModelParams, points: &[Point3]) -> Result<Var> {
        let k = self.hyper.graph_k;
        if points.len() < k {
            return Err(Error::invalid(format!(
                "cloud of {} points is smaller than the graph k = {k}",
                points.len()
            )));
        }
        let coords = g.constant(points_tensor(points));
        let index = NeighborIndex::from_points(points.to_vec());
        let mut neighbors: Vec<usize> = index.knn_batch(points, k)?.concat();
        let mut feats = coords;
        let mut outputs = Vec::with_capacity(self.layers.conv.len());
        for l in 0..self.layers.conv.len() {
            if l > 0 {
                neighbors = feature_knn(g.value(feats), k);
            }
            feats = self.edge_conv(g, params, l, feats, &neighbors)?;
            outputs.push(feats);
        }
        let all = g.concat(&outputs)?;
        self.layers.encode_out.forward(g, params, all)
    }

    /// Blends the current-cloud and original-cloud features according to the
    /// configured [`FeatureFusion`] mode.
    pub fn fuse_features(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        current: &[Point3],
        ratio: f64,
        feat_current: Var,
        feat_original: Var,
    ) -> Result<Var> {
        let (n_c, n_o) = (g.value(feat_current).rows(), g.value(feat_original).rows());
        if n_c != current.len() || n_o != current.len() {
            return Err(Error::invalid(format!(
                "feature rows ({n_c}, {n_o}) do not match {} points",
                current.len()
            )));
        }
        let l = &self.layers;
        let mixed = match self.hyper.feature_fusion {
            FeatureFusion::Fused => {
                let e = g.constant(embedding(current, ratio));
                let e = l.embed.forward(g, params, e)?;
                let in_c = g.concat(&[feat_current, e])?;
                let w_c = l.gate_current.forward(g, params, in_c)?;
                let in_o = g.concat(&[feat_original, e])?;
                let w_o = l.gate_original.forward(g, params, in_o)?;
                let a = g.mul(feat_current, w_c)?;
                let b = g.mul(feat_original, w_o)?;
                g.add(a, b)?
            }
            FeatureFusion::Original => feat_original,
            FeatureFusion::Current => feat_current,
            FeatureFusion::Mean => {
                let s = g.add(feat_current, feat_original)?;
                g.scale(s, 0.5)?
            }
        };
        l.fuse_out.forward(g, params, mixed)
    }

    /// Residual predictor over rows of `[v - x_i, F_i]`; returns `[m, 4]`
    /// with the gradient in columns 0..3 and the importance logit in column 3.
    pub fn predict_gradients(&self, g: &mut Graph, params: &ModelParams, rel: Var, feats: Var) -> Result<Var> {
        let input = g.concat(&[rel, feats])?;
        let mut h = self.layers.grad_in.forward(g, params, input)?;
        for (a, b) in &self.layers.blocks {
            let r = g.relu(h)?;
            let r = a.forward(g, params, r)?;
            let r = g.relu(r)?;
            let r = b.forward(g, params, r)?;
            h = g.add(h, r)?;
        }
        let h = g.relu(h)?;
        self.layers.grad_out.forward(g, params, h)
    }

    /// Gradient and importance logit for query `v` from neighbour `x_i` with
    /// fused feature `f_i`.
    pub fn predict_gradient(&self, v: Point3, x_i: Point3, f_i: &[f64]) -> Result<(Point3, f64)> {
        let mut g = Graph::new();
        let rel = g.constant(points_tensor(&[sub(v, x_i)]));
        let f = g.constant(Tensor::matrix(1, f_i.len(), f_i.to_vec())?);
        let out = self.predict_gradients(&mut g, &self.params, rel, f)?;
        let o = g.value(out).row(0);
        Ok(([o[0], o[1], o[2]], o[3]))
    }

    /// Scores `[n, 3]` for `current` given the index-aligned `original`
    /// cloud and the timestep ratio `t / t_start`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        current: &[Point3],
        original: &[Point3],
        ratio: f64,
    ) -> Result<Var> {
        let n = current.len();
        if original.len() != n {
            return Err(Error::invalid(format!(
                "current ({n}) and original ({}) clouds differ in size",
                original.len()
            )));
        }
        let k = self.hyper.effective_fusion_k();
        if n < k {
            return Err(Error::invalid(format!("patch of {n} points is smaller than the fusion k = {k}")));
        }
        let (center, radius) = patch_frame(original);
        let to_local = |pts: &[Point3]| -> Vec<Point3> { pts.iter().map(|p| scale(sub(*p, center), 1.0 / radius)).collect() };
        let (current, original) = (&to_local(current)[..], &to_local(original)[..]);
        let feat_c = self.extract_features(g, params, current)?;
        let feat_o = self.extract_features(g, params, original)?;
        let fused = self.fuse_features(g, params, current, ratio, feat_c, feat_o)?;

        let index = NeighborIndex::from_points(current.to_vec());
        let neighbors = index.knn_batch(current, k)?;
        let mut rel = Vec::with_capacity(n * k * 3);
        for (v, nb) in current.iter().zip(&neighbors) {
            for &i in nb {
                rel.extend_from_slice(&sub(*v, current[i]));
            }
        }
        let rel = g.constant(Tensor::matrix(n * k, 3, rel)?);
        let f = g.gather(fused, &neighbors.concat())?;
        let out = self.predict_gradients(g, params, rel, f)?;
        let grads = g.slice_cols(out, 0, 3)?;
        let fused = match self.hyper.gradient_fusion {
            GradientFusion::Nearest => grads,
            GradientFusion::Const => {
                let s = g.group_sum(grads, k)?;
                g.scale(s, 1.0 / k as f64)?
            }
            GradientFusion::Weighted => {
                let logits = g.slice_cols(out, 3, 4)?;
                let logits = g.reshape(logits, n, k)?;
                let w = g.softmax(logits)?;
                let w = g.reshape(w, n * k, 1)?;
                let weighted = g.mul_col(grads, w)?;
                g.group_sum(weighted, k)?
            }
        };
        g.scale(fused, radius)
    }

    /// Inference-only evaluation of [`forward`](Self::forward).
    pub fn predict(&self, current: &[Point3], original: &[Point3], ratio: f64) -> Result<Vec<Point3>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.params, current, original, ratio)?;
        Ok(tensor_points(g.value(out)))
    }
}

impl ScoreProvider for ScoreNet {
    fn scores(
        &self,
        current: &[Point3],
        original: &[Point3],
        t: usize,
        t_start: usize,
        _frame: Frame,
    ) -> Result<Vec<Point3>> {
        self.predict(current, original, timestep_ratio(t, t_start))
    }
}

/// Centroid and RMS radius of `points`; the network works in the patch
/// coordinates `(p - centroid) / radius` and scales its scores back. A
/// degenerate patch gets radius 1.
pub fn patch_frame(points: &[Point3]) -> (Point3, f64) {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    let c = scale(c, 1.0 / n);
    let r = (points.iter().map(|p| dist_sq(*p, c)).sum::<f64>() / n).sqrt();
    (c, if r > 1e-12 { r } else { 1.0 })
}

/// `t / t_start`, or 1 when both are zero.
pub(crate) fn timestep_ratio(t: usize, t_start: usize) -> f64 {
    if t_start == 0 {
        1.0
    } else {
        t as f64 / t_start as f64
    }
}

pub(crate) fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::matrix(points.len(), 3, points.iter().flatten().copied().collect()).expect("3 columns per point")
}

pub(crate) fn tensor_points(t: &Tensor) -> Vec<Point3> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect()
}

/// Positional encoding of each point concatenated with the timestep
/// embedding: `[n, POSITION_ENCODING_DIM + TIME_EMBEDDING_DIM]`.
fn embedding(points: &[Point3], ratio: f64) -> Tensor {
    let width = POSITION_ENCODING_DIM + TIME_EMBEDDING_DIM;
    let mut data = Vec::with_capacity(points.len() * width);
    let omega = |f: usize| FRAC_PI_2 * (1u32 << f) as f64;
    for p in points {
        data.extend_from_slice(p);
        for &x in p {
            for f in 0..FREQUENCIES {
                let (s, c) = (omega(f) * x).sin_cos();
                data.extend([s, c]);
            }
        }
        for f in 0..FREQUENCIES {
            let (s, c) = (omega(f) * ratio).sin_cos();
            data.extend([s, c]);
        }
    }
    Tensor::matrix(points.len(), width, data).expect("embedding width")
}

/// Exact kNN between the rows of `t` (self included), ties by lowest index.
fn feature_knn(t: &Tensor, k: usize) -> Vec<usize> {
    let n = t.rows();
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let a = t.row(i);
        cand.clear();
        cand.extend((0..n).map(|j| {
            let d: f64 = a.iter().zip(t.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            (d, j)
        }));
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|c| c.1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use rand::Rng;

    fn small_hyper() -> NetHyper {
        NetHyper {
            width: 6,
            graph_layers: 2,
            graph_k: 4,
            fusion_k: 5,
            residual_blocks: 2,
            ..NetHyper::default()
        }
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect()
    }

    #[test]
    fn fuse_gradients_closed_forms() {
        let g1 = [3.0, 0.0, -3.0];
        let g2 = [0.0, 3.0, 6.0];
        let w = fuse_gradients(&[g1, g2], &[2f64.ln(), 0.0], GradientFusion::Weighted).unwrap();
        let expect = [2.0, 1.0, 0.0];
        for a in 0..3 {
            assert!((w[a] - expect[a]).abs() < 1e-12);
        }
        let mid = fuse_gradients(&[g1, g2], &[0.3, 0.3], GradientFusion::Weighted).unwrap();
        assert_eq!(mid, [1.5, 1.5, 1.5]);
        let same = fuse_gradients(&[g1, g1, g1], &[5.0, -1.0, 0.2], GradientFusion::Weighted).unwrap();
        for a in 0..3 {
            assert!((same[a] - g1[a]).abs() < 1e-12);
        }
        assert_eq!(fuse_gradients(&[g1, g2], &[9.0, 0.0], GradientFusion::Nearest).unwrap(), g1);
        assert_eq!(fuse_gradients(&[g1, g2], &[9.0, 0.0], GradientFusion::Const).unwrap(), mid);
        assert!(fuse_gradients(&[], &[], GradientFusion::Weighted).is_err());
    }

    #[test]
    fn header_round_trip() {
        let h = NetHyper {
            feature_fusion: FeatureFusion::Mean,
            gradient_fusion: GradientFusion::Nearest,
            ..small_hyper()
        };
        assert_eq!(NetHyper::from_header(&h.to_header()).unwrap(), h);
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ScoreNet::new(small_hyper(), 9).unwrap();
        let x = random_cloud(&mut rng, 12);
        let mut buf = Vec::new();
        net.write_checkpoint("", &mut buf).unwrap();
        let back = ScoreNet::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(net.predict(&x, &x, 1.0).unwrap(), back.predict(&x, &x, 1.0).unwrap());
    }

    #[test]
    fn features_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ScoreNet::new(small_hyper(), 1).unwrap();
        let x = random_cloud(&mut rng, 10);
        let perm = [3, 7, 0, 9, 1, 2, 8, 4, 6, 5];
        let y: Vec<Point3> = perm.iter().map(|&i| x[i]).collect();
        let mut g = Graph::new();
        let fx = net.extract_features(&mut g, net.params(), &x).unwrap();
        let fy = net.extract_features(&mut g, net.params(), &y).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in g.value(fy).row(r).iter().zip(g.value(fx).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_points_get_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ScoreNet::new(small_hyper(), 1).unwrap();
        let mut x = random_cloud(&mut rng, 9);
        x.push(x[2]);
        let mut g = Graph::new();
        let f = net.extract_features(&mut g, net.params(), &x).unwrap();
        assert_eq!(g.value(f).row(2), g.value(f).row(9));
    }

    #[test]
    fn scores_follow_similarity_transforms_of_the_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = ScoreNet::new(small_hyper(), 4).unwrap();
        let x = random_cloud(&mut rng, 12);
        let o = random_cloud(&mut rng, 12);
        let (c, s) = ([0.3, -1.0, 2.0], 0.05);
        let moved = |pts: &[Point3]| -> Vec<Point3> { pts.iter().map(|p| add(scale(*p, s), c)).collect() };
        let base = net.predict(&x, &o, 0.7).unwrap();
        let after = net.predict(&moved(&x), &moved(&o), 0.7).unwrap();
        for (a, b) in base.iter().zip(&after) {
            for i in 0..3 {
                assert!((a[i] * s - b[i]).abs() < 1e-9 * s, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn patch_frame_by_hand() {
        let (c, r) = patch_frame(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]]);
        assert_eq!(c, [0.0; 3]);
        assert!((r - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(patch_frame(&[[4.0; 3]; 3]), ([4.0; 3], 1.0));
    }

    #[test]
    fn too_small_cloud_is_rejected() {
        let net = ScoreNet::new(small_hyper(), 1).unwrap();
        let x = vec![[0.0; 3]; 3];
        assert!(net.predict(&x, &x, 1.0).is_err());
    }

    #[test]
    fn timestep_embedding_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ScoreNet::new(small_hyper(), 2).unwrap();
        let x = random_cloud(&mut rng, 12);
        let y = random_cloud(&mut rng, 12);
        assert_ne!(net.predict(&x, &y, 1.0).unwrap(), net.predict(&x, &y, 0.4).unwrap());
    }

    #[test]
    fn predictor_sees_only_relative_coordinates() {
        let net = ScoreNet::new(small_hyper(), 3).unwrap();
        let f = [0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let a = net.predict_gradient([0.1, 0.2, 0.3], [0.0, 0.1, 0.1], &f).unwrap();
        let b = net.predict_gradient([5.1, -3.8, 2.3], [5.0, -3.9, 2.1], &f).unwrap();
        for i in 0..3 {
            assert!((a.0[i] - b.0[i]).abs() < 1e-12);
        }
        assert!((a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn modes_do_not_alias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = ScoreNet::new(small_hyper(), 4).unwrap();
        let x = random_cloud(&mut rng, 12);
        let y = random_cloud(&mut rng, 12);
        let mut outs = Vec::new();
        for ff in [FeatureFusion::Fused, FeatureFusion::Original, FeatureFusion::Current, FeatureFusion::Mean] {
            for gf in [GradientFusion::Weighted, GradientFusion::Const, GradientFusion::Nearest] {
                let mut net = base.clone();
                net.set_modes(ff, gf);
                outs.push(net.predict(&x, &y, 0.5).unwrap());
            }
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i], outs[j], "modes {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn single_branch_modes_agree_on_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = ScoreNet::new(small_hyper(), 5).unwrap();
        let x = random_cloud(&mut rng, 12);
        net.set_modes(FeatureFusion::Original, GradientFusion::Weighted);
        let a = net.predict(&x, &x, 1.0).unwrap();
        net.set_modes(FeatureFusion::Current, GradientFusion::Weighted);
        let b = net.predict(&x, &x, 1.0).unwrap();
        net.set_modes(FeatureFusion::Mean, GradientFusion::Weighted);
        let c = net.predict(&x, &x, 1.0).unwrap();
        assert_eq!(a, b);
        for (p, q) in a.iter().zip(&c) {
            for i in 0..3 {
                assert!((p[i] - q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ScoreNet::new(small_hyper(), 6).unwrap();
        let x = random_cloud(&mut rng, 10);
        let y = random_cloud(&mut rng, 10);
        let target = points_tensor(&random_cloud(&mut rng, 10));
        let report = check_gradients(net.params(), 1e-5, 1e-8, |g, p| {
            let s = net.forward(g, p, &x, &y, 0.7)?;
            let t = g.constant(target.clone());
            g.mse(s, t)
        })
        .unwrap();
        assert!(report.checked > report.skipped_kinks * 10, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
