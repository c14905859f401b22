//! Dense ReLU feedforward networks: representation, evaluation, and manual
//! reverse-mode differentiation.
//!
//! A [`Network`] is an ordered stack of [`DenseLayer`]s with ReLU applied after
//! every layer except the last. The final layer has `K + M` outputs: `K`
//! regular classes followed by `M` abstain (detection) classes. Class labels
//! are 1-based throughout the public API: `1..=K` are regular classes and
//! `K+1..=K+M` are abstain classes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, Matrix};

/// One affine layer: `z ↦ W z + b` with `W` of shape `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weight: Matrix,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::ShapeMismatch {
                context: "DenseLayer::new bias length",
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        if !weight.is_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidNetwork(
                "layer contains non-finite entries".into(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, bias)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    #[inline]
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// `W x + b`
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }
}

/// Feedforward classifier with `K` regular and `M` abstain output classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    num_classes: usize,
    num_abstain: usize,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>, num_classes: usize, num_abstain: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidNetwork("K must be positive".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer dims do not compose: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        let last = layers.last().unwrap().out_dim();
        if last != num_classes + num_abstain {
            return Err(Error::InvalidNetwork(format!(
                "final layer has {last} outputs, expected K + M = {}",
                num_classes + num_abstain
            )));
        }
        Ok(Self {
            layers,
            num_classes,
            num_abstain,
        })
    }

    #[inline]
    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.num_classes + self.num_abstain
    }

    /// Number of regular classes `K`.
    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of abstain classes `M`.
    #[inline]
    pub fn num_abstain(&self) -> usize {
        self.num_abstain
    }

    /// True if the 1-based label denotes an abstain class.
    #[inline]
    pub fn is_abstain(&self, label: usize) -> bool {
        label > self.num_classes && label <= self.output_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Logits `z_L(x)`: affine layers with ReLU after all but the last.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.affine(&z);
            if i < last {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(z)
    }

    /// Forward pass keeping every post-activation (final entry is the logits).
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut z = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.affine(&z);
            if i < last {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            acts.push(z.clone());
        }
        Ok(acts)
    }

    /// 1-based label of the maximal logit; ties break toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?) + 1)
    }

    /// Reverse-mode gradients of `upstreamᵀ z_L(x)` w.r.t. all parameters and the input.
    ///
    /// The ReLU subgradient at exactly 0 is taken as 0.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradient, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "backward upstream",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let acts = self.forward_trace(x)?;
        let mut grad = Gradient::zeros_like(self);
        let mut g = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < self.layers.len() - 1 {
                // post = ReLU(pre); post > 0 ⇔ pre > 0, and the subgradient at 0 is 0.
                for (gv, av) in g.iter_mut().zip(&acts[i]) {
                    if *av <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input: &[f64] = if i == 0 { x } else { &acts[i - 1] };
            for r in 0..layer.out_dim() {
                let gr = g[r];
                grad.biases[i][r] += gr;
                if gr != 0.0 {
                    let row = grad.weights[i].row_mut(r);
                    for (wv, xv) in row.iter_mut().zip(input) {
                        *wv += gr * xv;
                    }
                }
            }
            g = layer.weight().matvec_t(&g);
        }
        Ok((grad, g))
    }

    /// Equivalent network where the `M` abstain outputs are collapsed into a
    /// single abstain class, computing exactly `(z_1, …, z_K, max_m a_m)`.
    ///
    /// Each merge step folds the last two abstain outputs into their max via
    /// `max(a, b) = b + ReLU(a − b)` and costs one extra layer, so M = 2 yields
    /// the (L+1)-layer single-abstain equivalent; larger M chains merges.
    /// Regular logits pass through the new hidden layer as `ReLU(z) − ReLU(−z)`.
    pub fn with_merged_abstains(&self) -> Result<Network> {
        if self.num_abstain < 2 {
            return Err(Error::InvalidConfig(
                "merging abstains requires M >= 2".into(),
            ));
        }
        let mut net = self.clone();
        while net.num_abstain > 1 {
            net = net.merge_last_two_abstains()?;
        }
        Ok(net)
    }

    /// One merge step: collapse the last two abstain outputs into their max,
    /// adding exactly one layer. `max(a, b) = b + ReLU(a − b)`.
    fn merge_last_two_abstains(&self) -> Result<Network> {
        if self.num_abstain < 2 {
            return Err(Error::InvalidConfig("need at least two abstains".into()));
        }
        let k = self.num_classes;
        let m = self.num_abstain;
        let out = k + m;
        let keep = out - 2; // everything except the two merged abstains
        let ia = out - 2;
        let ib = out - 1;

        let last = self.layers.last().unwrap();
        // New hidden layer V acting on the old logits z (before any ReLU):
        // neurons 2j, 2j+1 = ReLU(±z_j) for each kept output j,
        // then ReLU(z_a − z_b), ReLU(z_b), ReLU(−z_b).
        let hidden_dim = 2 * keep + 3;
        let mut v = Matrix::zeros(hidden_dim, out);
        for j in 0..keep {
            v.set(2 * j, j, 1.0);
            v.set(2 * j + 1, j, -1.0);
        }
        v.set(2 * keep, ia, 1.0);
        v.set(2 * keep, ib, -1.0);
        v.set(2 * keep + 1, ib, 1.0);
        v.set(2 * keep + 2, ib, -1.0);

        // Compose V with the old last layer so the old logits are never
        // ReLU-clipped: new hidden weights = V·W_L, bias = V·b_L.
        let mut folded = Matrix::zeros(hidden_dim, last.in_dim());
        let mut folded_bias = vec![0.0; hidden_dim];
        for r in 0..hidden_dim {
            for c in 0..last.in_dim() {
                let mut acc = 0.0;
                for t in 0..out {
                    acc += v.get(r, t) * last.weight().get(t, c);
                }
                folded.set(r, c, acc);
            }
            folded_bias[r] = dot(v.row(r), last.bias());
        }

        // Output layer U: kept outputs j = h_{2j} − h_{2j+1};
        // merged abstain = h_split + h_b⁺ − h_b⁻.
        let new_out = keep + 1;
        let mut u = Matrix::zeros(new_out, hidden_dim);
        for j in 0..keep {
            u.set(j, 2 * j, 1.0);
            u.set(j, 2 * j + 1, -1.0);
        }
        u.set(keep, 2 * keep, 1.0);
        u.set(keep, 2 * keep + 1, 1.0);
        u.set(keep, 2 * keep + 2, -1.0);

        let mut layers: Vec<DenseLayer> = self.layers[..self.layers.len() - 1].to_vec();
        layers.push(DenseLayer::new(folded, folded_bias)?);
        layers.push(DenseLayer::new(u, vec![0.0; new_out])?);
        Network::new(layers, k, m - 1)
    }
}

/// Per-layer parameter gradients mirroring a [`Network`]'s shape.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, c: f64) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.iter_mut().zip(ow.iter()) {
                *a += c * b;
            }
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            for (a, v) in b.iter_mut().zip(ob) {
                *a += c * v;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v *= c;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self
                .biases
                .iter()
                .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkJson {
    layers: Vec<LayerJson>,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
}

/// Serialize a network to the JSON weight format
/// `{"layers":[{"weight":[[...]],"bias":[...]}],"K":…,"M":…}` (row-major).
pub fn network_to_json(net: &Network) -> String {
    let doc = NetworkJson {
        layers: net
            .layers
            .iter()
            .map(|l| LayerJson {
                weight: l.weight().to_rows(),
                bias: l.bias().to_vec(),
            })
            .collect(),
        k: net.num_classes,
        m: net.num_abstain,
    };
    serde_json::to_string(&doc).expect("network serialization cannot fail")
}

/// Parse the JSON weight format, rejecting anything violating [`Network`] invariants.
pub fn network_from_json(text: &str) -> Result<Network> {
    let doc: NetworkJson = serde_json::from_str(text)?;
    let layers = doc
        .layers
        .into_iter()
        .map(|l| DenseLayer::from_rows(l.weight, l.bias))
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, doc.k, doc.m)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(network_to_json(net).as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    network_from_json(&text)
}
