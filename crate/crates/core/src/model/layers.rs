use super::{AnchorVariant, Backbone, ModelSpec, NfaConcat};
use crate::autodiff::{BoundParams, Matrix, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, TaskKind};

/// `D^{-1/2} (A + I) D^{-1/2}` with the diagonal of `A + I` forced to 1, so
/// existing self-loops are not doubled.
pub fn gcn_normalized_adjacency(adj: &Matrix) -> Matrix {
    let n = adj.rows();
    let mut a_hat = adj.clone();
    for i in 0..n {
        a_hat.set(i, i, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a_hat.row(i).iter().sum::<f64>().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a_hat.get(i, j);
            if v != 0.0 {
                a_hat.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    a_hat
}

/// Forward pass of one model recorded on a tape.
pub struct Forward<'a> {
    spec: &'a ModelSpec,
    tape: &'a Tape,
    params: &'a BoundParams,
}

impl<'a> Forward<'a> {
    pub fn new(spec: &'a ModelSpec, tape: &'a Tape, params: &'a BoundParams) -> Self {
        Self { spec, tape, params }
    }

    /// Constant propagation operator for the backbone.
    pub fn propagation(&self, g: &Graph) -> Tensor {
        match self.spec.backbone {
            Backbone::Gcn => self.tape.constant(gcn_normalized_adjacency(&g.adj)),
            Backbone::Gin => self.tape.constant(g.adj.clone()),
        }
    }

    fn linear(&self, prefix: &str, x: Tensor) -> Result<Tensor> {
        let w = self.params.get(&format!("{prefix}.weight"))?;
        let b = self.params.get(&format!("{prefix}.bias"))?;
        let xw = self.tape.matmul(x, w)?;
        self.tape.add(xw, b)
    }

    /// Message-passing layer `i` (1-based).
    pub fn mp_layer(&self, i: usize, x: Tensor, prop: Tensor) -> Result<Tensor> {
        let t = self.tape;
        match self.spec.backbone {
            Backbone::Gcn => {
                let w = self.params.get(&format!("mp.{i}.weight"))?;
                let b = self.params.get(&format!("mp.{i}.bias"))?;
                let xw = t.matmul(x, w)?;
                let agg = t.matmul(prop, xw)?;
                Ok(t.relu(t.add(agg, b)?))
            }
            Backbone::Gin => {
                let eps = self.params.get(&format!("mp.{i}.eps"))?;
                let neigh = t.matmul(prop, x)?;
                let own = t.add(x, t.scale_by(x, eps)?)?;
                let z = t.add(own, neigh)?;
                let h = t.relu(self.linear(&format!("mp.{i}.lin1"), z)?);
                Ok(t.relu(self.linear(&format!("mp.{i}.lin2"), h)?))
            }
        }
    }

    /// Runs layers `from..=to` (empty when `from > to`).
    pub fn mp_layers(&self, from: usize, to: usize, mut x: Tensor, prop: Tensor) -> Result<Tensor> {
        for i in from..=to {
            x = self.mp_layer(i, x, prop)?;
        }
        Ok(x)
    }

    pub fn readout(&self, x: Tensor) -> Result<Tensor> {
        self.tape.row_mean(x)
    }

    pub fn head(&self, mut z: Tensor) -> Result<Tensor> {
        let l = self.spec.mlp_head_layers;
        for j in 0..l {
            z = self.linear(&format!("head.{j}"), z)?;
            if j + 1 < l {
                z = self.tape.relu(z);
            }
        }
        Ok(z)
    }

    fn pool(&self, x: Tensor) -> Result<Tensor> {
        match self.spec.task {
            TaskKind::GraphClassification => self.readout(x),
            TaskKind::NodeClassification => Ok(x),
        }
    }

    /// Deterministic part of the network, up to the anchored representation.
    pub fn prefix(&self, g: &Graph, prop: Tensor) -> Result<Tensor> {
        self.spec.check_graph(g)?;
        let x0 = self.tape.constant(g.x.clone());
        match self.spec.anchoring.variant {
            AnchorVariant::None | AnchorVariant::NodeFeature => Ok(x0),
            AnchorVariant::HiddenLayer(r) => self.mp_layers(1, r - 1, x0, prop),
            AnchorVariant::Readout => {
                let x = self.mp_layers(1, self.spec.num_mp_layers, x0, prop)?;
                self.readout(x)
            }
        }
    }

    /// `[rep - C || C]`, or `[rep - C || rep]` when `second_is_rep`. The
    /// anchor enters as a constant, so no gradient reaches its producer. A
    /// single anchor row is broadcast over `rep`.
    pub fn anchor_concat(&self, rep: Tensor, anchor: &Matrix, second_is_rep: bool) -> Result<Tensor> {
        let t = self.tape;
        if anchor.cols() != rep.cols() || (anchor.rows() != 1 && anchor.rows() != rep.rows()) {
            return Err(Error::shape("anchor", rep.shape(), anchor.shape()));
        }
        let c = t.constant(anchor.broadcast_rows(rep.rows())?);
        let residual = t.sub(rep, c)?;
        t.concat_cols(residual, if second_is_rep { rep } else { c })
    }

    /// Remainder of the network from the representation `rep` returned by
    /// [`Forward::prefix`].
    pub fn suffix(&self, prop: Tensor, rep: Tensor, anchor: Option<&Matrix>) -> Result<Tensor> {
        let variant = self.spec.anchoring.variant;
        let anchor = match (variant, anchor) {
            (AnchorVariant::None, None) => None,
            (AnchorVariant::None, Some(_)) => return Err(Error::input("unanchored model called with an anchor")),
            (_, None) => return Err(Error::input("anchored model called without an anchor")),
            (_, Some(a)) => Some(a),
        };
        let l = self.spec.num_mp_layers;
        let out = match (variant, anchor) {
            (AnchorVariant::NodeFeature, Some(a)) => {
                let keep_input = self.spec.anchoring.nfa_concat == NfaConcat::Original;
                let x = self.anchor_concat(rep, a, keep_input)?;
                let x = self.mp_layers(1, l, x, prop)?;
                self.pool(x)?
            }
            (AnchorVariant::HiddenLayer(r), Some(a)) => {
                let x = self.anchor_concat(rep, a, false)?;
                let x = self.mp_layers(r, l, x, prop)?;
                self.pool(x)?
            }
            (AnchorVariant::Readout, Some(a)) => self.anchor_concat(rep, a, false)?,
            _ => {
                let x = self.mp_layers(1, l, rep, prop)?;
                self.pool(x)?
            }
        };
        self.head(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Params;
    use crate::graph::Labels;
    use crate::model::{init_params, AnchoringMode, Model, ModelSpec};
    use rand::Rng;

    fn spec(backbone: Backbone, layers: usize, d: usize, h: usize) -> ModelSpec {
        ModelSpec {
            backbone,
            num_mp_layers: layers,
            hidden_dim: h,
            mlp_head_layers: 1,
            num_classes: 2,
            task: TaskKind::GraphClassification,
            anchoring: AnchoringMode::none(),
            input_dim: d,
        }
    }

    fn run_layer(spec: &ModelSpec, params: &Params, g: &Graph) -> Matrix {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let f = Forward::new(spec, &tape, &bound);
        let prop = f.propagation(g);
        let x = tape.constant(g.x.clone());
        let y = f.mp_layer(1, x, prop).unwrap();
        tape.value(y)
    }

    fn random_graph(n: usize, d: usize, seed: u64) -> Graph {
        let mut rng = crate::rng::stream(seed, "test-graph");
        let mut adj = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < 0.5 {
                    adj.set(i, j, 1.0);
                    adj.set(j, i, 1.0);
                }
            }
        }
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Graph::new("r", x, adj, Labels::Graph(0)).unwrap()
    }

    #[test]
    fn gcn_isolated_node_is_relu_of_input() {
        let s = spec(Backbone::Gcn, 1, 3, 3);
        let mut p = init_params(&s, 0).unwrap();
        p.insert("mp.1.weight", Matrix::identity(3));
        let x = Matrix::row_vector(vec![-0.5, 0.25, 2.0]);
        let g = Graph::new("i", x, Matrix::zeros(1, 1), Labels::Graph(0)).unwrap();
        assert_eq!(run_layer(&s, &p, &g).data(), &[0.0, 0.25, 2.0]);
    }

    #[test]
    fn gcn_automorphic_pair_gets_identical_rows() {
        let s = spec(Backbone::Gcn, 1, 2, 3);
        let p = init_params(&s, 4).unwrap();
        let x = Matrix::new(2, 2, vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let adj = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = Graph::new("p", x, adj, Labels::Graph(0)).unwrap();
        let y = run_layer(&s, &p, &g);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn gcn_matches_dense_reference() {
        let s = spec(Backbone::Gcn, 1, 3, 4);
        let p = init_params(&s, 9).unwrap();
        let g = random_graph(5, 3, 2);
        // oracle: explicit degree scaling of A + I, evaluated entrywise
        let n = 5;
        let mut a_hat = g.adj.clone();
        for i in 0..n {
            a_hat.set(i, i, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a_hat.get(i, j)).sum()).collect();
        let w = p.get("mp.1.weight").unwrap();
        let mut expected = Matrix::zeros(n, 4);
        for i in 0..n {
            for c in 0..4 {
                let mut acc = 0.0;
                for j in 0..n {
                    let norm = a_hat.get(i, j) / (deg[i] * deg[j]).sqrt();
                    for k in 0..3 {
                        acc += norm * g.x.get(j, k) * w.get(k, c);
                    }
                }
                expected.set(i, c, acc.max(0.0));
            }
        }
        let y = run_layer(&s, &p, &g);
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_loops_are_added_once() {
        let mut adj = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = gcn_normalized_adjacency(&adj);
        adj.set(0, 0, 1.0);
        adj.set(1, 1, 1.0);
        assert_eq!(gcn_normalized_adjacency(&adj), a);
    }

    fn gin_identity_params(s: &ModelSpec) -> Params {
        let mut p = init_params(s, 0).unwrap();
        let d = s.input_dim;
        p.insert("mp.1.lin1.weight", Matrix::identity(d));
        p.insert("mp.1.lin2.weight", Matrix::identity(d));
        p
    }

    #[test]
    fn gin_identity_without_edges_returns_input() {
        let s = spec(Backbone::Gin, 1, 3, 3);
        let p = gin_identity_params(&s);
        let x = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, 1.0, 0.0, 2.5]).unwrap();
        let g = Graph::new("e", x.clone(), Matrix::zeros(2, 2), Labels::Graph(0)).unwrap();
        assert_eq!(run_layer(&s, &p, &g), x);
    }

    #[test]
    fn gin_star_center_sums_leaves() {
        let s = spec(Backbone::Gin, 1, 2, 2);
        let p = gin_identity_params(&s);
        // center 0 with leaves 1..=3
        let x = Matrix::new(4, 2, vec![1.0, 0.0, 0.5, 1.0, 2.0, 0.25, 0.125, 3.0]).unwrap();
        let mut adj = Matrix::zeros(4, 4);
        for leaf in 1..4 {
            adj.set(0, leaf, 1.0);
            adj.set(leaf, 0, 1.0);
        }
        let g = Graph::new("s", x, adj, Labels::Graph(0)).unwrap();
        let y = run_layer(&s, &p, &g);
        // hand sum: own (1, 0) + leaves (0.5+2+0.125, 1+0.25+3)
        assert_eq!(y.row(0), &[1.0 + 2.625, 4.25]);
        // leaf 1: own (0.5, 1) + center (1, 0)
        assert_eq!(y.row(1), &[1.5, 1.0]);
    }

    #[test]
    fn gin_is_permutation_equivariant() {
        let s = spec(Backbone::Gin, 1, 3, 4);
        let p = init_params(&s, 3).unwrap();
        let g = random_graph(6, 3, 8);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = g.x.select_rows(&perm);
        let mut padj = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                padj.set(i, j, g.adj.get(perm[i], perm[j]));
            }
        }
        let pg = Graph::new("p", px, padj, Labels::Graph(0)).unwrap();
        let y = run_layer(&s, &p, &g);
        let py = run_layer(&s, &p, &pg);
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((py.get(i, c) - y.get(pi, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn readout_mean_cases() {
        let tape = Tape::new();
        let single = tape.constant(Matrix::row_vector(vec![1.5, -2.0]));
        assert_eq!(tape.value(tape.row_mean(single).unwrap()).data(), &[1.5, -2.0]);
        let pair = tape.constant(Matrix::new(2, 2, vec![0.3, -4.0, -0.3, 4.0]).unwrap());
        assert_eq!(tape.value(tape.row_mean(pair).unwrap()).data(), &[0.0, 0.0]);

        let mut rng = crate::rng::stream(1, "readout");
        let m = Matrix::new(6, 3, (0..18).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let got = tape.value(tape.row_mean(tape.constant(m.clone())).unwrap());
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..6 {
                s += m.get(r, c);
            }
            assert!((got.get(0, c) - s / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unanchored_forward_is_deterministic() {
        let s = spec(Backbone::Gin, 2, 3, 4);
        let m = Model::init(s, 5).unwrap();
        let g = random_graph(7, 3, 1);
        assert_eq!(m.forward(&g, None).unwrap(), m.forward(&g, None).unwrap());
        assert!(m.forward(&g, Some(&Matrix::zeros(1, 4))).is_err());
    }
}
