//! Small pre-norm transformer encoder whose query and value projections
//! carry adapters. Everything except the adapters and the task head is
//! frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterBank, AdapterConfig, BankVars, ProjectionType};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::task::{Example, Target};
use crate::tensor::{Scalar, Tensor};

/// Output head on top of the mean-pooled sequence representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "classes")]
pub enum TaskHead {
    Classification(usize),
    Regression,
}

impl TaskHead {
    pub fn outputs(self) -> usize {
        match self {
            TaskHead::Classification(k) => k,
            TaskHead::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub task_head: TaskHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 64,
            max_seq_len: 32,
            task_head: TaskHead::Classification(2),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("must divide model_dim ({})", self.model_dim),
            ));
        }
        if let TaskHead::Classification(k) = self.task_head {
            if k < 2 {
                return Err(Error::config("num_classes", "need at least two classes"));
            }
        }
        Ok(())
    }
}

/// Frozen weights of one encoder block.
#[derive(Clone, Debug)]
pub struct BlockWeights<T: Scalar = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    /// Projections stored input-major (d_in × d_out), applied as `x · W`.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
}

/// All non-adapter, non-head weights.
#[derive(Clone, Debug)]
pub struct FrozenBase<T: Scalar = f32> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

impl<T: Scalar> FrozenBase<T> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        let proj = 1.0 / (d as f64).sqrt();
        let token_embedding = Tensor::randn(&[cfg.vocab_size, d], 1.0, rng);
        let position_embedding = Tensor::randn(&[cfg.max_seq_len, d], 0.5, rng);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockWeights {
                ln1_gamma: Tensor::full(&[d], T::one()),
                ln1_beta: Tensor::zeros(&[d]),
                w_q: Tensor::randn(&[d, d], proj, rng),
                w_k: Tensor::randn(&[d, d], proj, rng),
                w_v: Tensor::randn(&[d, d], proj, rng),
                w_o: Tensor::randn(&[d, d], proj, rng),
                ln2_gamma: Tensor::full(&[d], T::one()),
                ln2_beta: Tensor::zeros(&[d]),
                w_1: Tensor::randn(&[d, f], proj, rng),
                b_1: Tensor::zeros(&[f]),
                w_2: Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt(), rng),
                b_2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gamma: Tensor::full(&[d], T::one()),
            final_beta: Tensor::zeros(&[d]),
        }
    }

    /// Every frozen tensor under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("base.tok".to_string(), &self.token_embedding),
            ("base.pos".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let parts: [(&str, &Tensor<T>); 12] = [
                ("ln1_g", &b.ln1_gamma),
                ("ln1_b", &b.ln1_beta),
                ("wq", &b.w_q),
                ("wk", &b.w_k),
                ("wv", &b.w_v),
                ("wo", &b.w_o),
                ("ln2_g", &b.ln2_gamma),
                ("ln2_b", &b.ln2_beta),
                ("w1", &b.w_1),
                ("b1", &b.b_1),
                ("w2", &b.w_2),
                ("b2", &b.b_2),
            ];
            out.extend(parts.into_iter().map(|(n, t)| (format!("base.{i}.{n}"), t)));
        }
        out.push(("base.lnf_g".into(), &self.final_gamma));
        out.push(("base.lnf_b".into(), &self.final_beta));
        out
    }

    /// SHA-256 over names, shapes and little-endian values of every tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph handles for one forward pass.
#[derive(Debug)]
pub struct Bound {
    banks: Vec<BankVars>,
    head_w: Var,
    head_b: Var,
}

struct BlockVars {
    ln1: (Var, Var),
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2: (Var, Var),
    w_1: Var,
    b_1: Var,
    w_2: Var,
    b_2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bind {
    /// Adapters and head as trainable leaves.
    Train,
    /// Everything constant.
    Eval,
    /// Constant, adapters bypassed entirely.
    BaseOnly,
}

/// Encoder with adapter banks and a trainable head.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    adapter_config: AdapterConfig,
    pub base: FrozenBase<T>,
    banks: Vec<AdapterBank<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// RNG stream ids; the frozen base and shared `A`s match across modes for one seed.
const STREAM_BASE: u64 = 0;
const STREAM_ADAPTERS: u64 = 1;
const STREAM_HEAD: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, adapter_config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adapter_config.validate()?;
        if adapter_config.num_layers != config.num_layers
            || adapter_config.model_dim != config.model_dim
        {
            return Err(Error::config(
                "num_layers",
                "adapter and model dimensions disagree",
            ));
        }
        let base = FrozenBase::init(&config, &mut stream(seed, STREAM_BASE));
        let mut rng = stream(seed, STREAM_ADAPTERS);
        let banks = adapter_config
            .adapted_types
            .iter()
            .map(|&p| AdapterBank::init(&adapter_config, p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let k = config.task_head.outputs();
        let head_w = Tensor::randn(
            &[config.model_dim, k],
            1.0 / (config.model_dim as f64).sqrt(),
            &mut stream(seed, STREAM_HEAD),
        );
        let head_b = Tensor::zeros(&[k]);
        Ok(Self {
            config,
            adapter_config,
            base,
            banks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        &self.adapter_config
    }

    pub fn banks(&self) -> &[AdapterBank<T>] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [AdapterBank<T>] {
        &mut self.banks
    }

    pub fn bank(&self, projection: ProjectionType) -> Option<&AdapterBank<T>> {
        self.banks.iter().find(|b| b.projection() == projection)
    }

    pub(crate) fn replace_banks(&mut self, banks: Vec<AdapterBank<T>>) {
        self.banks = banks;
    }

    /// Shared `A`s, live `B`s, then the head, in a fixed order.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> =
            self.banks.iter().flat_map(|b| b.named_tensors()).collect();
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .banks
            .iter_mut()
            .flat_map(|b| b.named_tensors_mut())
            .collect();
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// Trainable adapter entries, excluding the head.
    pub fn adapter_param_count(&self) -> usize {
        self.banks.iter().map(AdapterBank::param_count).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.trainable_parameters_mut() {
            t.zero_grad();
        }
    }

    /// Weight increment `(α/r)·B̃(layer)·A` (d×d, output-major) of one projection.
    pub fn delta_weight(&self, projection: ProjectionType, layer: usize) -> Result<Tensor<T>> {
        let bank = self
            .bank(projection)
            .ok_or_else(|| Error::contract(format!("{projection} is not adapted")))?;
        let gid = bank.group_of(layer)?;
        let b = &bank.group(gid).expect("assigned group is live").b;
        let a = bank.a_for_layer(layer);
        let (d, r) = (bank.dim(), bank.rank());
        let mut out = vec![T::zero(); d * d];
        T::gemm(d, r, d, b.data(), false, a.data(), false, T::zero(), &mut out);
        let s = T::from_f64(bank.scaling());
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::from_vec(&[d, d], out)
    }

    fn check_inputs(&self, examples: &[Example]) -> Result<usize> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let seq = first.tokens.len();
        if seq == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for ex in examples {
            if ex.tokens.len() != seq {
                return Err(Error::Input("sequences in a batch must share a length".into()));
            }
            if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(seq)
    }

    fn build(&self, graph: &mut Graph<T>, examples: &[Example], mode: Bind) -> Result<(Var, Bound)> {
        let seq = self.check_inputs(examples)?;
        let batch = examples.len();
        let base = &self.base;
        let tok = graph.input(base.token_embedding.clone());
        let pos = graph.input(base.position_embedding.clone());
        let blocks: Vec<BlockVars> = base
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (graph.input(b.ln1_gamma.clone()), graph.input(b.ln1_beta.clone())),
                w_q: graph.input(b.w_q.clone()),
                w_k: graph.input(b.w_k.clone()),
                w_v: graph.input(b.w_v.clone()),
                w_o: graph.input(b.w_o.clone()),
                ln2: (graph.input(b.ln2_gamma.clone()), graph.input(b.ln2_beta.clone())),
                w_1: graph.input(b.w_1.clone()),
                b_1: graph.input(b.b_1.clone()),
                w_2: graph.input(b.w_2.clone()),
                b_2: graph.input(b.b_2.clone()),
            })
            .collect();
        let lnf = (
            graph.input(base.final_gamma.clone()),
            graph.input(base.final_beta.clone()),
        );
        let banks: Vec<BankVars> = match mode {
            Bind::Train => self.banks.iter().map(|b| b.bind(graph)).collect(),
            Bind::Eval | Bind::BaseOnly => self.banks.iter().map(|b| b.bind_const(graph)).collect(),
        };
        let (head_w, head_b) = match mode {
            Bind::Train => (graph.param(self.head_w.clone()), graph.param(self.head_b.clone())),
            _ => (graph.input(self.head_w.clone()), graph.input(self.head_b.clone())),
        };

        let ids: Vec<usize> = examples.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let x = graph.embedding(tok, &ids)?;
        let p = graph.embedding(pos, &positions)?;
        let mut x = graph.add(x, p)?;

        let adapter_for = |p: ProjectionType| {
            if mode == Bind::BaseOnly {
                return None;
            }
            self.banks
                .iter()
                .zip(&banks)
                .find(|(b, _)| b.projection() == p)
        };
        for (layer, bv) in blocks.iter().enumerate() {
            let h = graph.layer_norm(x, bv.ln1.0, bv.ln1.1)?;
            let mut q = graph.matmul(h, bv.w_q)?;
            if let Some((bank, vars)) = adapter_for(ProjectionType::Query) {
                let inc = bank.forward(graph, vars, layer, h)?;
                q = graph.add(q, inc)?;
            }
            let k = graph.matmul(h, bv.w_k)?;
            let mut v = graph.matmul(h, bv.w_v)?;
            if let Some((bank, vars)) = adapter_for(ProjectionType::Value) {
                let inc = bank.forward(graph, vars, layer, h)?;
                v = graph.add(v, inc)?;
            }
            let a = graph.attention(q, k, v, batch, seq, self.config.num_heads)?;
            let o = graph.matmul(a, bv.w_o)?;
            x = graph.add(x, o)?;

            let h = graph.layer_norm(x, bv.ln2.0, bv.ln2.1)?;
            let f = graph.matmul(h, bv.w_1)?;
            let f = graph.add_row(f, bv.b_1)?;
            let f = graph.gelu(f);
            let f = graph.matmul(f, bv.w_2)?;
            let f = graph.add_row(f, bv.b_2)?;
            x = graph.add(x, f)?;
        }
        let x = graph.layer_norm(x, lnf.0, lnf.1)?;
        let pooled = graph.mean_pool(x, seq)?;
        let out = graph.matmul(pooled, head_w)?;
        let out = graph.add_row(out, head_b)?;
        Ok((
            out,
            Bound {
                banks,
                head_w,
                head_b,
            },
        ))
    }

    /// Records a training forward pass; returns the batch-mean loss and outputs.
    pub fn loss(&self, graph: &mut Graph<T>, examples: &[Example]) -> Result<(Var, Var, Bound)> {
        let (out, bound) = self.build(graph, examples, Bind::Train)?;
        let loss = self.task_loss(graph, out, examples)?;
        Ok((loss, out, bound))
    }

    fn task_loss(&self, graph: &mut Graph<T>, out: Var, examples: &[Example]) -> Result<Var> {
        match self.config.task_head {
            TaskHead::Classification(k) => {
                let labels = examples
                    .iter()
                    .map(|e| match e.target {
                        Target::Class(c) if c < k => Ok(c),
                        _ => Err(Error::Input(format!("expected a class label below {k}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                graph.cross_entropy(out, &labels)
            }
            TaskHead::Regression => {
                let targets = examples
                    .iter()
                    .map(|e| match e.target {
                        Target::Real(v) => Ok(T::from_f64(v)),
                        _ => Err(Error::Input("expected a real-valued target".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                graph.mse(out, &targets)
            }
        }
    }

    /// Batch-mean loss without recording a tape.
    pub fn eval_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut graph = Graph::new();
        let (out, _) = self.build(&mut graph, examples, Bind::Eval)?;
        let loss = self.task_loss(&mut graph, out, examples)?;
        Ok(graph.value(loss).data()[0].as_f64())
    }

    /// Head outputs (batch × outputs) without recording a tape.
    pub fn predict(&self, examples: &[Example]) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let (out, _) = self.build(&mut graph, examples, Bind::Eval)?;
        Ok(graph.value(out).clone())
    }

    /// Outputs of the same network with every adapter removed.
    pub fn base_predict(&self, examples: &[Example]) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let (out, _) = self.build(&mut graph, examples, Bind::BaseOnly)?;
        Ok(graph.value(out).clone())
    }

    /// Moves gradients from a finished backward pass into the trainables.
    pub fn absorb_grads(&mut self, graph: &Graph<T>, bound: &Bound) -> Result<()> {
        for (bank, vars) in self.banks.iter_mut().zip(&bound.banks) {
            bank.absorb_grads(graph, vars)?;
        }
        if let Some(g) = graph.grad(bound.head_w) {
            self.head_w.accumulate_grad(g)?;
        }
        if let Some(g) = graph.grad(bound.head_b) {
            self.head_b.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Forward, backward and gradient absorption for one batch; returns the loss.
    pub fn accumulate_gradients(&mut self, examples: &[Example]) -> Result<f64> {
        let mut graph = Graph::new();
        let (loss, _, bound) = self.loss(&mut graph, examples)?;
        let value = graph.value(loss).data()[0].as_f64();
        graph.backward(loss)?;
        self.absorb_grads(&graph, &bound)?;
        Ok(value)
    }
}
