//! Random models, SAEs and sequences for oracle checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Activation, Mode, ModelConfig, SplitModel, TokenizedSequence};
use crate::sae::SaeParams;
use crate::tensor::Tensor;

/// Shape of a random instance.
#[derive(Clone, Debug)]
pub struct InstanceShape {
    pub vocab: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub num_blocks: usize,
    pub split_layer: usize,
    pub classes: usize,
    pub max_seq_len: usize,
    pub latents: usize,
    pub k: usize,
    pub activation: Activation,
    pub mode: Mode,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            vocab: 24,
            embed_dim: 8,
            mlp_hidden: 12,
            num_blocks: 2,
            split_layer: 1,
            classes: 4,
            max_seq_len: 10,
            latents: 32,
            k: 6,
            activation: Activation::Relu,
            mode: Mode::Classification,
        }
    }
}

impl InstanceShape {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            split_layer: self.split_layer,
            max_seq_len: self.max_seq_len,
            num_classes: self.classes,
            mlp_hidden: self.mlp_hidden,
            activation: self.activation,
            mode: self.mode,
        }
    }
}

pub struct Instance {
    pub model: SplitModel,
    pub sae: SaeParams,
    pub sequences: Vec<TokenizedSequence>,
}

pub fn random_sequence<R: Rng>(rng: &mut R, shape: &InstanceShape, len: usize) -> TokenizedSequence {
    match shape.mode {
        Mode::Classification => {
            let ids = (0..len).map(|_| rng.random_range(0..shape.vocab)).collect();
            TokenizedSequence::classification(ids, rng.random_range(0..shape.classes))
        }
        Mode::Autoregressive => {
            let ids: Vec<usize> = (0..len + 1).map(|_| rng.random_range(0..shape.vocab)).collect();
            TokenizedSequence::autoregressive(&ids)
        }
    }
}

/// Random SAE whose encoder bias keeps roughly `k` latents firing.
pub fn random_sae(d: usize, h: usize, k: usize, seed: u64) -> SaeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = Tensor::randn(1, d, 0.1, &mut rng);
    let mut sae = SaeParams::init(d, h, k, &mean, seed ^ 0x5ae).expect("valid SAE shape");
    sae.b_enc = Tensor::randn(1, h, 0.2, &mut rng).map(|x| x + 0.3);
    sae
}

/// A random model, SAE and `n` sequences of random lengths.
pub fn random_instance(shape: &InstanceShape, n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SplitModel::init(shape.config(), seed).expect("valid shape");
    let sae = random_sae(shape.embed_dim, shape.latents, shape.k, seed.wrapping_add(17));
    let lo = match shape.mode {
        Mode::Classification => 1,
        Mode::Autoregressive => 2,
    };
    let sequences = (0..n)
        .map(|_| {
            let len = rng.random_range(lo..=shape.max_seq_len);
            random_sequence(&mut rng, shape, len)
        })
        .collect();
    Instance { model, sae, sequences }
}

/// A run small enough to take every pipeline stage in seconds.
pub fn tiny_run_config(root: &std::path::Path) -> crate::config::RunConfig {
    let mut cfg = crate::config::RunConfig::default();
    let s = &mut cfg.data.synthetic;
    s.vocab_size = 24;
    s.num_classes = 3;
    s.min_len = 4;
    s.max_len = 8;
    s.train_size = 24;
    s.test_size = 6;
    cfg.model = InstanceShape { classes: 3, ..InstanceShape::default() }.config();
    cfg.train.epochs = 5;
    cfg.train.batch_size = 8;
    cfg.sae.latents = 16;
    cfg.sae.k = 4;
    cfg.sae.epochs = 3;
    cfg.sae.batch_size = 16;
    cfg.influence.num_test = 2;
    cfg.influence.curvature_examples = 8;
    cfg.influence.solve.damping = 0.01;
    cfg.influence.solve.cg_iters = 10;
    cfg.influence.solve.retain_fraction = 0.5;
    cfg.eval.k_grid = vec![2, 4, 8];
    cfg.bench.pairs = 1;
    cfg.paths.checkpoints = root.join("checkpoints");
    cfg.paths.outputs = root.join("outputs");
    cfg
}
