//! Learnable-query fusion blocks.
//!
//! Each block owns a batch-free set of queries `[N_Q, D]` that is refined in
//! up to three residual stages:
//!
//! ```text
//! Q'  = Q  + CrossAttn(LN(Q),  first)
//! Q'' = Q' + CrossAttn(LN(Q'), second)
//! Q~  = Q'' + FFN(LN(Q''))
//! ```
//!
//! A GLF block conditions on the transformer features and then the CNN
//! features of its level; a PEF block conditions on the projected prompt and
//! then the transformer features. Blocks never share parameters.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, FeedForward, LayerNorm};
use crate::params::{Init, ParamId};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Glf,
    Pef,
}

impl BlockKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BlockKind::Glf => "glf",
            BlockKind::Pef => "pef",
        }
    }

    /// Query count that performed best for this block type.
    pub fn default_queries(self) -> usize {
        match self {
            BlockKind::Glf => 4,
            BlockKind::Pef => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    pub kind: BlockKind,
    pub level: usize,
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    /// Whether the first (global / prompt) conditioning stage exists.
    pub first_stage: bool,
    /// Whether the second (local / visual) conditioning stage exists.
    pub second_stage: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct AttnStage {
    norm: LayerNorm,
    attn: Attention,
}

impl AttnStage {
    fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads)?,
        })
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        kv: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, q)?;
        let a = self.attn.forward(g, h, kv, mask)?;
        g.add(q, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub spec: FusionSpec,
    queries: ParamId,
    first: Option<AttnStage>,
    second: Option<AttnStage>,
    /// Extra always-visible key for masked prompt attention, so a prompt
    /// made entirely of padding still has something to attend to.
    null_token: Option<ParamId>,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl FusionBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, spec: FusionSpec) -> Result<Self> {
        if spec.queries == 0 {
            return Err(Error::Config("a fusion block needs at least one query".into()));
        }
        if spec.heads == 0 || spec.dim % spec.heads != 0 {
            return Err(Error::Config(format!(
                "fusion width {} is not divisible by {} heads",
                spec.dim, spec.heads
            )));
        }
        let name = format!("{}.level{}", spec.kind.prefix(), spec.level);
        let d = spec.dim;
        let queries = b.param(&format!("{name}.query"), &[spec.queries, d], Init::ScaledNormal { fan_in: d })?;
        let first = if spec.first_stage {
            Some(AttnStage::new(b, &format!("{name}.stage1"), d, spec.heads)?)
        } else {
            None
        };
        let null_token = if spec.first_stage && spec.kind == BlockKind::Pef {
            Some(b.param(&format!("{name}.null_token"), &[1, d], Init::ScaledNormal { fan_in: d })?)
        } else {
            None
        };
        let second = if spec.second_stage {
            Some(AttnStage::new(b, &format!("{name}.stage2"), d, spec.heads)?)
        } else {
            None
        };
        Ok(Self {
            queries,
            first,
            second,
            null_token,
            ffn_norm: LayerNorm::new(b, &format!("{name}.ffn_norm"), d)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, 4 * d)?,
            spec,
        })
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Parameters whose zeroing turns every residual branch off, making the
    /// block the identity on its queries.
    pub fn residual_branch_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for stage in self.first.iter().chain(&self.second) {
            ids.extend(stage.attn.output.param_ids());
        }
        ids.extend(self.ffn.fc2.param_ids());
        ids
    }

    /// Second-stage parameters (its output projection), for dead-path tests.
    pub fn second_stage_output(&self) -> Vec<ParamId> {
        self.second
            .as_ref()
            .map(|s| s.attn.output.param_ids())
            .unwrap_or_default()
    }

    fn broadcast_queries<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> Result<Var> {
        let q = g.param(self.queries);
        g.expand_batch(q, batch)
    }

    fn finish<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let h = self.ffn_norm.forward(g, q)?;
        let f = self.ffn.forward(g, h)?;
        g.add(q, f)
    }

    fn check_kv<T: Real>(&self, g: &Graph<'_, T>, what: &str, kv: Var, batch: usize) -> Result<()> {
        let s = g.shape(kv);
        if s.len() != 3 || s[0] != batch || s[2] != self.spec.dim {
            return Err(Error::dim(
                "fusion_block",
                format!("{what} has shape {s:?}, expected [{batch}, N, {}]", self.spec.dim),
            ));
        }
        Ok(())
    }

    /// Global-local fusion: queries attend to transformer features `global`
    /// (`[B, N_i, D]`) and then CNN tokens `local` (`[B, C_i, D]`). A stage
    /// removed by ablation ignores its input.
    pub fn glf<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: usize,
        global: Option<Var>,
        local: Option<Var>,
    ) -> Result<Var> {
        let mut q = self.broadcast_queries(g, batch)?;
        if let Some(stage) = &self.first {
            let kv = global.ok_or_else(|| Error::Contract("GLF stage 1 needs global features".into()))?;
            self.check_kv(g, "global features", kv, batch)?;
            q = stage.forward(g, q, kv, None)?;
        }
        if let Some(stage) = &self.second {
            let kv = local.ok_or_else(|| Error::Contract("GLF stage 2 needs local features".into()))?;
            self.check_kv(g, "local features", kv, batch)?;
            q = stage.forward(g, q, kv, None)?;
        }
        self.finish(g, q)
    }

    /// Prompt-embedded fusion: queries attend to the projected prompt
    /// (`[B, N_p, D]`, pad positions masked) and then the transformer
    /// features `visual` (`[B, N_i, D]`).
    pub fn pef<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: usize,
        prompt: Option<(Var, &AttnMask)>,
        visual: Option<Var>,
    ) -> Result<Var> {
        let mut q = self.broadcast_queries(g, batch)?;
        if let Some(stage) = &self.first {
            let (p, mask) =
                prompt.ok_or_else(|| Error::Contract("PEF stage 1 needs the prompt".into()))?;
            self.check_kv(g, "prompt", p, batch)?;
            if mask.cols() != g.shape(p)[1] || mask.batch() != batch {
                return Err(Error::dim(
                    "pef_block",
                    format!("pad mask covers {} tokens, prompt has {}", mask.cols(), g.shape(p)[1]),
                ));
            }
            let null = self.null_token.expect("PEF first stage owns a null token");
            let null = g.param(null);
            let null = g.expand_batch(null, batch)?;
            let kv = g.concat_tokens(&[p, null])?;
            let mask = mask.extend_allowed(1);
            q = stage.forward(g, q, kv, Some(&mask))?;
        }
        if let Some(stage) = &self.second {
            let kv = visual.ok_or_else(|| Error::Contract("PEF stage 2 needs visual features".into()))?;
            self.check_kv(g, "visual features", kv, batch)?;
            q = stage.forward(g, q, kv, None)?;
        }
        self.finish(g, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GRAD_TOLERANCE};
    use crate::params::ParamStore;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn spec(kind: BlockKind, dim: usize, heads: usize, queries: usize) -> FusionSpec {
        FusionSpec {
            kind,
            level: 2,
            dim,
            heads,
            queries,
            first_stage: true,
            second_stage: true,
        }
    }

    fn rand_t<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    fn zero_branches<T: Real>(store: &mut ParamStore<T>, block: &FusionBlock) {
        for id in block.residual_branch_params() {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    #[test]
    fn cross_attention_over_one_key_returns_its_value() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut Builder::new(&mut store, 1), "a", 8, 2).unwrap();
        let mut g = Graph::inference(&store);
        let q = g.input(&rand_t(&[1, 3, 8], 2), false);
        let kv = g.input(&rand_t(&[1, 1, 8], 3), false);
        let out = attn.forward(&mut g, q, kv, None).unwrap();
        let v = attn.value.forward(&mut g, kv).unwrap();
        let expected = attn.output.forward(&mut g, v).unwrap();
        let (o, e) = (g.value(out).to_vec(), g.value(expected).to_vec());
        for row in o.chunks(8) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_zero_output_projection_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut Builder::new(&mut store, 4), "a", 8, 2).unwrap();
        for id in attn.output.param_ids() {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let q = g.input(&rand_t(&[2, 3, 8], 5), false);
        let kv = g.input(&rand_t(&[2, 4, 8], 6), false);
        let out = attn.forward(&mut g, q, kv, None).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_attention_gradients() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut Builder::new(&mut store, 7), "a", 8, 2).unwrap();
        let (q, kv) = (rand_t::<f64>(&[1, 2, 8], 8), rand_t::<f64>(&[1, 3, 8], 9));
        let w = rand_t::<f64>(&[1, 2, 8], 10);
        let report = check_params(&store, |g| {
            let (q, kv, w) = (g.input(&q, false), g.input(&kv, false), g.input(&w, false));
            let out = attn.forward(g, q, kv, None)?;
            let p = g.mul(out, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.max_error() <= GRAD_TOLERANCE, "{:?}", report.worst());
    }

    #[test]
    fn cross_attention_rejects_bad_mask() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut Builder::new(&mut store, 11), "a", 8, 2).unwrap();
        let mut g = Graph::inference(&store);
        let q = g.input(&rand_t(&[1, 2, 8], 12), false);
        let kv = g.input(&rand_t(&[1, 3, 8], 13), false);
        let mask = AttnMask::keys(1, 4, vec![true; 4]).unwrap();
        assert!(matches!(
            attn.forward(&mut g, q, kv, Some(&mask)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn glf_output_shape() {
        let mut store = ParamStore::<f32>::new();
        let block = FusionBlock::new(&mut Builder::new(&mut store, 14), spec(BlockKind::Glf, 64, 4, 4)).unwrap();
        let mut g = Graph::inference(&store);
        let gl = g.input(&rand_t(&[2, 17, 64], 15), false);
        let lo = g.input(&rand_t(&[2, 64, 64], 16), false);
        let out = block.glf(&mut g, 2, Some(gl), Some(lo)).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 64]);
    }

    #[test]
    fn zeroed_branches_make_blocks_identity() {
        for kind in [BlockKind::Glf, BlockKind::Pef] {
            let mut store = ParamStore::<f32>::new();
            let block = FusionBlock::new(&mut Builder::new(&mut store, 17), spec(kind, 16, 4, 3)).unwrap();
            zero_branches(&mut store, &block);
            let mut g = Graph::inference(&store);
            let a = g.input(&rand_t(&[2, 5, 16], 18), false);
            let b = g.input(&rand_t(&[2, 7, 16], 19), false);
            let mask = AttnMask::keys(2, 5, vec![true; 10]).unwrap();
            let out = match kind {
                BlockKind::Glf => block.glf(&mut g, 2, Some(a), Some(b)),
                BlockKind::Pef => block.pef(&mut g, 2, Some((a, &mask)), Some(b)),
            }
            .unwrap();
            let q = store.tensor(block.query_param()).data();
            let v = g.value(out);
            assert_eq!(&v[..q.len()], q);
            assert_eq!(&v[q.len()..], q);
        }
    }

    #[test]
    fn dead_second_stage_ignores_local_features() {
        let mut store = ParamStore::<f64>::new();
        let block = FusionBlock::new(&mut Builder::new(&mut store, 20), spec(BlockKind::Glf, 16, 2, 4)).unwrap();
        for id in block.second_stage_output() {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let run = |local_seed: u64| {
            let mut g = Graph::inference(&store);
            let gl = g.input(&rand_t(&[1, 5, 16], 21), false);
            let lo = g.input(&rand_t(&[1, 9, 16], local_seed), false);
            let out = block.glf(&mut g, 1, Some(gl), Some(lo)).unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(22), run(23));
    }

    #[test]
    fn pef_query_count() {
        let mut store = ParamStore::<f32>::new();
        let block = FusionBlock::new(&mut Builder::new(&mut store, 24), spec(BlockKind::Pef, 32, 4, 8)).unwrap();
        let mut g = Graph::inference(&store);
        let p = g.input(&rand_t(&[3, 6, 32], 25), false);
        let v = g.input(&rand_t(&[3, 17, 32], 26), false);
        let mask = AttnMask::keys(3, 6, vec![true; 18]).unwrap();
        let out = block.pef(&mut g, 3, Some((p, &mask)), Some(v)).unwrap();
        assert_eq!(g.shape(out), &[3, 8, 32]);
    }

    #[test]
    fn fully_padded_prompt_stays_finite() {
        let mut store = ParamStore::<f64>::new();
        let block = FusionBlock::new(&mut Builder::new(&mut store, 27), spec(BlockKind::Pef, 16, 2, 8)).unwrap();
        let mut g = Graph::inference(&store);
        let p = g.input(&rand_t(&[1, 6, 16], 28), false);
        let v = g.input(&rand_t(&[1, 17, 16], 29), false);
        let mask = AttnMask::keys(1, 6, vec![false; 6]).unwrap();
        let out = block.pef(&mut g, 1, Some((p, &mask)), Some(v)).unwrap();
        assert!(g.value(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_prompt_positions_are_ignored() {
        let mut store = ParamStore::<f64>::new();
        let block = FusionBlock::new(&mut Builder::new(&mut store, 30), spec(BlockKind::Pef, 16, 2, 4)).unwrap();
        let mask = AttnMask::keys(1, 4, vec![true, true, false, false]).unwrap();
        let base = rand_t::<f64>(&[1, 4, 16], 31);
        let mut altered = base.clone();
        altered.data_mut()[2 * 16..].iter_mut().for_each(|v| *v += 3.0);
        let run = |p: &Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let p = g.input(p, false);
            let v = g.input(&rand_t(&[1, 5, 16], 32), false);
            let out = block.pef(&mut g, 1, Some((p, &mask)), Some(v)).unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(&base), run(&altered));
    }

    #[test]
    fn block_gradients() {
        for kind in [BlockKind::Glf, BlockKind::Pef] {
            let mut store = ParamStore::<f64>::new();
            let block = FusionBlock::new(&mut Builder::new(&mut store, 33), spec(kind, 8, 2, 2)).unwrap();
            let a = rand_t::<f64>(&[2, 4, 8], 34);
            let b = rand_t::<f64>(&[2, 5, 8], 35);
            let w = rand_t::<f64>(&[2, 2, 8], 36);
            let mask = AttnMask::keys(2, 4, vec![true, true, true, false, true, false, false, false]).unwrap();
            let report = check_params(&store, |g| {
                let (a, b, w) = (g.input(&a, false), g.input(&b, false), g.input(&w, false));
                let out = match kind {
                    BlockKind::Glf => block.glf(g, 2, Some(a), Some(b))?,
                    BlockKind::Pef => block.pef(g, 2, Some((a, &mask)), Some(b))?,
                };
                let p = g.mul(out, w)?;
                g.sum(p)
            })
            .unwrap();
            assert!(report.max_error() <= GRAD_TOLERANCE, "{kind:?}: {:?}", report.worst());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permuting_conditioning_tokens_leaves_output_unchanged(seed in any::<u64>(), which in 0usize..2) {
            let mut store = ParamStore::<f32>::new();
            let block = FusionBlock::new(&mut Builder::new(&mut store, 37), spec(BlockKind::Glf, 16, 4, 4)).unwrap();
            let gl = rand_t::<f32>(&[1, 6, 16], seed);
            let lo = rand_t::<f32>(&[1, 9, 16], seed ^ 1);
            let mut rng = SplitMix64::new(seed ^ 2);
            let permute = |t: &Tensor<f32>, rng: &mut SplitMix64| {
                let n = t.shape()[1];
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                let data: Vec<f32> = order.iter().flat_map(|&i| t.data()[i * 16..(i + 1) * 16].to_vec()).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            };
            let (gl2, lo2) = if which == 0 {
                (permute(&gl, &mut rng), lo.clone())
            } else {
                (gl.clone(), permute(&lo, &mut rng))
            };
            let run = |a: &Tensor<f32>, b: &Tensor<f32>| {
                let mut g = Graph::inference(&store);
                let (a, b) = (g.input(a, false), g.input(b, false));
                let out = block.glf(&mut g, 1, Some(a), Some(b)).unwrap();
                g.value(out).to_vec()
            };
            for (x, y) in run(&gl, &lo).iter().zip(run(&gl2, &lo2)) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }
}
