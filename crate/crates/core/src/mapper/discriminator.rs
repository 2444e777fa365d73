use adadiff_tape::{Bound, Graph, ParamStore, Var};

use super::config::MapperConfig;
use super::layers::{Conv, DownBlock, Init, Linear, TimeMlp, LEAK};
use super::Discriminator;
use crate::rng;

/// Residual downsampling encoder over the channel-stacked pair `(x_t, x_{t+k})`
/// followed by spatial sum pooling and one linear layer to a logit.
#[derive(Clone, Debug)]
pub struct PairDiscriminator {
    store: ParamStore,
    time: TimeMlp,
    conv_in: Conv,
    blocks: Vec<DownBlock>,
    head: Linear,
}

impl PairDiscriminator {
    pub fn new(cfg: &MapperConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, &[0x646973]);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let tdim = cfg.time_embed_dim;
        let time = TimeMlp::new(&mut init, "d.time", tdim);
        let c0 = cfg.disc_channels[0];
        let conv_in = init.conv("d.conv_in", 4, c0, 1, 1.0);
        let mut ch = c0;
        let blocks = cfg
            .disc_channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let b = DownBlock::new(&mut init, &format!("d.block.{i}"), ch, out, tdim, cfg.resample);
                ch = out;
                b
            })
            .collect();
        let head = init.linear("d.head", ch, 1, 1.0);
        Self {
            store,
            time,
            conv_in,
            blocks,
            head,
        }
    }
}

impl Discriminator for PairDiscriminator {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, x_next: Var, times: &[usize]) -> Var {
        let temb = self.time.apply(g, p, times);
        let temb = g.leaky_relu(temb, LEAK);
        let pair = g.concat(x_t, x_next);
        let mut h = self.conv_in.apply(g, p, pair);
        for block in &self.blocks {
            h = block.apply(g, p, h, temb);
        }
        let h = g.leaky_relu(h, LEAK);
        let pooled = g.sum_spatial(h);
        let logit = self.head.apply(g, p, pooled);
        g.reshape(logit, &[times.len()])
    }
}
