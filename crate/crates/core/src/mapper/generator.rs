use adadiff_tape::{Bound, Graph, ParamStore, Var};

use super::config::MapperConfig;
use super::layers::{AdaGroupNorm, AttnBlock, BlockSpec, Cond, Conv, Direction, Init, Linear, ResBlock, TimeMlp, NEAR_ZERO};
use super::Generator;
use crate::rng;

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    down: Option<ResBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    blocks: Vec<ResBlock>,
    attn: Option<AttnBlock>,
    up: Option<ResBlock>,
}

/// Residual encoder-decoder with long skips, adaptive group normalisation
/// driven by a latent MLP and additive time-embedding channel biases.
#[derive(Clone, Debug)]
pub struct UNetGenerator {
    store: ParamStore,
    image_size: usize,
    z_dim: usize,
    z_ablation: bool,
    time: TimeMlp,
    z_mlp: Vec<Linear>,
    conv_in: Conv,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    out_norm: AdaGroupNorm,
    conv_out: Conv,
}

impl UNetGenerator {
    /// Seeded initialisation; the config must already be validated.
    pub fn new(cfg: &MapperConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, &[0x67656e]);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let (tdim, zdim) = (cfg.time_embed_dim, cfg.z_embed_dim);
        let time = TimeMlp::new(&mut init, "g.time", tdim);
        let z_mlp = (0..cfg.z_mlp_layers)
            .map(|l| {
                let fin = if l == 0 { cfg.z_dim } else { zdim };
                init.linear(&format!("g.zmlp.{l}"), fin, zdim, 1.0)
            })
            .collect();
        let base = cfg.base_channels;
        let conv_in = init.conv("g.conv_in", 2, base, 3, 1.0);
        let spec = |name: &str, cin, cout, dir| BlockSpec {
            name: name.to_string(),
            cin,
            cout,
            dir,
            temb: tdim,
            zemb: zdim,
            max_groups: cfg.max_norm_groups,
            resample: cfg.resample,
        };

        let stages = cfg.stages();
        let mut skips = vec![base];
        let mut ch = base;
        let mut encoder = Vec::with_capacity(stages);
        for s in 0..stages {
            let out = base * cfg.channel_mult[s];
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(&mut init, spec(&format!("g.enc.{s}.{b}"), ch, out, Direction::Flat)));
                ch = out;
                if cfg.attention_stages.contains(&s) {
                    attn.push(AttnBlock::new(&mut init, &format!("g.enc.{s}.{b}.attn"), ch, zdim, cfg.max_norm_groups));
                }
                skips.push(ch);
            }
            let down = (s + 1 < stages).then(|| {
                skips.push(ch);
                ResBlock::new(&mut init, spec(&format!("g.enc.{s}.down"), ch, ch, Direction::Down))
            });
            encoder.push(EncoderStage { blocks, attn, down });
        }

        let mut decoder = Vec::with_capacity(stages);
        for s in (0..stages).rev() {
            let out = base * cfg.channel_mult[s];
            let mut blocks = Vec::new();
            for b in 0..=cfg.blocks_per_stage {
                let skip = skips.pop().expect("skip bookkeeping");
                blocks.push(ResBlock::new(&mut init, spec(&format!("g.dec.{s}.{b}"), ch + skip, out, Direction::Flat)));
                ch = out;
            }
            let attn = cfg
                .decoder_attention_stages
                .contains(&s)
                .then(|| AttnBlock::new(&mut init, &format!("g.dec.{s}.attn"), ch, zdim, cfg.max_norm_groups));
            let up = (s > 0).then(|| ResBlock::new(&mut init, spec(&format!("g.dec.{s}.up"), ch, ch, Direction::Up)));
            decoder.push(DecoderStage { blocks, attn, up });
        }
        debug_assert!(skips.is_empty());
        let out_norm = AdaGroupNorm::new(&mut init, "g.out.norm", ch, zdim, cfg.max_norm_groups);
        let conv_out = init.conv("g.out.conv", ch, 2, 3, NEAR_ZERO);
        Self {
            store,
            image_size: cfg.image_size,
            z_dim: cfg.z_dim,
            z_ablation: cfg.z_ablation,
            time,
            z_mlp,
            conv_in,
            encoder,
            decoder,
            out_norm,
            conv_out,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn z_ablation(&self) -> bool {
        self.z_ablation
    }
}

impl Generator for UNetGenerator {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x_next: Var, times: &[usize], z: Var) -> Var {
        let temb = self.time.apply(g, p, times);
        let temb = g.silu(temb);
        let mut zemb = if self.z_ablation {
            let shape = g.value(z).shape().to_vec();
            g.constant(adadiff_tape::Tensor::zeros(&shape))
        } else {
            z
        };
        for layer in &self.z_mlp {
            let h = layer.apply(g, p, zemb);
            zemb = g.silu(h);
        }
        let c = Cond { temb, zemb };

        let mut h = self.conv_in.apply(g, p, x_next);
        let mut skips = vec![h];
        for stage in &self.encoder {
            for (b, block) in stage.blocks.iter().enumerate() {
                h = block.apply(g, p, h, &c);
                if let Some(a) = stage.attn.get(b) {
                    h = a.apply(g, p, h, &c);
                }
                skips.push(h);
            }
            if let Some(down) = &stage.down {
                h = down.apply(g, p, h, &c);
                skips.push(h);
            }
        }
        for stage in &self.decoder {
            for block in &stage.blocks {
                let skip = skips.pop().expect("one skip per decoder block");
                let joined = g.concat(h, skip);
                h = block.apply(g, p, joined, &c);
            }
            if let Some(a) = &stage.attn {
                h = a.apply(g, p, h, &c);
            }
            if let Some(up) = &stage.up {
                h = up.apply(g, p, h, &c);
            }
        }
        let h = self.out_norm.apply(g, p, h, c.zemb);
        let h = g.silu(h);
        self.conv_out.apply(g, p, h)
    }
}
