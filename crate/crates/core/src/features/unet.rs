use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{BatchNorm2d, Conv2d, Mode, StatUpdates};
use crate::numerics::{Bound, Element, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    /// Kernels at the first level, doubled per level.
    pub base_kernels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub final_feature_maps: usize,
}

impl UNetConfig {
    /// Five levels, 64 → 1024 kernels.
    pub fn full(in_channels: usize, out_classes: usize) -> Self {
        Self {
            depth: 5,
            base_kernels: 64,
            in_channels,
            out_classes,
            final_feature_maps: 64,
        }
    }

    /// Three levels, 8 → 32 kernels; small enough to train on a laptop CPU.
    pub fn desk(in_channels: usize, out_classes: usize) -> Self {
        Self {
            depth: 3,
            base_kernels: 8,
            ..Self::full(in_channels, out_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_kernels < 4 || self.in_channels == 0 || self.out_classes == 0 {
            return Err(Error::invalid(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_kernels << level
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// conv-BN-ReLU twice.
#[derive(Clone, Debug)]
struct DoubleConv {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
}

impl DoubleConv {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            b1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout),
            c2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            b2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout),
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let x = cx.conv_bn_relu(&self.c1, &self.b1, x)?;
        cx.conv_bn_relu(&self.c2, &self.b2, x)
    }
}

struct Ctx<'a, T: Element> {
    tape: &'a mut Tape<T>,
    p: &'a Bound,
    mode: Mode,
    updates: &'a mut StatUpdates<T>,
}

impl<T: Element> Ctx<'_, T> {
    fn conv_bn_relu(&mut self, conv: &Conv2d, bn: &BatchNorm2d, x: Var) -> Result<Var> {
        let y = conv.forward(self.tape, self.p, x)?;
        let y = bn.forward(self.tape, self.p, y, self.mode, self.updates)?;
        Ok(self.tape.relu(y))
    }
}

/// Encoder/decoder network with skip connections. The layer before the
/// prediction head emits `final_feature_maps` activation maps at input
/// resolution; the head maps them to per-class sigmoid probabilities.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Vec<DoubleConv>,
    up: Vec<(Conv2d, BatchNorm2d)>,
    decoder: Vec<DoubleConv>,
    feature: (Conv2d, BatchNorm2d),
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct UNetOutput {
    /// `[N, final_feature_maps, H, W]`
    pub features: Var,
    /// `[N, out_classes, H, W]`, sigmoid probabilities.
    pub probs: Var,
    /// `(encoder level, skip shape, decoder input shape after concat)`
    pub skips: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl UNet {
    pub fn new<T: Element>(config: UNetConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels(level);
            encoder.push(DoubleConv::new(&mut store, &format!("enc{level}"), cin, c, rng));
            cin = c;
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for level in (0..config.depth - 1).rev() {
            let c = config.channels(level);
            up.push((
                Conv2d::new(&mut store, &format!("up{level}.conv"), config.channels(level + 1), c, 3, rng),
                BatchNorm2d::new(&mut store, &format!("up{level}.bn"), c),
            ));
            decoder.push(DoubleConv::new(&mut store, &format!("dec{level}"), 2 * c, c, rng));
        }
        let feature = (
            Conv2d::new(&mut store, "features.conv", config.channels(0), config.final_feature_maps, 3, rng),
            BatchNorm2d::new(&mut store, "features.bn", config.final_feature_maps),
        );
        let head = Conv2d::new(&mut store, "head", config.final_feature_maps, config.out_classes, 1, rng);
        Ok((
            Self {
                config,
                encoder,
                up,
                decoder,
                feature,
                head,
            },
            store,
        ))
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut StatUpdates<T>,
    ) -> Result<UNetOutput> {
        let shape = tape.shape(x).to_vec();
        let multiple = self.config.size_multiple();
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || shape[2] % multiple != 0
            || shape[3] % multiple != 0
        {
            return Err(Error::Shape {
                op: "unet",
                lhs: shape,
                rhs: vec![self.config.in_channels, multiple, multiple],
            });
        }
        let mut cx = Ctx { tape, p, mode, updates };
        let mut skips = Vec::new();
        let mut h = x;
        for (level, block) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = cx.tape.max_pool2(h)?;
            }
            h = block.forward(&mut cx, h)?;
            skips.push(h);
        }
        let mut trace = Vec::new();
        for (i, ((up_conv, up_bn), block)) in self.up.iter().zip(&self.decoder).enumerate() {
            let level = self.config.depth - 2 - i;
            let upsampled = cx.tape.upsample2(h)?;
            let reduced = cx.conv_bn_relu(up_conv, up_bn, upsampled)?;
            let skip = skips[level];
            let joined = cx.tape.concat(&[skip, reduced], 1)?;
            trace.push((level, cx.tape.shape(skip).to_vec(), cx.tape.shape(joined).to_vec()));
            h = block.forward(&mut cx, joined)?;
        }
        let features = cx.conv_bn_relu(&self.feature.0, &self.feature.1, h)?;
        let logits = self.head.forward(cx.tape, p, features)?;
        let probs = cx.tape.sigmoid(logits);
        Ok(UNetOutput {
            features,
            probs,
            skips: trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skip_connections_pair_levels() {
        let cfg = UNetConfig {
            depth: 4,
            base_kernels: 4,
            in_channels: 3,
            out_classes: 2,
            final_feature_maps: 6,
        };
        let (net, store) = UNet::new::<f32>(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::ones([1, 3, 16, 16]));
        let out = net.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new()).unwrap();
        assert_eq!(tape.shape(out.features), &[1, 6, 16, 16]);
        assert_eq!(tape.shape(out.probs), &[1, 2, 16, 16]);
        let levels: Vec<usize> = out.skips.iter().map(|s| s.0).collect();
        assert_eq!(levels, vec![2, 1, 0]);
        for (level, skip, joined) in &out.skips {
            let side = 16 >> level;
            assert_eq!(skip, &vec![1, 4 << level, side, side]);
            assert_eq!(joined, &vec![1, 8 << level, side, side]);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let (net, store) = UNet::new::<f32>(UNetConfig::desk(2, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::ones([1, 2, 10, 12]));
        assert!(net.forward(&mut tape, &p, x, Mode::Eval, &mut Vec::new()).is_err());
    }

    #[test]
    fn full_config_doubles_to_1024() {
        let cfg = UNetConfig::full(12, 8);
        assert_eq!((0..cfg.depth).map(|l| cfg.channels(l)).collect::<Vec<_>>(), vec![64, 128, 256, 512, 1024]);
    }
}
