//! The complete segmentation network: encoder followed by the adaptive
//! feature fusion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::{validate_config, ModelConfig};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct AffSegNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl AffSegNet {
    /// Registers all parameters in `store`, drawing initial values from a
    /// generator seeded with `seed`.
    pub fn new<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        validate_config(config).into_result()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, config, &mut rng)?;
        let decoder = Decoder::new(store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Builds the model together with a fresh parameter store.
    pub fn build<T: Element>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.img_size.0, c.img_size.1];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(format!(
                "model expects images [B, {}, {}, {}], got {shape:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    pub fn encode<T: Element>(&self, g: &Graph<T>, image: &Var<T>) -> Result<EncoderOutput<T>> {
        self.check_input(image.shape())?;
        self.encoder.forward(g, image)
    }

    /// Logits `[B, num_classes, H, W]` for images `[B, in_channels, H, W]`.
    pub fn forward<T: Element>(&self, g: &Graph<T>, image: &Var<T>) -> Result<Var<T>> {
        let enc = self.encode(g, image)?;
        self.decoder.forward(g, &enc)
    }
}

/// Number of scalar parameters for a configuration.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    let (_, store) = AffSegNet::build::<f32>(config, 0)?;
    Ok(store.num_scalars())
}
