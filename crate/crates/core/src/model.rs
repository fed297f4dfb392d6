//! Embedding followed by a stack of stages.

use crate::block::{BlockConfig, Encoder, LocalEnhancer, Passthrough, StageOutput};
use crate::embedding::{embed, EmbedConfig, EmbedParams, Embedding};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::hilbert::{DEFAULT_ORDER, MAX_ORDER};
use crate::params::{join, Init, Parameters};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub block: BlockConfig,
    pub depth: usize,
    pub hilbert_order: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let embed = EmbedConfig::default();
        ModelConfig {
            embed,
            block: BlockConfig::new(embed.dim),
            depth: 6,
            hilbert_order: DEFAULT_ORDER,
        }
    }
}

impl ModelConfig {
    /// Eight tokens of width eight, a single stage, four-dimensional state.
    pub fn toy() -> Self {
        let embed = EmbedConfig {
            n_groups: 8,
            group_size: 4,
            dim: 8,
            hidden: 8,
        };
        let mut block = BlockConfig::new(8);
        block.d_state = 4;
        block.deform.radius = 0.5;
        ModelConfig {
            embed,
            block,
            depth: 1,
            hilbert_order: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.block.d_model != self.embed.dim {
            return Err(Error::Config(format!(
                "block width {} differs from embedding width {}",
                self.block.d_model, self.embed.dim
            )));
        }
        if !self.embed.dim.is_multiple_of(2) {
            return Err(Error::Config("feature width must be even".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if self.hilbert_order == 0 || self.hilbert_order > MAX_ORDER {
            return Err(Error::Config(format!("hilbert order must be in 1..={MAX_ORDER}")));
        }
        let d = &self.block.deform;
        if d.k_q == 0 || d.k_r == 0 {
            return Err(Error::Config("k_q and k_r must be positive".into()));
        }
        if !(d.radius > 0.0 && d.sigma_s > 0.0 && d.sigma_t > 0.0) {
            return Err(Error::Config("radius, sigma_s and sigma_t must be positive".into()));
        }
        if d.kernel_width.is_multiple_of(2) {
            return Err(Error::Config("kernel width must be odd".into()));
        }
        if self.block.d_state == 0 || self.block.expand == 0 || self.block.d_conv == 0 {
            return Err(Error::Config("d_state, expand and d_conv must be positive".into()));
        }
        crate::tpff::effective_groups(self.block.d_inner(), self.block.groups)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub embed: EmbedParams<T>,
    pub encoder: Encoder<T>,
    pub config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub embedding: Embedding<T>,
    pub stages: Vec<StageOutput<T>>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn tokens(&self) -> &crate::tensor::Mat<T> {
        self.stages.last().map_or(&self.embedding.tokens, |s| &s.tokens)
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(seed: u64, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        Ok(Model {
            embed: EmbedParams::init(&init, "embed", config.embed)?,
            encoder: Encoder::init(&init, config.block, config.depth)?,
            config,
        })
    }

    pub fn forward(&self, cloud: &PointCloud<T>) -> Result<Vec<ModelOutput<T>>> {
        self.forward_with(cloud, &Passthrough)
    }

    pub fn forward_with(&self, cloud: &PointCloud<T>, enhancer: &dyn LocalEnhancer<T>) -> Result<Vec<ModelOutput<T>>> {
        embed(cloud, &self.embed, self.config.hilbert_order)?
            .into_iter()
            .map(|e| {
                let stages = self.encoder.forward(&e.tokens, &e.centers, &e.base_index, enhancer)?;
                Ok(ModelOutput { embedding: e, stages })
            })
            .collect()
    }

    pub fn map<U: Scalar>(&self, f: &impl Fn(T) -> U) -> Model<U> {
        Model {
            embed: self.embed.map(f),
            encoder: self.encoder.map(f),
            config: self.config,
        }
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
    }
}
