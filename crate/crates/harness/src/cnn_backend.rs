//! [`Backend`] that trains real networks: one plan per configuration, `M`
//! shared weight sets, single precision.

use poolmix::rng::{Purpose, Stream};
use poolmix::search_space::Catalog;
use poolmix::Backend;
use poolmix_cnn::{
    build_network, evaluate, lr_at, train_step, NetworkPlan, Sgd, Tensor4, WeightSet,
};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_cifar_binary, split_half, synth_dataset, ImageSet};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CnnSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub full_eval_batches: Option<usize>,
    pub seed: u64,
}

pub struct CnnBackend {
    plans: Vec<NetworkPlan>,
    weights: Vec<WeightSet<f32>>,
    train: ImageSet,
    val: ImageSet,
    settings: CnnSettings,
    batch_rng: Stream,
    val_rng: Stream,
}

fn substream(seed: u64, n: u64) -> Stream {
    Stream::with_stream_id(seed, ((Purpose::DataSplit as u64) << 32) | n)
}

impl CnnBackend {
    /// Splits `data` 50/50 by seeded shuffle and initialises `num_models`
    /// weight sets.
    pub fn new(
        plans: Vec<NetworkPlan>,
        data: &ImageSet,
        num_models: usize,
        settings: CnnSettings,
    ) -> Result<Self> {
        let first = plans
            .first()
            .ok_or_else(|| HarnessError::Data("no network plans".into()))?;
        if data.side() != first.input_size() as usize || data.channels() != first.input_channels() {
            return Err(HarnessError::Data(format!(
                "images are {}x{}x{}, networks expect {}x{}x{}",
                data.channels(),
                data.side(),
                data.side(),
                first.input_channels(),
                first.input_size(),
                first.input_size()
            )));
        }
        let (tr, va) = split_half(data.len(), settings.seed);
        if va.is_empty() {
            return Err(HarnessError::Data("dataset too small to split".into()));
        }
        let weights = (0..num_models)
            .map(|m| WeightSet::init(first, m, settings.seed))
            .collect();
        Ok(Self {
            train: data.subset(&tr)?,
            val: data.subset(&va)?,
            weights,
            batch_rng: substream(settings.seed, 1),
            val_rng: substream(settings.seed, 2),
            plans,
            settings,
        })
    }

    pub fn from_config(
        cfg: &ExperimentConfig,
        catalog: &Catalog,
        num_models: usize,
    ) -> Result<Self> {
        let data = match cfg.dataset {
            DatasetKind::Synthetic => {
                synth_dataset(cfg.seed, cfg.synth_per_class, cfg.input_size as usize)?
            }
            DatasetKind::Cifar => {
                let path = cfg
                    .data_path
                    .as_ref()
                    .ok_or_else(|| HarnessError::Data("dataset cifar needs data_path".into()))?;
                load_cifar_binary(path)?
            }
        };
        let channels = cfg.channel_schedule();
        let plans = catalog
            .configs()
            .iter()
            .map(|c| {
                build_network(
                    catalog.space(),
                    c,
                    &channels,
                    data.channels(),
                    cfg.input_size,
                    data.num_classes,
                )
            })
            .collect::<poolmix_cnn::Result<Vec<_>>>()?;
        let settings = CnnSettings {
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            full_eval_batches: cfg.full_eval_batches,
            seed: cfg.seed,
        };
        Self::new(plans, &data, num_models, settings)
    }

    pub fn plan(&self, config: usize) -> &NetworkPlan {
        &self.plans[config]
    }

    pub fn weights(&self, model: usize) -> &WeightSet<f32> {
        &self.weights[model]
    }

    pub fn train_set(&self) -> &ImageSet {
        &self.train
    }

    pub fn val_set(&self) -> &ImageSet {
        &self.val
    }

    fn draw(set: &ImageSet, size: usize, rng: &mut Stream) -> Result<(Tensor4<f32>, Vec<usize>)> {
        let idx: Vec<usize> = (0..size.min(set.len()))
            .map(|_| rng.index(set.len()))
            .collect();
        set.batch(&idx)
    }

    fn batches(
        set: &ImageSet,
        size: usize,
        limit: Option<usize>,
    ) -> Result<Vec<(Tensor4<f32>, Vec<usize>)>> {
        let idx: Vec<usize> = (0..set.len()).collect();
        idx.chunks(size)
            .take(limit.unwrap_or(usize::MAX))
            .map(|c| set.batch(c))
            .collect()
    }

    /// Eval-mode accuracy of `(config, model)` on the whole training half.
    pub fn train_accuracy(&self, config: usize, model: usize) -> Result<f64> {
        let b = Self::batches(&self.train, self.settings.batch_size, None)?;
        Ok(evaluate(&self.plans[config], &self.weights[model], &b)?)
    }

    fn check(&self, config: usize, model: usize) -> poolmix::Result<()> {
        if config >= self.plans.len() {
            return Err(poolmix::Error::IndexOutOfRange {
                name: "config",
                index: config,
                len: self.plans.len(),
            });
        }
        if model >= self.weights.len() {
            return Err(poolmix::Error::IndexOutOfRange {
                name: "model",
                index: model,
                len: self.weights.len(),
            });
        }
        Ok(())
    }
}

fn to_core(e: HarnessError) -> poolmix::Error {
    match e {
        HarnessError::Core(inner) => inner,
        HarnessError::Cnn(inner) => inner.into(),
        other => poolmix::Error::InvalidParameter(other.to_string()),
    }
}

impl Backend for CnnBackend {
    fn num_configs(&self) -> usize {
        self.plans.len()
    }

    fn num_models(&self) -> usize {
        self.weights.len()
    }

    fn train(
        &mut self,
        config: usize,
        model: usize,
        step: usize,
        total_steps: usize,
    ) -> poolmix::Result<Option<f64>> {
        self.check(config, model)?;
        let (x, y) = Self::draw(&self.train, self.settings.batch_size, &mut self.batch_rng)
            .map_err(to_core)?;
        let opt = Sgd {
            lr: lr_at(step.min(total_steps), total_steps, self.settings.lr),
            momentum: self.settings.momentum,
            weight_decay: self.settings.weight_decay,
        };
        let loss = train_step(&self.plans[config], &mut self.weights[model], &x, &y, &opt)?;
        Ok(Some(loss))
    }

    fn validate_minibatch(&mut self, config: usize, model: usize) -> poolmix::Result<f64> {
        self.check(config, model)?;
        let b =
            Self::draw(&self.val, self.settings.batch_size, &mut self.val_rng).map_err(to_core)?;
        Ok(evaluate(&self.plans[config], &self.weights[model], &[b])?)
    }

    fn evaluate_full(&mut self, config: usize, model: usize) -> poolmix::Result<f64> {
        self.check(config, model)?;
        let b = Self::batches(
            &self.val,
            self.settings.batch_size,
            self.settings.full_eval_batches,
        )
        .map_err(to_core)?;
        Ok(evaluate(&self.plans[config], &self.weights[model], &b)?)
    }
}
