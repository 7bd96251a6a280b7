//! A training run on disk: the resolved config, the ids of the training
//! images in row order, and a checkpoint.

use std::fs;
use std::path::Path;

use softmesh_tensor::Array;

use super::config::RunConfig;
use super::dataset::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::model::{Decoded, LatentMode, SceneModel, Source};
use crate::trainer::{Metrics, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const IDS_FILE: &str = "images.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct Run {
    pub config: RunConfig,
    /// Training image ids; row `i` of an auto-decoder is `ids[i]`.
    pub ids: Vec<String>,
    pub trainer: Trainer,
}

impl Run {
    pub fn new(mut config: RunConfig, images: &ImageSet) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid("no training images"));
        }
        if images.image_size() != config.model.image_size {
            return Err(invalid(format!(
                "images are {0}x{0} but model.image_size is {1}",
                images.image_size(),
                config.model.image_size
            )));
        }
        config.model = config.model_for(images.len())?;
        let model = SceneModel::new(config.model.clone(), config.train.seed)?;
        let trainer = Trainer::new(model, config.train.clone())?;
        Ok(Run {
            config,
            ids: images.ids().to_vec(),
            trainer,
        })
    }

    /// Trains for `iterations` steps or, when `None`, until every stage
    /// budget is spent.
    pub fn train(&mut self, images: &ImageSet, iterations: Option<usize>, mut log: impl FnMut(&Metrics)) -> Result<()> {
        if images.ids() != self.ids.as_slice() {
            return Err(invalid("training images differ from the ones the run was created with"));
        }
        let mut left = iterations;
        while !self.trainer.scheduler.finished() && left != Some(0) {
            let m = self.trainer.train_step(images.images())?;
            log(&m);
            left = left.map(|n| n - 1);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml_string()?)?;
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        fs::write(dir.join(IDS_FILE), ids)?;
        self.trainer.save_checkpoint(&dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE), &[])?;
        let ids: Vec<String> = fs::read_to_string(dir.join(IDS_FILE))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if config.model.mode == LatentMode::AutoDecoder && config.model.num_images != ids.len() {
            return Err(Error::Config(format!(
                "{}: {} latent rows but {} image ids",
                dir.display(),
                config.model.num_images,
                ids.len()
            )));
        }
        let model = SceneModel::new(config.model.clone(), config.train.seed)?;
        let mut trainer = Trainer::new(model, config.train.clone())?;
        trainer.load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        Ok(Run { config, ids, trainer })
    }

    pub fn model(&self) -> &SceneModel {
        &self.trainer.model
    }

    /// Reconstructions of training images by id, at the current stage.
    pub fn reconstruct_ids(&self, ids: &[String], images: Option<&ImageSet>) -> Result<Vec<Decoded>> {
        let cond = self.trainer.scheduler.conditioning();
        match self.config.model.mode {
            LatentMode::AutoDecoder => {
                let rows = ids
                    .iter()
                    .map(|id| {
                        self.ids
                            .iter()
                            .position(|x| x == id)
                            .ok_or_else(|| invalid(format!("{id} is not a training image of this run")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.model().decode(Source::Rows(&rows), cond)
            }
            LatentMode::Encoder => {
                let set = images.ok_or_else(|| invalid("encoder runs reconstruct from images"))?;
                let picked = ids
                    .iter()
                    .map(|id| {
                        set.ids()
                            .iter()
                            .position(|x| x == id)
                            .map(|i| set.images()[i].clone())
                            .ok_or_else(|| invalid(format!("no image {id}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.reconstruct_images(&picked)
            }
        }
    }

    /// Reconstructions of arbitrary images; encoder runs only.
    pub fn reconstruct_images(&self, images: &[Array]) -> Result<Vec<Decoded>> {
        if self.config.model.mode != LatentMode::Encoder {
            return Err(invalid("auto-decoder runs can only reconstruct their training images"));
        }
        let n = self.config.model.image_size;
        if let Some(a) = images.iter().find(|a| a.shape() != [n, n, 3]) {
            return Err(invalid(format!("expected {n}x{n} RGB images, got {:?}", a.shape())));
        }
        let mut out = Vec::with_capacity(images.len());
        // small chunks bound the tape size
        for chunk in images.chunks(16) {
            let data: Vec<f64> = chunk.iter().flat_map(|a| a.data().iter().copied()).collect();
            let batch = Array::new([chunk.len(), n, n, 3], data)?;
            out.extend(self.model().decode(Source::Images(&batch), self.trainer.scheduler.conditioning())?);
        }
        Ok(out)
    }
}
