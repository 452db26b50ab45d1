//! One pipeline implementation behind both the CLI and the HTTP service.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{BackendError, EmbedItem, Gateway};
use crate::config::{ConfigError, PipelineConfig};
use crate::detector::{DemoPool, DetectConfig, DetectError, DetectFailure, DetectionRun, Detector};
use crate::index::{EmbeddingIndex, IndexError};
use crate::manifest::{ingest_manifest, ManifestError};
use crate::mitigator::{MitigateError, MitigateFailure, Mitigation, MitigationRun, Mitigator, SubstituteCollection};
use crate::model::{DetectionResult, MemeRecord, MultimodalChoice};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Detect(#[from] DetectFailure),
    #[error(transparent)]
    Mitigate(#[from] MitigateFailure),
    #[error("embedding {id}: {source}")]
    Embed {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("mitigation needs a substitute collection (index + manifest)")]
    NoSubstitutes,
}

/// Embed every record's image and index it under the record id, tagged with
/// its gold label when present. Insertion order is by id.
pub fn build_index(gateway: &Gateway, records: &[MemeRecord]) -> Result<EmbeddingIndex, PipelineError> {
    let mut sorted: Vec<&MemeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let vectors = sorted
        .par_iter()
        .map(|r| {
            gateway.embed(EmbedItem::Image(&r.image)).map_err(|source| PipelineError::Embed {
                id: r.id.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut index = EmbeddingIndex::new(gateway.embedding_dim());
    for (record, vector) in sorted.into_iter().zip(vectors) {
        index.insert(record.id.clone(), vector, record.label)?;
    }
    Ok(index)
}

/// Load a manifest, keeping only valid lines (invalid ones are logged).
pub fn load_records(manifest: &Path) -> Result<Vec<MemeRecord>, PipelineError> {
    let m = ingest_manifest(manifest)?;
    for e in &m.errors {
        tracing::warn!("{}: {e}", manifest.display());
    }
    Ok(m.records)
}

pub fn load_pool(index: &Path, manifest: &Path) -> Result<DemoPool, PipelineError> {
    Ok(DemoPool::new(EmbeddingIndex::load(index)?, load_records(manifest)?)?)
}

pub fn load_substitutes(index: &Path, manifest: &Path) -> Result<SubstituteCollection, PipelineError> {
    Ok(SubstituteCollection::from_records(EmbeddingIndex::load(index)?, load_records(manifest)?)?)
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Arc<Gateway>,
    detector: Detector,
    mitigator: Option<Mitigator>,
}

fn check_dim(what: &str, index: &EmbeddingIndex, gateway: &Gateway) -> Result<(), ConfigError> {
    if index.dim() != gateway.embedding_dim() {
        return Err(ConfigError::Invalid(format!(
            "{what} index has dim {}, embedding backend produces {}",
            index.dim(),
            gateway.embedding_dim()
        )));
    }
    Ok(())
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        pool: Option<(String, DemoPool)>,
        substitutes: Option<SubstituteCollection>,
    ) -> Result<Self, PipelineError> {
        let gateway = Arc::new(config.build_gateway()?);
        Self::with_gateway(config, gateway, pool, substitutes)
    }

    /// Like [`Pipeline::new`] with an externally built gateway.
    pub fn with_gateway(
        config: PipelineConfig,
        gateway: Arc<Gateway>,
        pool: Option<(String, DemoPool)>,
        substitutes: Option<SubstituteCollection>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let (pool_name, pool) = match pool {
            Some((name, p)) => {
                check_dim("demonstration", p.index(), &gateway)?;
                (Some(name), Some(Arc::new(p)))
            }
            None => (None, None),
        };
        let detect_cfg = DetectConfig {
            shots: config.shots,
            use_ocr: config.use_ocr,
            backend: config.backend_label(),
            pool: pool_name,
        };
        let detector = Detector::new(gateway.clone(), detect_cfg, pool)?;
        let mitigator = match substitutes {
            Some(s) => {
                check_dim("substitute", s.index(), &gateway)?;
                Some(Mitigator::new(gateway.clone(), Arc::new(s), config.build_compositor()?, config.k))
            }
            None => None,
        };
        Ok(Pipeline {
            config,
            gateway,
            detector,
            mitigator,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn can_mitigate(&self) -> bool {
        self.mitigator.is_some()
    }

    pub fn detect_one(&self, meme: &MemeRecord) -> Result<DetectionResult, DetectError> {
        self.detector.detect_one(meme)
    }

    pub fn detect(&self, memes: &[MemeRecord]) -> DetectionRun {
        self.detector.run(memes)
    }

    fn mitigator(&self) -> Result<&Mitigator, PipelineError> {
        self.mitigator.as_ref().ok_or(PipelineError::NoSubstitutes)
    }

    pub fn mitigate_one(&self, meme: &MemeRecord, choice: MultimodalChoice) -> Result<Result<Mitigation, MitigateError>, PipelineError> {
        Ok(self.mitigator()?.mitigate(meme, choice))
    }

    pub fn mitigate(&self, memes: &[MemeRecord], choice: MultimodalChoice) -> Result<MitigationRun, PipelineError> {
        Ok(self.mitigator()?.run(memes, choice))
    }
}

/// Index records by id.
pub fn by_id(records: Vec<MemeRecord>) -> HashMap<String, MemeRecord> {
    records.into_iter().map(|r| (r.id.clone(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageHandle, Label};
    use image::{Rgb, RgbImage};

    fn records() -> Vec<MemeRecord> {
        (0..6)
            .map(|i| {
                let img = RgbImage::from_pixel(8, 8, Rgb([i * 30, 5, 5]));
                let label = if i % 2 == 0 { Label::Hateful } else { Label::NonHateful };
                MemeRecord::new(format!("p{i}"), ImageHandle::from_raster(img), "t").with_label(label)
            })
            .collect()
    }

    #[test]
    fn index_build_is_ordered_and_tagged() {
        let gw = PipelineConfig::default().build_gateway().unwrap();
        let mut recs = records();
        recs.reverse();
        let index = build_index(&gw, &recs).unwrap();
        let ids: Vec<_> = index.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["p0", "p1", "p2", "p3", "p4", "p5"]);
        assert_eq!(index.get("p1").unwrap().class_tag, Some(Label::NonHateful));
        assert_eq!(index.to_bytes(), build_index(&gw, &records()).unwrap().to_bytes());
    }

    #[test]
    fn few_shot_pipeline_runs_and_dim_mismatch_is_a_config_error() {
        let cfg = PipelineConfig {
            shots: 2,
            ..Default::default()
        };
        let gw = Arc::new(cfg.build_gateway().unwrap());
        let index = build_index(&gw, &records()).unwrap();
        let pool = DemoPool::new(index, records()).unwrap();
        let p = Pipeline::with_gateway(cfg.clone(), gw, Some(("train".into(), pool)), None).unwrap();
        let run = p.detect(&records());
        assert_eq!(run.results.len() + run.failures.len(), 6);
        assert!(matches!(p.mitigate(&records(), MultimodalChoice::Both), Err(PipelineError::NoSubstitutes)));

        let small = DemoPool::new(EmbeddingIndex::new(3), Vec::new()).unwrap();
        assert!(matches!(
            Pipeline::new(cfg, Some(("x".into(), small)), None),
            Err(PipelineError::Config(ConfigError::Invalid(_)))
        ));
    }
}
