//! Settings shared by the `process` subcommand and the upload endpoint.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use vidscript_core::backends::{build_asr_backend, build_model_backend, BackendConfig, BackendKind};
use vidscript_core::knowledge::{load_gallery, parse_meta_pair};
use vidscript_core::media::{AutoDecoder, Decoder, SubprocessDecoder};
use vidscript_core::pipeline::{Backends, Pipeline, Store};
use vidscript_core::{JobConfig, KnowledgePack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// Deterministic offline backends.
    Mock,
    /// Remote services configured through environment variables.
    Http,
}

pub fn backends(choice: BackendChoice) -> anyhow::Result<Backends> {
    Ok(match choice {
        BackendChoice::Mock => Backends::mock(),
        BackendChoice::Http => Backends {
            lmm: build_model_backend(&BackendConfig::http_from_env(BackendKind::Lmm)?)?,
            llm: build_model_backend(&BackendConfig::http_from_env(BackendKind::Llm)?)?,
            asr: build_asr_backend(&BackendConfig::http_from_env(BackendKind::Asr)?)?,
        },
    })
}

pub fn decoder() -> Arc<dyn Decoder> {
    Arc::new(AutoDecoder::new(SubprocessDecoder::from_env()))
}

/// Opens (or creates) the store and wires a pipeline around it.
pub fn open_pipeline(store_path: &Path, backends: Backends) -> anyhow::Result<Pipeline> {
    if let Some(dir) = store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let store = Store::open(store_path).with_context(|| format!("opening store {}", store_path.display()))?;
    Ok(Pipeline::new(Arc::new(store), decoder(), backends))
}

/// Per-job knobs. Unset fields keep the pipeline defaults.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct JobOptions {
    /// Scene-cut threshold on the mean HSV delta (0..255).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Longest clip in seconds; longer scenes are split.
    #[arg(long = "max-clip-len")]
    pub max_clip_len: Option<f64>,
    #[arg(long = "frames-per-clip")]
    pub frames_per_clip: Option<usize>,
    #[arg(long = "refine-passes")]
    pub refine_passes: Option<u32>,
    /// Also generate an audio-description track.
    #[arg(long)]
    pub ad: bool,
    /// Narration speed for the audio-description track.
    #[arg(long = "ad-wpm")]
    pub ad_wpm: Option<f64>,
}

impl JobOptions {
    pub fn to_config(&self) -> JobConfig {
        let mut c = JobConfig::default();
        if let Some(t) = self.threshold {
            c.segmentation.threshold = t;
        }
        if let Some(m) = self.max_clip_len {
            c.segmentation.max_clip_len_s = m;
        }
        if let Some(n) = self.frames_per_clip {
            c.frames_per_clip = n;
        }
        if let Some(n) = self.refine_passes {
            c.refine_passes = n;
        }
        c.ad = self.ad;
        if let Some(w) = self.ad_wpm {
            c.ad_wpm = w;
        }
        c
    }
}

/// Knowledge-pack inputs as they arrive from flags or form fields.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct PackOptions {
    #[arg(long)]
    pub title: Option<String>,
    #[arg(long = "abstract")]
    pub abstract_text: Option<String>,
    /// Metadata entry, repeatable.
    #[arg(long = "meta", value_name = "KEY=VALUE")]
    pub meta: Vec<String>,
    /// Directory of face images named after the character.
    #[arg(long)]
    pub faces: Option<PathBuf>,
}

impl PackOptions {
    pub fn build(&self) -> Result<KnowledgePack, vidscript_core::knowledge::KnowledgeError> {
        let metadata = self.meta.iter().map(|m| parse_meta_pair(m)).collect::<Result<_, _>>()?;
        let gallery = match &self.faces {
            Some(dir) => load_gallery(dir)?,
            None => Vec::new(),
        };
        KnowledgePack::build(self.title.clone(), self.abstract_text.clone(), metadata, gallery)
    }
}
