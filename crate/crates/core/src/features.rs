//! The five pre-extracted feature streams and per-role bundles of them.

use serde::{Deserialize, Serialize};

use crate::error::{DatError, Result};
use crate::tensor::Tensor;

/// One pre-extracted per-frame feature stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Prosodic audio descriptors (OpenSmile).
    Opensmile,
    /// Speech representation (W2v-BERT 2.0).
    W2vBert,
    /// Visual embedding (CLIP).
    Clip,
    /// Facial behaviour (OpenFace).
    OpenFace,
    /// Body pose (OpenPose).
    OpenPose,
}

impl Stream {
    pub const ALL: [Stream; 5] = [
        Stream::Opensmile,
        Stream::W2vBert,
        Stream::Clip,
        Stream::OpenFace,
        Stream::OpenPose,
    ];
    pub const AUDIO: [Stream; 2] = [Stream::Opensmile, Stream::W2vBert];
    pub const VIDEO: [Stream; 3] = [Stream::Clip, Stream::OpenFace, Stream::OpenPose];

    pub fn index(self) -> usize {
        self as usize
    }

    /// File stem used in session directories.
    pub fn file_stem(self) -> &'static str {
        match self {
            Stream::Opensmile => "opensmile",
            Stream::W2vBert => "w2vbert",
            Stream::Clip => "clip",
            Stream::OpenFace => "openface",
            Stream::OpenPose => "openpose",
        }
    }

    /// Short key used in manifests and config files.
    pub fn key(self) -> &'static str {
        match self {
            Stream::Opensmile => "E",
            Stream::W2vBert => "W",
            Stream::Clip => "C",
            Stream::OpenFace => "OF",
            Stream::OpenPose => "OP",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    #[serde(rename = "E")]
    pub opensmile: usize,
    #[serde(rename = "W")]
    pub w2vbert: usize,
    #[serde(rename = "C")]
    pub clip: usize,
    #[serde(rename = "OF")]
    pub openface: usize,
    #[serde(rename = "OP")]
    pub openpose: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            opensmile: 88,
            w2vbert: 1024,
            clip: 512,
            openface: 714,
            openpose: 139,
        }
    }
}

impl FeatureDims {
    pub fn uniform(dim: usize) -> Self {
        FeatureDims {
            opensmile: dim,
            w2vbert: dim,
            clip: dim,
            openface: dim,
            openpose: dim,
        }
    }

    pub fn get(&self, s: Stream) -> usize {
        match s {
            Stream::Opensmile => self.opensmile,
            Stream::W2vBert => self.w2vbert,
            Stream::Clip => self.clip,
            Stream::OpenFace => self.openface,
            Stream::OpenPose => self.openpose,
        }
    }

    pub fn set(&mut self, s: Stream, dim: usize) {
        match s {
            Stream::Opensmile => self.opensmile = dim,
            Stream::W2vBert => self.w2vbert = dim,
            Stream::Clip => self.clip = dim,
            Stream::OpenFace => self.openface = dim,
            Stream::OpenPose => self.openpose = dim,
        }
    }

    pub fn total(&self) -> usize {
        Stream::ALL.iter().map(|s| self.get(*s)).sum()
    }
}

/// The five streams of one role, each `[L × dim]` with a shared `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    streams: [Tensor; 5],
}

impl FeatureBundle {
    pub fn new(streams: [Tensor; 5]) -> Result<Self> {
        let len = streams[0].shape().first().copied().unwrap_or(0);
        for (s, t) in Stream::ALL.iter().zip(&streams) {
            if t.rank() != 2 {
                return Err(DatError::Data(format!(
                    "stream {} must be a matrix, got shape {:?}",
                    s.file_stem(),
                    t.shape()
                )));
            }
            if t.shape()[0] != len {
                return Err(DatError::Data(format!(
                    "stream {} has {} rows, expected {len}",
                    s.file_stem(),
                    t.shape()[0]
                )));
            }
        }
        Ok(FeatureBundle { streams })
    }

    pub fn zeros(len: usize, dims: &FeatureDims) -> Self {
        FeatureBundle {
            streams: Stream::ALL.map(|s| Tensor::zeros(&[len, dims.get(s)])),
        }
    }

    pub fn get(&self, s: Stream) -> &Tensor {
        &self.streams[s.index()]
    }

    pub fn get_mut(&mut self, s: Stream) -> &mut Tensor {
        &mut self.streams[s.index()]
    }

    pub fn len(&self) -> usize {
        self.streams[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> FeatureDims {
        let mut d = FeatureDims::uniform(0);
        for s in Stream::ALL {
            d.set(s, self.get(s).last_dim());
        }
        d
    }

    pub fn check_dims(&self, expected: &FeatureDims) -> Result<()> {
        for s in Stream::ALL {
            let got = self.get(s).last_dim();
            if got != expected.get(s) {
                return Err(DatError::Shape {
                    op: "feature bundle",
                    lhs: self.get(s).shape().to_vec(),
                    rhs: vec![self.len(), expected.get(s)],
                });
            }
        }
        Ok(())
    }

    /// Gathers rows `idx` from every stream.
    pub fn gather_rows(&self, idx: &[usize]) -> FeatureBundle {
        FeatureBundle {
            streams: std::array::from_fn(|i| {
                let src = &self.streams[i];
                let c = src.last_dim();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    data.extend_from_slice(src.row(r));
                }
                Tensor::new(vec![idx.len(), c], data).expect("gather shape")
            }),
        }
    }

    pub fn into_streams(self) -> [Tensor; 5] {
        self.streams
    }
}
