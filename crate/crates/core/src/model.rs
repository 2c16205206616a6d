//! The full network (backbone and matcher over one parameter store) and its
//! checkpoint format.
//!
//! A checkpoint file is laid out as:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `GMRWCKPT` |
//! | 4 | format version, little-endian `u32` (currently 1) |
//! | 8 | header length `L`, little-endian `u64` |
//! | `L` | UTF-8 JSON header: `{"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}` |
//! | rest | tensor data as little-endian `f32`; `offset` counts values from the start of this block |

use std::fs;
use std::io::Write;
use std::path::Path;

use gmrw_tape::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::clip::Frame;
use crate::error::{Error, Result};
use crate::grid::grid_coordinates;
use crate::matcher::{transition_probs, Matcher, MatcherConfig, TransitionMatrix};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"GMRWCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub matcher: MatcherConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.matcher.validate(self.backbone.feature_dim)
    }
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    backbone: Backbone,
    matcher: Matcher,
}

impl<S: Scalar> Model<S> {
    /// Randomly initialised model; the seed fixes every weight.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut params, &mut rng)?;
        let matcher = Matcher::new(&config.matcher, config.backbone.feature_dim, &mut params, &mut rng)?;
        Ok(Self { config: config.clone(), params, backbone, matcher })
    }

    /// Rebuilds the module structure for `config` around existing weights.
    pub fn from_params(config: &ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, checkpoint has {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, value)) in params.iter().enumerate() {
            let (want_name, want) = (model.params.name(i), model.params.get(i));
            if want_name != name || want.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {want_name} {:?}, found {name} {:?}",
                    want.shape(),
                    value.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            matcher: self.matcher.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim
    }

    /// Tokens `[N, n, d]` for same-sized frames at `stride`.
    pub fn encode<'t>(&self, tape: &'t Tape<S>, frames: &[&Frame], stride: usize) -> Result<Var<'t, S>> {
        self.backbone.forward(tape, &self.params, frames, stride)
    }

    /// Correlated features for batches of token pairs on a `rows × cols` grid.
    pub fn correlate<'t>(
        &self,
        tape: &'t Tape<S>,
        a: &Var<'t, S>,
        b: &Var<'t, S>,
        grid: (usize, usize),
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        self.matcher.forward(tape, &self.params, a, b, grid)
    }
}

impl Model<f32> {
    /// Tokens of each frame, encoded one at a time.
    pub fn frame_tokens(&self, frames: &[&Frame], stride: usize) -> Result<Vec<Tensor<f32>>> {
        frames
            .iter()
            .map(|f| {
                let tape = Tape::inference();
                let t = self.encode(&tape, &[f], stride)?;
                let shape = [t.shape()[1], t.shape()[2]];
                Ok(t.value().clone().reshaped(&shape))
            })
            .collect()
    }

    /// Transition matrices `a → b` and `b → a` from one matcher pass.
    pub fn transitions(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        grid: (usize, usize),
    ) -> Result<(TransitionMatrix, TransitionMatrix)> {
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let tape = Tape::inference();
        let va = tape.constant(a.clone().reshaped(&[1, n, d]));
        let vb = tape.constant(b.clone().reshaped(&[1, n, d]));
        let (fa, fb) = self.correlate(&tape, &va, &vb, grid)?;
        if !fa.value().is_finite() || !fb.value().is_finite() {
            return Err(Error::NonFinite("correlation features".into()));
        }
        let ab = transition_probs(&fa, &fb).value().clone().reshaped(&[n, n]);
        let ba = transition_probs(&fb, &fa).value().clone().reshaped(&[n, n]);
        Ok((TransitionMatrix::new(ab, grid, grid)?, TransitionMatrix::new(ba, grid, grid)?))
    }

    /// Both transition matrices between two frames at `stride`.
    pub fn pair_transitions(&self, a: &Frame, b: &Frame, stride: usize) -> Result<(TransitionMatrix, TransitionMatrix)> {
        let grid = grid_coordinates(a.height(), a.width(), stride)?;
        let tokens = self.frame_tokens(&[a, b], stride)?;
        self.transitions(&tokens[0], &tokens[1], (grid.rows(), grid.cols()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
            offset: usize,
        }
        let mut offset = 0;
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push(Entry { name, shape: t.shape(), offset });
            offset += t.numel();
        }
        let header = serde_json::json!({ "config": self.config, "tensors": tensors });
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(20 + header.len() + offset * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            config: ModelConfig,
            tensors: Vec<Entry>,
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;
        let data = &bytes[header_end..];
        if data.len() % 4 != 0 {
            return Err(bad("tensor block is not a whole number of f32 values"));
        }
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut params = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + n).ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
            params.add(e.name, Tensor::new(&e.shape, slice.to_vec()));
        }
        if !params.all_finite() {
            return Err(bad("non-finite weights"));
        }
        Self::from_params(&header.config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { feature_dim: 8, base_channels: 4, ..Default::default() },
            matcher: MatcherConfig { num_layers: 1, ffn_expansion: 2, ..Default::default() },
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::<f32>::new(&tiny(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!((na, a), (nb, b));
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"GMRWCKPT\x02\0\0\0").unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
        let m = Model::<f32>::new(&tiny(), 5).unwrap();
        m.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let m = Model::<f32>::new(&tiny(), 5).unwrap();
        let mut other = tiny();
        other.matcher.num_layers = 2;
        assert!(Model::from_params(&other, m.params.clone()).is_err());
    }

    #[test]
    fn seeds_fix_the_weights() {
        let a = Model::<f32>::new(&tiny(), 9).unwrap();
        let b = Model::<f32>::new(&tiny(), 9).unwrap();
        let c = Model::<f32>::new(&tiny(), 10).unwrap();
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x == y));
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn untrained_transitions_are_stochastic() {
        let m = Model::<f32>::new(&tiny(), 1).unwrap();
        let a = Frame::from_fn(16, 16, |x, y| [((x * y) % 7) as f32 / 7.0, 0.5, x as f32 / 16.0]);
        let b = Frame::from_fn(16, 16, |x, y| [((x + y) % 5) as f32 / 5.0, 0.2, y as f32 / 16.0]);
        let (ab, ba) = m.pair_transitions(&a, &b, 4).unwrap();
        assert!(ab.row_sum_error() < 1e-5 && ba.row_sum_error() < 1e-5);
        assert_eq!(ab.probs.shape(), &[16, 16]);
    }
}
